#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dppkit/gumbel_topk.hpp"
#include "dppkit/tensor.hpp"

namespace dppkit {

enum class Granularity : std::uint8_t { Fine = 0, Medium = 1, Coarse = 2 };
enum class LayerKind : std::uint8_t { FullyConnected = 0, Convolutional = 1 };

std::string_view to_string(Granularity level);
std::string_view to_string(LayerKind kind);
Granularity parse_granularity(std::string_view text);

struct GranularitySpec {
  Granularity level = Granularity::Fine;
  std::size_t k = 1;
};

/// Weight tensor dimensions: n_in x kernel_area x n_out. Fully-connected
/// layers have kernel_area 1.
struct LayerDims {
  std::size_t n_in = 1;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t n_out = 1;

  std::size_t kernel_area() const { return kernel_h * kernel_w; }
  std::size_t weight_count() const { return n_in * kernel_area() * n_out; }
};

/// Everything derived from (layer kind, dims, granularity): the pruning axis,
/// the number of distributions D, classes C, active weights S and the tying
/// map from weight positions to effective logits.
///
/// Fully-connected layers pruned at Fine level keep K of the N_in inputs of
/// every output neuron, i.e. kernel-level pruning with a kernel of size 1.
class MaskGeometry {
 public:
  MaskGeometry(LayerKind kind, LayerDims dims, GranularitySpec spec);

  LayerKind kind() const { return kind_; }
  const LayerDims& dims() const { return dims_; }
  Granularity level() const { return spec_.level; }
  std::size_t k() const { return spec_.k; }

  const SliceLayout& layout() const { return layout_; }
  std::size_t classes() const { return layout_.classes; }
  std::size_t distributions() const { return layout_.distributions(); }

  const Shape& effective_shape() const { return effective_shape_; }
  std::size_t effective_size() const { return layout_.size(); }
  const Shape& weight_shape() const { return weight_shape_; }

  /// S: number of active weights in every hard mask.
  std::size_t active_weights() const;
  /// Scalars a structured-sparse layout must store (values plus indices).
  std::size_t stored_values() const;

  /// Effective logit tied to the flat weight position `weight_index`.
  std::size_t tied_index(std::size_t weight_index) const;

 private:
  LayerKind kind_;
  LayerDims dims_;
  GranularitySpec spec_;
  SliceLayout layout_;
  Shape effective_shape_;
  Shape weight_shape_;
};

/// Trainable unnormalized log-probabilities in their effective (tied) shape.
template <typename Real>
struct BasicPruningLogits {
  BasicTensor<Real> values;
  MaskGeometry geometry;
};

template <typename Real>
BasicPruningLogits<Real> build_logits(LayerKind kind, LayerDims dims, GranularitySpec spec,
                                      Real init = Real(0));

/// One mask draw. `mask` has the full weight shape, hard 0/1 values, and
/// (when recorded) a soft backward path to the logits. `effective` is the
/// hard draw over the effective logits.
template <typename Real>
struct BasicMaskRealization {
  BasicTensor<Real> mask;
  std::vector<std::uint8_t> effective;
};

/// Broadcasts an effective-shape tensor to the full weight shape; the
/// gradient of a tied entry is the sum over its tied positions.
template <typename Real>
BasicTensor<Real> expand_tied(BasicTape<Real>& tape, const BasicTensor<Real>& effective,
                              const MaskGeometry& geometry);

template <typename Real>
BasicMaskRealization<Real> realize_mask(BasicTape<Real>& tape, const BasicPruningLogits<Real>& logits,
                                        const GumbelNoiseField<Real>& noise, Real tau);

/// Hard-only draw (no relaxation, no tape); used at evaluation and export.
template <typename Real>
std::vector<std::uint8_t> draw_hard_mask(const BasicPruningLogits<Real>& logits, Rng& rng,
                                         double beta);

/// Expands an effective hard mask to the full weight shape.
std::vector<std::uint8_t> expand_hard_mask(const std::vector<std::uint8_t>& effective,
                                           const MaskGeometry& geometry);

/// W ⊙ mask. Gradients reach W through the mask values and the mask
/// (and hence the logits) through W.
template <typename Real>
BasicTensor<Real> apply_mask(BasicTape<Real>& tape, const BasicTensor<Real>& weights,
                             const BasicTensor<Real>& mask);

/// Mean over the D distributions of the Shannon entropy (nats) of the
/// softmax of the effective logits along the pruning axis.
template <typename Real>
BasicTensor<Real> entropy_penalty(BasicTape<Real>& tape, const BasicPruningLogits<Real>& logits);

/// Trainable layer state: weights, unmasked bias and pruning logits.
template <typename Real>
struct BasicMaskedLayer {
  BasicTensor<Real> weights;
  BasicTensor<Real> bias;
  BasicPruningLogits<Real> logits;

  const MaskGeometry& geometry() const { return logits.geometry; }
  LayerKind kind() const { return logits.geometry.kind(); }
};

using PruningLogits = BasicPruningLogits<float>;
using MaskRealization = BasicMaskRealization<float>;
using MaskedLayer = BasicMaskedLayer<float>;

}  // namespace dppkit
