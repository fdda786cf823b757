#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "dppkit/dpp_mask.hpp"
#include "dppkit/quant.hpp"
#include "dppkit/random.hpp"
#include "dppkit/tensor.hpp"

namespace dppkit {

enum class Architecture : std::uint8_t { LeNet300_100 = 0, LeNet5Caffe = 1 };

std::string_view to_string(Architecture arch);
Architecture parse_architecture(std::string_view text);

/// One layer of a feed-forward stack. Conv layers apply `pool` (2x2 max)
/// before `relu`; a conv layer feeding a fully-connected one is flattened
/// channel-major.
struct LayerSpec {
  LayerKind kind = LayerKind::FullyConnected;
  LayerDims dims;
  bool relu = false;
  bool pool = false;
};

/// LeNet300-100: fc 784-300-100-10 with relu on the hidden layers.
/// LeNet5-Caffe: conv 20@5x5, pool, conv 50@5x5, pool, fc 800-500 relu, fc 500-10.
std::vector<LayerSpec> architecture_layers(Architecture arch);

/// Number of pixels in one input image (28 x 28).
inline constexpr std::size_t kImageSide = 28;

/// Forward pass of a stack on a [batch x 784] input. Weight layouts are
/// [n_in x n_out] and [cin x kh x kw x cout].
template <typename Real>
BasicTensor<Real> forward_stack(BasicTape<Real>& tape, std::span<const LayerSpec> layers,
                                std::span<const BasicTensor<Real>> weights,
                                std::span<const BasicTensor<Real>> biases, const BasicTensor<Real>& batch);

/// A network with concrete (already masked and quantized) weights.
struct DenseModel {
  Architecture arch = Architecture::LeNet300_100;
  std::vector<LayerSpec> layers;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;

  /// Class scores for a [batch x 784] input, no gradient recording.
  Tensor logits(const Tensor& batch) const;
};

/// Trainable network: latent weights, unmasked biases and pruning logits
/// per layer.
class Network {
 public:
  Network(Architecture arch, const std::vector<GranularitySpec>& pruning, QuantSpec quant, Rng& init);

  Architecture arch() const { return arch_; }
  const std::vector<LayerSpec>& specs() const { return specs_; }
  const QuantSpec& quant() const { return quant_; }
  std::vector<MaskedLayer>& layers() { return layers_; }
  const std::vector<MaskedLayer>& layers() const { return layers_; }

  /// W, b and Φ of every layer, in that order.
  std::vector<Tensor> parameters() const;
  std::size_t weight_count() const;

  /// Weights used in the forward pass: quantize, then mask with the given
  /// full-shape hard masks. The result is a DenseModel sharing no storage
  /// with the network.
  DenseModel freeze(const std::vector<std::vector<std::uint8_t>>& effective_masks) const;

 private:
  Architecture arch_;
  std::vector<LayerSpec> specs_;
  QuantSpec quant_;
  std::vector<MaskedLayer> layers_;
};

/// Xavier-uniform bound sqrt(6 / (fan_in + fan_out)).
double xavier_limit(const LayerSpec& layer);

}  // namespace dppkit
