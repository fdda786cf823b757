#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "dppkit/tensor.hpp"

namespace dppkit {

/// Weight bit width. 32 is full precision (pass-through); 1 is binary
/// sign; 2 and 8 are symmetric uniform codebooks over [-1, 1].
class QuantSpec {
 public:
  explicit QuantSpec(unsigned bits = 32);

  unsigned bits() const { return bits_; }
  bool full_precision() const { return bits_ == 32; }
  std::size_t levels() const { return std::size_t{1} << bits_; }
  /// Spacing between adjacent codebook levels: 2 / (2^b - 1).
  double step() const;

  /// Codebook index of a value already on the grid (b < 32).
  std::uint32_t code_of(float quantized) const;
  float value_of(std::uint32_t code) const;

 private:
  unsigned bits_;
};

/// Nearest codebook level of a latent weight (after clipping to [-1, 1]).
double quantize_value(double latent, const QuantSpec& spec);

/// Quantized copy of the latent weights. Backward is straight-through,
/// passing the gradient where |latent| <= 1 and zeroing it elsewhere.
template <typename Real>
BasicTensor<Real> quantize_forward(BasicTape<Real>& tape, const BasicTensor<Real>& latent,
                                   const QuantSpec& spec);

/// Straight-through rule on its own: grad_latent += upstream where |latent| <= 1.
template <typename Real>
void quantize_backward(std::span<const Real> latent, std::span<const Real> upstream,
                       std::span<Real> grad_latent);

/// Clips latent weights to [-1, 1] in place; no-op at 32 bits.
template <typename Real>
void clip_latent(BasicTensor<Real>& latent, const QuantSpec& spec);

}  // namespace dppkit
