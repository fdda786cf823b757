#include "dppkit/quant.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace dppkit {

namespace {

// (2j - (L-1)) / (L-1): exact at both endpoints and symmetric under negation.
double level(std::uint32_t code, std::size_t count) {
  const double top = static_cast<double>(count - 1);
  return (2.0 * static_cast<double>(code) - top) / top;
}

}  // namespace

QuantSpec::QuantSpec(unsigned bits) : bits_(bits) {
  if (bits != 1 && bits != 2 && bits != 8 && bits != 32) {
    throw std::invalid_argument("unsupported weight bit width " + std::to_string(bits) +
                                " (expected 1, 2, 8 or 32)");
  }
}

double QuantSpec::step() const {
  if (full_precision()) return 0.0;
  return 2.0 / static_cast<double>(levels() - 1);
}

std::uint32_t QuantSpec::code_of(float quantized) const {
  if (full_precision()) throw std::logic_error("code_of is undefined for 32-bit weights");
  const double code = std::round((static_cast<double>(quantized) + 1.0) / step());
  return static_cast<std::uint32_t>(std::clamp(code, 0.0, static_cast<double>(levels() - 1)));
}

float QuantSpec::value_of(std::uint32_t code) const {
  if (full_precision()) throw std::logic_error("value_of is undefined for 32-bit weights");
  return static_cast<float>(level(code, levels()));
}

double quantize_value(double latent, const QuantSpec& spec) {
  if (spec.full_precision()) return latent;
  if (!std::isfinite(latent)) throw std::domain_error("non-finite latent weight");
  if (spec.bits() == 1) return latent >= 0.0 ? 1.0 : -1.0;
  // Levels are -1 + j*step, j = 0 .. 2^b - 1; both endpoints are on the grid.
  const double clipped = std::clamp(latent, -1.0, 1.0);
  const double code = std::round((clipped + 1.0) / spec.step());
  return level(static_cast<std::uint32_t>(code), spec.levels());
}

template <typename Real>
BasicTensor<Real> quantize_forward(BasicTape<Real>& tape, const BasicTensor<Real>& latent,
                                   const QuantSpec& spec) {
  if (spec.full_precision()) return latent;
  BasicTensor<Real> out(latent.shape());
  auto lv = latent.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = static_cast<Real>(quantize_value(static_cast<double>(lv[i]), spec));
  }
  if (tape.recording() && latent.requires_grad()) {
    out.set_requires_grad(true);
    tape.record([latent, out]() mutable {
      quantize_backward<Real>(latent.values(), out.grad(), latent.grad());
    });
  }
  return out;
}

template <typename Real>
void quantize_backward(std::span<const Real> latent, std::span<const Real> upstream,
                       std::span<Real> grad_latent) {
  if (latent.size() != upstream.size() || latent.size() != grad_latent.size()) {
    throw std::invalid_argument("quantize_backward: size mismatch");
  }
  for (std::size_t i = 0; i < latent.size(); ++i) {
    if (std::abs(latent[i]) <= Real(1)) grad_latent[i] += upstream[i];
  }
}

template <typename Real>
void clip_latent(BasicTensor<Real>& latent, const QuantSpec& spec) {
  if (spec.full_precision()) return;
  for (auto& v : latent.values()) v = std::clamp(v, Real(-1), Real(1));
}

template BasicTensor<float> quantize_forward<float>(BasicTape<float>&, const BasicTensor<float>&,
                                                    const QuantSpec&);
template BasicTensor<double> quantize_forward<double>(BasicTape<double>&, const BasicTensor<double>&,
                                                      const QuantSpec&);
template void quantize_backward<float>(std::span<const float>, std::span<const float>, std::span<float>);
template void quantize_backward<double>(std::span<const double>, std::span<const double>,
                                        std::span<double>);
template void clip_latent<float>(BasicTensor<float>&, const QuantSpec&);
template void clip_latent<double>(BasicTensor<double>&, const QuantSpec&);

}  // namespace dppkit
