#include "dppkit/dpp_mask.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "dppkit/ops.hpp"

namespace dppkit {

std::string_view to_string(Granularity level) {
  switch (level) {
    case Granularity::Fine: return "fine";
    case Granularity::Medium: return "medium";
    case Granularity::Coarse: return "coarse";
  }
  return "unknown";
}

std::string_view to_string(LayerKind kind) {
  return kind == LayerKind::FullyConnected ? "fc" : "conv";
}

Granularity parse_granularity(std::string_view text) {
  if (text == "fine" || text == "F" || text == "dpp-f") return Granularity::Fine;
  if (text == "medium" || text == "M" || text == "dpp-m") return Granularity::Medium;
  if (text == "coarse" || text == "C" || text == "dpp-c") return Granularity::Coarse;
  throw std::invalid_argument("unknown granularity '" + std::string(text) + "'");
}

MaskGeometry::MaskGeometry(LayerKind kind, LayerDims dims, GranularitySpec spec)
    : kind_(kind), dims_(dims), spec_(spec) {
  if (dims.n_in == 0 || dims.n_out == 0 || dims.kernel_area() == 0) {
    throw std::invalid_argument("layer dimensions must be positive");
  }
  if (kind == LayerKind::FullyConnected) {
    if (dims.kernel_area() != 1) throw std::invalid_argument("fully-connected layers have a = 1");
    weight_shape_ = {dims.n_in, dims.n_out};
    switch (spec.level) {
      case Granularity::Fine:
      case Granularity::Medium:
        layout_ = {1, dims.n_in, dims.n_out};
        effective_shape_ = {dims.n_in, dims.n_out};
        break;
      case Granularity::Coarse:
        layout_ = {1, dims.n_out, 1};
        effective_shape_ = {1, dims.n_out};
        break;
    }
  } else {
    weight_shape_ = {dims.n_in, dims.kernel_h, dims.kernel_w, dims.n_out};
    const std::size_t a = dims.kernel_area();
    switch (spec.level) {
      case Granularity::Fine:
        layout_ = {dims.n_in, a, dims.n_out};
        effective_shape_ = {dims.n_in, a, dims.n_out};
        break;
      case Granularity::Medium:
        layout_ = {1, dims.n_in, dims.n_out};
        effective_shape_ = {dims.n_in, 1, dims.n_out};
        break;
      case Granularity::Coarse:
        layout_ = {1, dims.n_out, 1};
        effective_shape_ = {1, 1, dims.n_out};
        break;
    }
  }
  validate_topk(spec.k, layout_.classes);
}

std::size_t MaskGeometry::active_weights() const {
  const std::size_t a = dims_.kernel_area();
  if (kind_ == LayerKind::FullyConnected && spec_.level != Granularity::Coarse) {
    return spec_.k * dims_.n_out;
  }
  switch (spec_.level) {
    case Granularity::Fine: return dims_.n_in * spec_.k * dims_.n_out;
    case Granularity::Medium: return spec_.k * a * dims_.n_out;
    case Granularity::Coarse: return dims_.n_in * a * spec_.k;
  }
  return 0;
}

std::size_t MaskGeometry::stored_values() const {
  const std::size_t s = active_weights();
  switch (spec_.level) {
    case Granularity::Fine: return 2 * s;
    case Granularity::Medium: return s + spec_.k * dims_.n_out;
    case Granularity::Coarse: return s;
  }
  return 0;
}

std::size_t MaskGeometry::tied_index(std::size_t weight_index) const {
  const std::size_t a = dims_.kernel_area();
  const std::size_t o = weight_index % dims_.n_out;
  const std::size_t i = weight_index / (a * dims_.n_out);
  switch (spec_.level) {
    case Granularity::Fine: return weight_index;
    case Granularity::Medium: return i * dims_.n_out + o;
    case Granularity::Coarse: return o;
  }
  return 0;
}

template <typename Real>
BasicPruningLogits<Real> build_logits(LayerKind kind, LayerDims dims, GranularitySpec spec,
                                      Real init) {
  MaskGeometry geometry(kind, dims, spec);
  BasicTensor<Real> values(geometry.effective_shape(), init);
  values.set_requires_grad(true);
  return {std::move(values), std::move(geometry)};
}

template <typename Real>
BasicTensor<Real> expand_tied(BasicTape<Real>& tape, const BasicTensor<Real>& effective,
                              const MaskGeometry& geometry) {
  if (effective.numel() != geometry.effective_size()) {
    throw std::invalid_argument("expand_tied: effective tensor does not match geometry");
  }
  if (geometry.level() == Granularity::Fine ||
      (geometry.kind() == LayerKind::FullyConnected && geometry.level() == Granularity::Medium)) {
    // Identity tying: share storage, gradients flow through unchanged.
    return effective.reshaped(geometry.weight_shape());
  }
  BasicTensor<Real> full(geometry.weight_shape());
  auto fv = full.values();
  auto ev = effective.values();
  for (std::size_t w = 0; w < fv.size(); ++w) fv[w] = ev[geometry.tied_index(w)];
  if (tape.recording() && effective.requires_grad()) {
    full.set_requires_grad(true);
    tape.record([effective, full, geometry]() mutable {
      auto dfull = full.grad();
      auto deff = effective.grad();
      for (std::size_t w = 0; w < dfull.size(); ++w) deff[geometry.tied_index(w)] += dfull[w];
    });
  }
  return full;
}

template <typename Real>
BasicMaskRealization<Real> realize_mask(BasicTape<Real>& tape, const BasicPruningLogits<Real>& logits,
                                        const GumbelNoiseField<Real>& noise, Real tau) {
  const auto& geometry = logits.geometry;
  if (noise.noise.size() != geometry.effective_size()) {
    throw std::invalid_argument("noise field is not shaped like the effective logits");
  }
  auto effective = straight_through_topk(tape, logits.values, noise, geometry.k(), geometry.layout(), tau);
  BasicMaskRealization<Real> out;
  out.effective.resize(effective.numel());
  auto ev = effective.values();
  for (std::size_t i = 0; i < ev.size(); ++i) out.effective[i] = ev[i] != Real(0) ? 1 : 0;
  out.mask = expand_tied(tape, effective, geometry);
  return out;
}

template <typename Real>
std::vector<std::uint8_t> draw_hard_mask(const BasicPruningLogits<Real>& logits, Rng& rng,
                                         double beta) {
  const auto& geometry = logits.geometry;
  auto noise = sample_gumbel<Real>(geometry.effective_size(), rng, beta);
  std::vector<Real> perturbed(geometry.effective_size());
  auto phi = logits.values.values();
  for (std::size_t i = 0; i < perturbed.size(); ++i) perturbed[i] = phi[i] + noise.beta * noise.noise[i];
  return hard_topk_khot<Real>(perturbed, geometry.k(), geometry.layout());
}

std::vector<std::uint8_t> expand_hard_mask(const std::vector<std::uint8_t>& effective,
                                           const MaskGeometry& geometry) {
  if (effective.size() != geometry.effective_size()) {
    throw std::invalid_argument("expand_hard_mask: effective mask does not match geometry");
  }
  std::vector<std::uint8_t> full(shape_numel(geometry.weight_shape()));
  for (std::size_t w = 0; w < full.size(); ++w) full[w] = effective[geometry.tied_index(w)];
  return full;
}

template <typename Real>
BasicTensor<Real> apply_mask(BasicTape<Real>& tape, const BasicTensor<Real>& weights,
                             const BasicTensor<Real>& mask) {
  return elementwise_mul(tape, weights, mask);
}

template <typename Real>
BasicTensor<Real> entropy_penalty(BasicTape<Real>& tape, const BasicPruningLogits<Real>& logits) {
  const auto& layout = logits.geometry.layout();
  const std::size_t classes = layout.classes;
  const std::size_t count = layout.distributions();
  std::vector<Real> probs(layout.size());
  std::vector<Real> entropies(count);
  auto phi = logits.values.values();
  double total = 0;
  for (std::size_t d = 0; d < count; ++d) {
    Real peak = phi[layout.index(d, 0)];
    for (std::size_t c = 1; c < classes; ++c) peak = std::max(peak, phi[layout.index(d, c)]);
    Real z = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      const std::size_t idx = layout.index(d, c);
      probs[idx] = std::exp(phi[idx] - peak);
      z += probs[idx];
    }
    Real h = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      const std::size_t idx = layout.index(d, c);
      probs[idx] /= z;
      if (probs[idx] > Real(0)) h -= probs[idx] * std::log(probs[idx]);
    }
    entropies[d] = h;
    total += static_cast<double>(h);
  }
  BasicTensor<Real> out({1}, std::vector<Real>{static_cast<Real>(total / static_cast<double>(count))});
  if (tape.recording() && logits.values.requires_grad()) {
    out.set_requires_grad(true);
    tape.record([values = logits.values, out, layout, probs = std::move(probs),
                 entropies = std::move(entropies)]() mutable {
      const Real g = out.grad()[0] / static_cast<Real>(layout.distributions());
      auto dphi = values.grad();
      for (std::size_t d = 0; d < layout.distributions(); ++d) {
        for (std::size_t c = 0; c < layout.classes; ++c) {
          const std::size_t idx = layout.index(d, c);
          const Real p = probs[idx];
          if (p > Real(0)) dphi[idx] -= g * p * (std::log(p) + entropies[d]);
        }
      }
    });
  }
  return out;
}

#define DPPKIT_INSTANTIATE_MASK(Real)                                                             \
  template BasicPruningLogits<Real> build_logits<Real>(LayerKind, LayerDims, GranularitySpec,     \
                                                       Real);                                     \
  template BasicTensor<Real> expand_tied<Real>(BasicTape<Real>&, const BasicTensor<Real>&,        \
                                               const MaskGeometry&);                              \
  template BasicMaskRealization<Real> realize_mask<Real>(BasicTape<Real>&,                        \
                                                         const BasicPruningLogits<Real>&,         \
                                                         const GumbelNoiseField<Real>&, Real);    \
  template std::vector<std::uint8_t> draw_hard_mask<Real>(const BasicPruningLogits<Real>&, Rng&,  \
                                                          double);                                \
  template BasicTensor<Real> apply_mask<Real>(BasicTape<Real>&, const BasicTensor<Real>&,         \
                                              const BasicTensor<Real>&);                          \
  template BasicTensor<Real> entropy_penalty<Real>(BasicTape<Real>&,                              \
                                                   const BasicPruningLogits<Real>&);

DPPKIT_INSTANTIATE_MASK(float)
DPPKIT_INSTANTIATE_MASK(double)

#undef DPPKIT_INSTANTIATE_MASK

}  // namespace dppkit
