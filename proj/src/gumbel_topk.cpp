#include "dppkit/gumbel_topk.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace dppkit {

double gumbel_from_uniform(double u) {
  if (!(u > 0.0 && u < 1.0)) throw std::domain_error("gumbel_from_uniform needs u in (0, 1)");
  return -std::log(-std::log(u));
}

template <typename Real>
GumbelNoiseField<Real> sample_gumbel(std::size_t count, Rng& rng, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("Gumbel scale beta must lie in [0, 1]");
  GumbelNoiseField<Real> field;
  field.beta = static_cast<Real>(beta);
  field.noise.resize(count);
  for (auto& e : field.noise) e = static_cast<Real>(gumbel_from_uniform(rng.uniform_open()));
  return field;
}

void validate_topk(std::size_t k, std::size_t classes) {
  if (k < 1 || k > classes) {
    throw std::invalid_argument("K must satisfy 1 <= K <= C (K=" + std::to_string(k) +
                                ", C=" + std::to_string(classes) + ")");
  }
}

template <typename Real>
std::vector<std::uint8_t> hard_topk_khot(std::span<const Real> perturbed, std::size_t k,
                                         const SliceLayout& layout) {
  validate_topk(k, layout.classes);
  if (perturbed.size() != layout.size()) throw std::invalid_argument("hard_topk_khot: size mismatch");
  std::vector<std::uint8_t> mask(layout.size(), 0);
  std::vector<std::size_t> order(layout.classes);
  std::vector<Real> slice(layout.classes);
  for (std::size_t d = 0; d < layout.distributions(); ++d) {
    for (std::size_t c = 0; c < layout.classes; ++c) slice[c] = perturbed[layout.index(d, c)];
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        return slice[a] > slice[b] || (slice[a] == slice[b] && a < b);
                      });
    for (std::size_t j = 0; j < k; ++j) mask[layout.index(d, order[j])] = 1;
  }
  return mask;
}

namespace {

double log_add_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

}  // namespace

// Round j (0-based) takes a softmax over every class not picked in rounds
// 0..j-1, so with Z_j the round-j normalizer a class first picked in round t
// (or never picked, t = k-1) collects soft = e^z * sum_{j<=t} 1/Z_j. The
// normalizers are built from the back as sums of positive terms and kept in
// the log domain, which makes both passes O(C log K + K) per distribution.
template <typename Real>
RelaxedTopK<Real> relaxed_topk(std::span<const Real> logits, const GumbelNoiseField<Real>& noise,
                               std::size_t k, const SliceLayout& layout, Real tau) {
  validate_topk(k, layout.classes);
  if (!(tau > Real(0))) throw std::invalid_argument("relaxation temperature must be positive");
  if (logits.size() != layout.size() || noise.noise.size() != layout.size()) {
    throw std::invalid_argument("relaxed_topk: logits/noise size does not match layout");
  }
  const std::size_t classes = layout.classes;
  const std::size_t count = layout.distributions();
  const double inv_tau = 1.0 / static_cast<double>(tau);
  const double neg_inf = -std::numeric_limits<double>::infinity();
  RelaxedTopK<Real> out;
  out.k = k;
  out.tau = tau;
  out.layout = layout;
  out.hard.assign(layout.size(), Real(0));
  out.soft.assign(layout.size(), Real(0));
  out.picks.resize(count * k);
  out.log_partition.resize(count * k);
  out.log_weight.resize(count * k);
  out.z.resize(layout.size());

  std::vector<double> v(classes);
  std::vector<std::size_t> order(classes);
  std::vector<std::size_t> round(classes);
  for (std::size_t d = 0; d < count; ++d) {
    for (std::size_t c = 0; c < classes; ++c) {
      const std::size_t idx = layout.index(d, c);
      v[c] = static_cast<double>(logits[idx]) +
             static_cast<double>(noise.beta) * static_cast<double>(noise.noise[idx]);
      if (!std::isfinite(v[c])) throw std::domain_error("non-finite perturbed logit in relaxed_topk");
      out.z[idx] = v[c] * inv_tau;
    }
    // Successive argmaxes over the remaining classes are the top K in order.
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });

    double rest_peak = neg_inf;
    for (std::size_t j = k; j < classes; ++j) rest_peak = std::max(rest_peak, v[order[j]] * inv_tau);
    double log_rest = neg_inf;
    if (k < classes) {
      double total = 0;
      for (std::size_t j = k; j < classes; ++j) total += std::exp(v[order[j]] * inv_tau - rest_peak);
      log_rest = rest_peak + std::log(total);
    }

    std::uint32_t* picks = out.picks.data() + d * k;
    double* log_z = out.log_partition.data() + d * k;
    double* log_w = out.log_weight.data() + d * k;
    double acc = log_rest;
    for (std::size_t j = k; j-- > 0;) {
      picks[j] = static_cast<std::uint32_t>(order[j]);
      acc = log_add_exp(acc, v[order[j]] * inv_tau);
      log_z[j] = acc;
    }
    log_w[0] = -log_z[0];
    for (std::size_t j = 1; j < k; ++j) log_w[j] = log_add_exp(log_w[j - 1], -log_z[j]);

    std::fill(round.begin(), round.end(), k - 1);
    for (std::size_t j = 0; j < k; ++j) round[order[j]] = j;
    for (std::size_t c = 0; c < classes; ++c) {
      const std::size_t idx = layout.index(d, c);
      out.soft[idx] = static_cast<Real>(std::exp(out.z[idx] + log_w[round[c]]));
    }
    for (std::size_t j = 0; j < k; ++j) out.hard[layout.index(d, order[j])] = Real(1);
  }
  return out;
}

// d soft_c / d z: each round contributes p_c (g_c - <p, g>), and summing the
// rounds gives soft_c (g_c - w_t) with w_t a 1/Z-weighted mean of the round
// averages <p_j, g>, j <= t.
template <typename Real>
void relaxed_topk_backward(const RelaxedTopK<Real>& relaxed, std::span<const Real> grad_soft,
                           std::span<Real> grad_logits) {
  const SliceLayout& layout = relaxed.layout;
  if (grad_soft.size() != layout.size() || grad_logits.size() != layout.size()) {
    throw std::invalid_argument("relaxed_topk_backward: size mismatch");
  }
  const std::size_t classes = layout.classes;
  const std::size_t k = relaxed.k;
  const double inv_tau = 1.0 / static_cast<double>(relaxed.tau);
  std::vector<std::size_t> round(classes);
  std::vector<double> mean(k);
  std::vector<double> weighted(k);
  for (std::size_t d = 0; d < layout.distributions(); ++d) {
    const std::uint32_t* picks = relaxed.picks.data() + d * k;
    const double* log_z = relaxed.log_partition.data() + d * k;
    const double* log_w = relaxed.log_weight.data() + d * k;
    std::fill(round.begin(), round.end(), k);
    for (std::size_t j = 0; j < k; ++j) round[picks[j]] = j;

    // Mass of the never-picked classes, in units of the last normalizer.
    double tail = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      if (round[c] != k) continue;
      const std::size_t idx = layout.index(d, c);
      tail += std::exp(relaxed.z[idx] - log_z[k - 1]) * static_cast<double>(grad_soft[idx]);
    }
    for (std::size_t j = k; j-- > 0;) {
      const std::size_t idx = layout.index(d, picks[j]);
      const double scale_next = j + 1 < k ? std::exp(log_z[j + 1] - log_z[j]) : 1.0;
      const double carried = j + 1 < k ? mean[j + 1] * scale_next : tail;
      mean[j] = carried + std::exp(relaxed.z[idx] - log_z[j]) * static_cast<double>(grad_soft[idx]);
    }
    weighted[0] = mean[0];
    for (std::size_t j = 1; j < k; ++j) {
      weighted[j] = weighted[j - 1] * std::exp(log_w[j - 1] - log_w[j]) +
                    std::exp(-log_z[j] - log_w[j]) * mean[j];
    }
    for (std::size_t c = 0; c < classes; ++c) {
      const std::size_t idx = layout.index(d, c);
      const std::size_t t = std::min(round[c], k - 1);
      const double soft = std::exp(relaxed.z[idx] + log_w[t]);
      grad_logits[idx] += static_cast<Real>(soft * inv_tau * (static_cast<double>(grad_soft[idx]) - weighted[t]));
    }
  }
}

template <typename Real>
BasicTensor<Real> straight_through_topk(BasicTape<Real>& tape, const BasicTensor<Real>& logits,
                                        const GumbelNoiseField<Real>& noise, std::size_t k,
                                        const SliceLayout& layout, Real tau) {
  auto relaxed = relaxed_topk<Real>(logits.values(), noise, k, layout, tau);
  BasicTensor<Real> mask(logits.shape(), relaxed.hard);
  if (tape.recording() && logits.requires_grad()) {
    mask.set_requires_grad(true);
    tape.record([logits, mask, relaxed = std::move(relaxed)]() mutable {
      relaxed_topk_backward<Real>(relaxed, mask.grad(), logits.grad());
    });
  }
  return mask;
}

double RelaxationSchedule::delta() const {
  if (n_iter <= 1) return 0.0;
  return (tau_init - tau_end) / static_cast<double>(n_iter - 1);
}

double tau_at(const RelaxationSchedule& schedule, std::size_t epoch) {
  if (epoch < 1 || epoch > schedule.n_iter) {
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside [1, " +
                            std::to_string(schedule.n_iter) + "]");
  }
  return schedule.tau_init - static_cast<double>(epoch - 1) * schedule.delta();
}

#define DPPKIT_INSTANTIATE_TOPK(Real)                                                             \
  template GumbelNoiseField<Real> sample_gumbel<Real>(std::size_t, Rng&, double);                 \
  template std::vector<std::uint8_t> hard_topk_khot<Real>(std::span<const Real>, std::size_t,     \
                                                          const SliceLayout&);                    \
  template RelaxedTopK<Real> relaxed_topk<Real>(std::span<const Real>,                            \
                                                const GumbelNoiseField<Real>&, std::size_t,       \
                                                const SliceLayout&, Real);                        \
  template void relaxed_topk_backward<Real>(const RelaxedTopK<Real>&, std::span<const Real>,      \
                                            std::span<Real>);                                     \
  template BasicTensor<Real> straight_through_topk<Real>(BasicTape<Real>&,                        \
                                                         const BasicTensor<Real>&,                \
                                                         const GumbelNoiseField<Real>&,           \
                                                         std::size_t, const SliceLayout&, Real);

DPPKIT_INSTANTIATE_TOPK(float)
DPPKIT_INSTANTIATE_TOPK(double)

#undef DPPKIT_INSTANTIATE_TOPK

}  // namespace dppkit
