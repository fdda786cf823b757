#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dppkit/random.hpp"
#include "dppkit/tensor.hpp"

namespace dppkit {

/// Logical [outer x classes x inner] view of a flat array where the middle
/// axis is the pruning axis. Each (outer, inner) pair is one categorical
/// distribution over `classes` candidates.
struct SliceLayout {
  std::size_t outer = 1;
  std::size_t classes = 1;
  std::size_t inner = 1;

  std::size_t distributions() const { return outer * inner; }
  std::size_t size() const { return outer * classes * inner; }
  std::size_t index(std::size_t distribution, std::size_t cls) const {
    const std::size_t o = distribution / inner;
    const std::size_t i = distribution % inner;
    return (o * classes + cls) * inner + i;
  }
};

/// Standard Gumbel(0, 1) draws together with the scale applied to them.
template <typename Real>
struct GumbelNoiseField {
  std::vector<Real> noise;
  Real beta = Real(1);
};

/// -ln(-ln(u)) for u in (0, 1).
double gumbel_from_uniform(double u);

/// Fresh i.i.d. Gumbel field of `count` entries. beta must lie in [0, 1];
/// beta = 0 gives a deterministic top-K, which is only useful for debugging.
template <typename Real>
GumbelNoiseField<Real> sample_gumbel(std::size_t count, Rng& rng, double beta = 1.0);

/// Throws std::invalid_argument unless 1 <= k <= classes.
void validate_topk(std::size_t k, std::size_t classes);

/// K-hot mask of the K largest entries along the pruning axis of every slice.
/// Ties go to the lowest index.
template <typename Real>
std::vector<std::uint8_t> hard_topk_khot(std::span<const Real> perturbed, std::size_t k,
                                         const SliceLayout& layout);

/// Hard mask plus its iterative softmax relaxation.
template <typename Real>
struct RelaxedTopK {
  std::vector<Real> hard;
  std::vector<Real> soft;
  std::size_t k = 0;
  Real tau = Real(1);
  SliceLayout layout;

  // Backward state, per distribution d:
  //   picks[d*k + j]     class chosen in round j
  //   log_partition[..]  log of the round-j softmax normalizer (z scaled by 1/tau)
  //   log_weight[..]     log sum_{i<=j} 1/Z_i
  //   z                  scaled perturbed logits, layout order
  std::vector<std::uint32_t> picks;
  std::vector<double> log_partition;
  std::vector<double> log_weight;
  std::vector<double> z;
};

/// K rounds of softmax over (logits + beta*noise + exclusion) / tau; the
/// round-k winner is the argmax among candidates not picked yet and is then
/// excluded. soft = sum of the K softmaxes, hard = K-hot of the winners.
template <typename Real>
RelaxedTopK<Real> relaxed_topk(std::span<const Real> logits, const GumbelNoiseField<Real>& noise,
                               std::size_t k, const SliceLayout& layout, Real tau);

/// Accumulates d(sum_j g_j * soft_j)/d logits into grad_logits.
template <typename Real>
void relaxed_topk_backward(const RelaxedTopK<Real>& relaxed, std::span<const Real> grad_soft,
                           std::span<Real> grad_logits);

/// Straight-through top-K mask on the tape: forward value is the hard mask,
/// the backward pass routes gradients through the soft relaxation.
template <typename Real>
BasicTensor<Real> straight_through_topk(BasicTape<Real>& tape, const BasicTensor<Real>& logits,
                                        const GumbelNoiseField<Real>& noise, std::size_t k,
                                        const SliceLayout& layout, Real tau);

/// Linear temperature annealing over epochs.
struct RelaxationSchedule {
  double tau_init = 5.0;
  double tau_end = 0.5;
  std::size_t n_iter = 1;

  double delta() const;
};

/// Temperature at 1-based `epoch`; throws std::out_of_range outside [1, n_iter].
double tau_at(const RelaxationSchedule& schedule, std::size_t epoch);

}  // namespace dppkit
