#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "dppkit/dpp_mask.hpp"
#include "dppkit/random.hpp"

namespace dppkit {

/// Monte Carlo inclusion probabilities pi[d][c], stored row-major [D x C].
struct MarginalEstimate {
  std::size_t distributions = 0;
  std::size_t classes = 0;
  std::size_t k = 0;
  std::size_t samples = 0;
  std::vector<double> pi;

  double at(std::size_t d, std::size_t c) const { return pi[d * classes + c]; }
};

/// Average of T hard-mask draws, reduced to the effective D x C shape.
MarginalEstimate estimate_marginals(const PruningLogits& logits, double beta, std::size_t samples,
                                    Rng& rng);

/// Builds an estimate from explicit probabilities (rows must be given D x C).
MarginalEstimate marginals_from_rows(std::vector<std::vector<double>> rows, std::size_t k,
                                     std::size_t samples = 0);

/// -sum_c p ln p with 0 ln 0 = 0.
double shannon_entropy(const double* p, std::size_t n);

/// Upper bound -K ln(K/C) of the per-distribution entropy.
double entropy_upper_bound(std::size_t k, std::size_t classes);

/// Average Pruning Entropy: mean over d of the entropy of pi[d].
double average_pruning_entropy(const MarginalEstimate& est);

/// Entropy of the mean mask (1/D) sum_d pi[d].
double mean_mask_entropy(const MarginalEstimate& est);

/// Pruning Diversity H(mean mask) - H_avg; empty when D < 2.
std::optional<double> pruning_diversity(const MarginalEstimate& est);

struct LayerMetrics {
  double h_avg = 0;
  double h_mean_mask = 0;
  std::optional<double> diversity;
  double upper_bound = 0;

  /// Divided by the upper bound; 0 when the bound is 0 (K = C).
  double h_avg_normalized() const;
  std::optional<double> diversity_normalized() const;
};

LayerMetrics layer_metrics(const MarginalEstimate& est);

}  // namespace dppkit
