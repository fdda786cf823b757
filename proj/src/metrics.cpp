#include "dppkit/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace dppkit {

MarginalEstimate estimate_marginals(const PruningLogits& logits, double beta, std::size_t samples,
                                    Rng& rng) {
  if (samples < 1) throw std::invalid_argument("estimate_marginals needs T >= 1");
  const auto& layout = logits.geometry.layout();
  MarginalEstimate est;
  est.distributions = layout.distributions();
  est.classes = layout.classes;
  est.k = logits.geometry.k();
  est.samples = samples;
  std::vector<std::size_t> counts(layout.size(), 0);
  for (std::size_t t = 0; t < samples; ++t) {
    const auto hard = draw_hard_mask(logits, rng, beta);
    for (std::size_t i = 0; i < hard.size(); ++i) counts[i] += hard[i];
  }
  est.pi.resize(layout.size());
  for (std::size_t d = 0; d < est.distributions; ++d)
    for (std::size_t c = 0; c < est.classes; ++c)
      est.pi[d * est.classes + c] =
          static_cast<double>(counts[layout.index(d, c)]) / static_cast<double>(samples);
  return est;
}

MarginalEstimate marginals_from_rows(std::vector<std::vector<double>> rows, std::size_t k,
                                     std::size_t samples) {
  if (rows.empty() || rows.front().empty()) throw std::invalid_argument("marginal rows must be non-empty");
  MarginalEstimate est;
  est.distributions = rows.size();
  est.classes = rows.front().size();
  est.k = k;
  est.samples = samples;
  for (const auto& row : rows) {
    if (row.size() != est.classes) throw std::invalid_argument("ragged marginal rows");
    for (double p : row) {
      if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("marginal probability outside [0, 1]");
      est.pi.push_back(p);
    }
  }
  return est;
}

double shannon_entropy(const double* p, std::size_t n) {
  double h = 0;
  for (std::size_t c = 0; c < n; ++c)
    if (p[c] > 0.0) h -= p[c] * std::log(p[c]);
  return h;
}

double entropy_upper_bound(std::size_t k, std::size_t classes) {
  return -static_cast<double>(k) * std::log(static_cast<double>(k) / static_cast<double>(classes));
}

double average_pruning_entropy(const MarginalEstimate& est) {
  double total = 0;
  for (std::size_t d = 0; d < est.distributions; ++d)
    total += shannon_entropy(est.pi.data() + d * est.classes, est.classes);
  return total / static_cast<double>(est.distributions);
}

double mean_mask_entropy(const MarginalEstimate& est) {
  std::vector<double> mean(est.classes, 0.0);
  for (std::size_t d = 0; d < est.distributions; ++d)
    for (std::size_t c = 0; c < est.classes; ++c) mean[c] += est.at(d, c);
  for (auto& m : mean) m /= static_cast<double>(est.distributions);
  return shannon_entropy(mean.data(), mean.size());
}

std::optional<double> pruning_diversity(const MarginalEstimate& est) {
  if (est.distributions < 2) return std::nullopt;
  return mean_mask_entropy(est) - average_pruning_entropy(est);
}

double LayerMetrics::h_avg_normalized() const {
  return upper_bound > 0.0 ? h_avg / upper_bound : 0.0;
}

std::optional<double> LayerMetrics::diversity_normalized() const {
  if (!diversity) return std::nullopt;
  return upper_bound > 0.0 ? *diversity / upper_bound : 0.0;
}

LayerMetrics layer_metrics(const MarginalEstimate& est) {
  LayerMetrics m;
  m.h_avg = average_pruning_entropy(est);
  m.h_mean_mask = mean_mask_entropy(est);
  m.diversity = pruning_diversity(est);
  m.upper_bound = entropy_upper_bound(est.k, est.classes);
  return m;
}

}  // namespace dppkit
