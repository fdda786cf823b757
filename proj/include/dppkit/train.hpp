#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "dppkit/metrics.hpp"
#include "dppkit/mnist.hpp"
#include "dppkit/network.hpp"
#include "dppkit/sparse_format.hpp"

namespace dppkit {

/// Training run settings. Defaults: Adam at 0.001, batch 128, beta 1,
/// tau annealed 5.0 -> 0.5 per epoch, mu 0.005.
///
/// The entropy penalty is averaged over the pruned layers (K < C) before it
/// is scaled by mu; layers kept whole carry no penalty.
struct TrainConfig {
  Architecture arch = Architecture::LeNet300_100;
  std::vector<GranularitySpec> pruning;
  double mu = 0.005;
  double beta = 1.0;
  std::string optimizer = "adam";
  double learning_rate = 0.001;
  double momentum = 0.9;
  std::size_t batch_size = 128;
  std::size_t epochs = 30;
  double tau_init = 5.0;
  double tau_end = 0.5;
  unsigned bits = 32;
  std::uint64_t seed = 1;
  std::size_t metric_samples = 100;
  // 0 keeps the whole split.
  std::size_t train_limit = 0;
  std::size_t test_limit = 0;

  /// Throws std::invalid_argument describing the first bad field.
  void validate() const;
  RelaxationSchedule schedule() const { return {tau_init, tau_end, epochs}; }
};

/// Reads `key = value` lines (TOML subset: strings, numbers, arrays).
/// Keys: architecture, granularity (one name or one per layer), k (one per
/// layer), bits, mu, beta, optimizer, learning_rate, momentum, batch_size,
/// epochs, tau_init, tau_end, metric_samples, seed, train_limit, test_limit.
TrainConfig parse_train_config(std::istream& in);
TrainConfig load_train_config(const std::filesystem::path& path);
std::string format_train_config(const TrainConfig& config);

/// One row of metrics.csv. The per-layer vectors hold normalized H_avg and
/// I (NaN where I is undefined).
struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_acc = 0;
  double test_acc = 0;
  double tau = 0;
  std::vector<double> h_norm;
  std::vector<double> i_norm;
  double seconds = 0;
};

struct TrainedState {
  TrainConfig config;
  Network network;
};

struct TrainResult {
  TrainedState state;
  std::vector<EpochRecord> log;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Runs the full schedule. Throws std::runtime_error naming the epoch if the
/// loss becomes non-finite.
TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset& test_set,
                  const EpochCallback& on_epoch = {});

/// Builds the untrained network a config describes.
Network make_network(const TrainConfig& config);

/// One hard mask per layer over the effective logits.
std::vector<std::vector<std::uint8_t>> draw_masks(const Network& net, double beta, Rng& rng);

/// Fraction of correctly classified items; throws std::invalid_argument on
/// an empty set.
double accuracy(const DenseModel& model, const Dataset& data);

/// Draws one mask per layer from `seed`, freezes it and scores `data`.
double evaluate(const TrainedState& state, const Dataset& data, std::uint64_t seed);

/// Monte Carlo metrics of every layer's pruning distribution.
std::vector<LayerMetrics> network_metrics(const Network& net, double beta, std::size_t samples, Rng& rng);

void write_metrics_csv(std::ostream& out, const std::vector<EpochRecord>& log);

/// Final-state file: config plus latent weights, biases and logits.
void save_state(const std::filesystem::path& path, const TrainedState& state);
TrainedState load_state(const std::filesystem::path& path);

/// Export records for a frozen draw of masks.
std::vector<ExportLayer> export_layers(const TrainedState& state, const std::vector<std::vector<std::uint8_t>>& masks);

}  // namespace dppkit
