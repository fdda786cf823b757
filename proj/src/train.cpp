#include "dppkit/train.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "dppkit/ops.hpp"
#include "dppkit/optim.hpp"

namespace dppkit {

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kGumbelStream = 2;
constexpr std::uint64_t kShuffleStream = 0x1000;
constexpr std::uint64_t kMetricStream = 0x2000;
constexpr std::uint64_t kEvalStream = 0x3000;

std::size_t to_size(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(text, &used);
    if (used != text.size() || v < 0) throw std::invalid_argument(text);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "': expected a non-negative integer, got '" + text + "'");
  }
}

double to_double(const std::string& key, const std::string& text) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("config key '" + key + "': expected a number, got '" + text + "'");
  }
}

std::string single(const CLI::ConfigItem& item) {
  if (item.inputs.size() != 1) throw std::invalid_argument("config key '" + item.name + "' takes one value");
  return item.inputs.front();
}

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
void put_le(std::ostream& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(std::istream& in) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = in.get();
    if (c == EOF) throw std::runtime_error("state file is truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return static_cast<T>(v);
}

void put_floats(std::ostream& out, std::span<const float> values) {
  put_le<std::uint64_t>(out, values.size());
  for (float v : values) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
}

void get_floats(std::istream& in, std::span<float> values) {
  const auto n = get_le<std::uint64_t>(in);
  if (n != values.size()) throw std::runtime_error("state file does not match the configured network");
  for (float& v : values) v = std::bit_cast<float>(get_le<std::uint32_t>(in));
}

// Copies items order[begin, end) into a [n x 784] batch.
Tensor gather_batch(const Dataset& data, const std::vector<std::size_t>& order, std::size_t begin, std::size_t end,
                    std::vector<int>& labels) {
  const std::size_t n = end - begin;
  const std::size_t px = data.image_size();
  Tensor batch({n, px});
  auto out = batch.values();
  labels.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t item = order[begin + j];
    std::copy_n(data.pixels.begin() + static_cast<std::ptrdiff_t>(item * px), px,
                out.begin() + static_cast<std::ptrdiff_t>(j * px));
    labels[j] = data.labels[item];
  }
  return batch;
}

std::size_t count_correct(const Tensor& scores, const std::vector<int>& labels) {
  const std::size_t classes = scores.dim(1);
  auto v = scores.values();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = v.subspan(i * classes, classes);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    correct += best == labels[i];
  }
  return correct;
}

}  // namespace

void TrainConfig::validate() const {
  const auto layers = architecture_layers(arch);
  if (pruning.size() != layers.size()) {
    throw std::invalid_argument(std::string(to_string(arch)) + " needs " + std::to_string(layers.size()) +
                                " per-layer K values, got " + std::to_string(pruning.size()));
  }
  for (std::size_t l = 0; l < layers.size(); ++l) MaskGeometry(layers[l].kind, layers[l].dims, pruning[l]);
  QuantSpec check(bits);
  if (!(mu >= 0.0)) throw std::invalid_argument("mu must be non-negative");
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("beta must lie in [0, 1]");
  if (optimizer != "adam" && optimizer != "sgd") throw std::invalid_argument("optimizer must be adam or sgd");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (epochs == 0) throw std::invalid_argument("epochs must be positive");
  if (!(tau_end > 0.0 && tau_init >= tau_end)) throw std::invalid_argument("need tau_init >= tau_end > 0");
  if (metric_samples == 0) throw std::invalid_argument("metric_samples must be positive");
}

TrainConfig parse_train_config(std::istream& in) {
  CLI::ConfigTOML reader;
  TrainConfig cfg;
  std::vector<std::string> granularity{"fine"};
  std::vector<std::size_t> ks;
  for (const auto& item : reader.from_config(in)) {
    if (!item.parents.empty()) throw std::invalid_argument("config sections are not supported ('" + item.fullname() + "')");
    const std::string& key = item.name;
    if (key == "architecture") cfg.arch = parse_architecture(single(item));
    else if (key == "granularity") granularity = item.inputs;
    else if (key == "k") {
      ks.clear();
      for (const auto& v : item.inputs) ks.push_back(to_size(key, v));
    } else if (key == "bits") cfg.bits = static_cast<unsigned>(to_size(key, single(item)));
    else if (key == "mu") cfg.mu = to_double(key, single(item));
    else if (key == "beta") cfg.beta = to_double(key, single(item));
    else if (key == "optimizer") cfg.optimizer = single(item);
    else if (key == "learning_rate") cfg.learning_rate = to_double(key, single(item));
    else if (key == "momentum") cfg.momentum = to_double(key, single(item));
    else if (key == "batch_size") cfg.batch_size = to_size(key, single(item));
    else if (key == "epochs") cfg.epochs = to_size(key, single(item));
    else if (key == "tau_init") cfg.tau_init = to_double(key, single(item));
    else if (key == "tau_end") cfg.tau_end = to_double(key, single(item));
    else if (key == "metric_samples") cfg.metric_samples = to_size(key, single(item));
    else if (key == "seed") cfg.seed = to_size(key, single(item));
    else if (key == "train_limit") cfg.train_limit = to_size(key, single(item));
    else if (key == "test_limit") cfg.test_limit = to_size(key, single(item));
    else throw std::invalid_argument("unknown config key '" + key + "'");
  }
  if (granularity.size() != 1 && granularity.size() != ks.size()) {
    throw std::invalid_argument("granularity needs one entry or one per layer");
  }
  for (std::size_t l = 0; l < ks.size(); ++l) {
    cfg.pruning.push_back({parse_granularity(granularity.size() == 1 ? granularity[0] : granularity[l]), ks[l]});
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  return parse_train_config(in);
}

std::string format_train_config(const TrainConfig& c) {
  std::ostringstream out;
  out << "architecture = \"" << to_string(c.arch) << "\"\n";
  out << "granularity = [";
  for (std::size_t l = 0; l < c.pruning.size(); ++l) out << (l ? ", " : "") << '"' << to_string(c.pruning[l].level) << '"';
  out << "]\nk = [";
  for (std::size_t l = 0; l < c.pruning.size(); ++l) out << (l ? ", " : "") << c.pruning[l].k;
  out << "]\n";
  out << "bits = " << c.bits << "\n";
  out << "mu = " << format_number(c.mu) << "\n";
  out << "beta = " << format_number(c.beta) << "\n";
  out << "optimizer = \"" << c.optimizer << "\"\n";
  out << "learning_rate = " << format_number(c.learning_rate) << "\n";
  out << "momentum = " << format_number(c.momentum) << "\n";
  out << "batch_size = " << c.batch_size << "\n";
  out << "epochs = " << c.epochs << "\n";
  out << "tau_init = " << format_number(c.tau_init) << "\n";
  out << "tau_end = " << format_number(c.tau_end) << "\n";
  out << "metric_samples = " << c.metric_samples << "\n";
  out << "seed = " << c.seed << "\n";
  out << "train_limit = " << c.train_limit << "\n";
  out << "test_limit = " << c.test_limit << "\n";
  return out.str();
}

Network make_network(const TrainConfig& config) {
  config.validate();
  Rng init = Rng::stream(config.seed, kInitStream);
  return Network(config.arch, config.pruning, QuantSpec(config.bits), init);
}

std::vector<std::vector<std::uint8_t>> draw_masks(const Network& net, double beta, Rng& rng) {
  std::vector<std::vector<std::uint8_t>> masks;
  for (const auto& layer : net.layers()) masks.push_back(draw_hard_mask(layer.logits, rng, beta));
  return masks;
}

double accuracy(const DenseModel& model, const Dataset& data) {
  if (data.size() == 0) throw std::invalid_argument("accuracy of an empty dataset is undefined");
  constexpr std::size_t chunk = 1000;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<int> labels;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += chunk) {
    const std::size_t end = std::min(data.size(), begin + chunk);
    const Tensor batch = gather_batch(data, order, begin, end, labels);
    correct += count_correct(model.logits(batch), labels);
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double evaluate(const TrainedState& state, const Dataset& data, std::uint64_t seed) {
  Rng rng(seed);
  return accuracy(state.network.freeze(draw_masks(state.network, state.config.beta, rng)), data);
}

std::vector<LayerMetrics> network_metrics(const Network& net, double beta, std::size_t samples, Rng& rng) {
  std::vector<LayerMetrics> out;
  for (const auto& layer : net.layers()) out.push_back(layer_metrics(estimate_marginals(layer.logits, beta, samples, rng)));
  return out;
}

TrainResult train(const TrainConfig& config, const Dataset& train_full, const Dataset& test_full,
                  const EpochCallback& on_epoch) {
  config.validate();
  const Dataset train_set = train_full.head(config.train_limit);
  const Dataset test_set = test_full.head(config.test_limit);
  if (train_set.size() == 0) throw std::invalid_argument("training set is empty");
  if (train_set.image_size() != kImageSide * kImageSide) throw std::invalid_argument("expected 28x28 images");

  TrainResult result{{config, make_network(config)}, {}};
  Network& net = result.state.network;
  const QuantSpec quant(config.bits);
  const auto& specs = net.specs();
  auto params = net.parameters();
  BasicAdam<float> adam(params, {config.learning_rate});
  BasicSgd<float> sgd(params, {config.learning_rate, config.momentum});
  const bool use_adam = config.optimizer == "adam";

  std::size_t pruned_layers = 0;
  for (const auto& layer : net.layers()) pruned_layers += layer.geometry().k() < layer.geometry().classes();
  const float penalty_scale = pruned_layers ? static_cast<float>(config.mu / static_cast<double>(pruned_layers)) : 0.0f;

  Rng gumbel = Rng::stream(config.seed, kGumbelStream);
  const auto schedule = config.schedule();
  std::vector<std::size_t> order(train_set.size());
  std::vector<int> labels;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    const float tau = static_cast<float>(tau_at(schedule, epoch));
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle = Rng::stream(config.seed, kShuffleStream + epoch);
    shuffle.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      const Tensor batch = gather_batch(train_set, order, begin, end, labels);

      Tape tape;
      std::vector<Tensor> weights, biases;
      Tensor penalty({1}, 0.0f);
      for (const auto& layer : net.layers()) {
        const auto& geo = layer.geometry();
        auto noise = sample_gumbel<float>(geo.effective_size(), gumbel, config.beta);
        auto mask = realize_mask(tape, layer.logits, noise, tau);
        weights.push_back(apply_mask(tape, quantize_forward(tape, layer.weights, quant), mask.mask));
        biases.push_back(layer.bias);
        if (geo.k() < geo.classes() && penalty_scale > 0.0f) {
          penalty = add(tape, penalty, entropy_penalty(tape, layer.logits));
        }
      }
      Tensor loss;
      try {
        auto scores = forward_stack<float>(tape, specs, weights, biases, batch);
        correct += count_correct(scores, labels);
        loss = softmax_cross_entropy(tape, scores, std::span<const int>(labels));
      } catch (const std::domain_error& e) {
        throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      if (penalty_scale > 0.0f) loss = add(tape, loss, scale(tape, penalty, penalty_scale));
      if (!std::isfinite(loss.item())) {
        throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ": non-finite loss");
      }
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(end - begin);
      tape.backward(loss);
      if (use_adam) {
        adam.step();
        adam.zero_grad();
      } else {
        sgd.step();
        sgd.zero_grad();
      }
      for (auto& layer : net.layers()) clip_latent(layer.weights, quant);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.tau = static_cast<double>(tau);
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(train_set.size());
    rec.test_acc = test_set.size() ? evaluate(result.state, test_set, config.seed ^ (kEvalStream + epoch))
                                   : std::numeric_limits<double>::quiet_NaN();
    Rng metric_rng = Rng::stream(config.seed, kMetricStream + epoch);
    for (const auto& m : network_metrics(net, config.beta, config.metric_samples, metric_rng)) {
      rec.h_norm.push_back(m.h_avg_normalized());
      rec.i_norm.push_back(m.diversity_normalized().value_or(std::numeric_limits<double>::quiet_NaN()));
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

void write_metrics_csv(std::ostream& out, const std::vector<EpochRecord>& log) {
  const std::size_t layers = log.empty() ? 0 : log.front().h_norm.size();
  out << "epoch,train_loss,train_acc,test_acc,tau";
  for (std::size_t l = 1; l <= layers; ++l) out << ",H_norm_" << l << ",I_norm_" << l;
  out << '\n';
  char buf[64];
  auto field = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    out << ',' << buf;
  };
  for (const auto& r : log) {
    out << r.epoch;
    field(r.train_loss);
    field(r.train_acc);
    field(r.test_acc);
    field(r.tau);
    for (std::size_t l = 0; l < layers; ++l) {
      field(r.h_norm[l]);
      field(r.i_norm[l]);
    }
    out << '\n';
  }
}

void save_state(const std::filesystem::path& path, const TrainedState& state) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write("DPST", 4);
  put_le<std::uint16_t>(out, 1);
  const std::string text = format_train_config(state.config);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& layer : state.network.layers()) {
    put_floats(out, layer.weights.values());
    put_floats(out, layer.bias.values());
    put_floats(out, layer.logits.values.values());
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

TrainedState load_state(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "DPST") throw std::runtime_error(path.string() + " is not a training state file");
  if (get_le<std::uint16_t>(in) != 1) throw std::runtime_error(path.string() + ": unsupported state version");
  std::string text(get_le<std::uint32_t>(in), '\0');
  in.read(text.data(), static_cast<std::streamsize>(text.size()));
  if (!in) throw std::runtime_error("state file is truncated");
  std::istringstream cfg(text);
  const TrainConfig config = parse_train_config(cfg);
  TrainedState state{config, make_network(config)};
  for (auto& layer : state.network.layers()) {
    get_floats(in, layer.weights.values());
    get_floats(in, layer.bias.values());
    get_floats(in, layer.logits.values.values());
  }
  if (in.peek() != EOF) throw std::runtime_error(path.string() + ": trailing bytes after the state");
  return state;
}

std::vector<ExportLayer> export_layers(const TrainedState& state, const std::vector<std::vector<std::uint8_t>>& masks) {
  const DenseModel frozen = state.network.freeze(masks);
  std::vector<ExportLayer> out;
  for (std::size_t l = 0; l < frozen.layers.size(); ++l) {
    const auto& w = frozen.weights[l].values();
    const auto& b = frozen.biases[l].values();
    out.push_back({frozen.layers[l], state.config.pruning[l], {w.begin(), w.end()}, {b.begin(), b.end()}, masks[l]});
  }
  return out;
}

}  // namespace dppkit
