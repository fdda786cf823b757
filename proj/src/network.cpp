#include "dppkit/network.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "dppkit/ops.hpp"

namespace dppkit {

std::string_view to_string(Architecture arch) {
  return arch == Architecture::LeNet300_100 ? "lenet300-100" : "lenet5-caffe";
}

Architecture parse_architecture(std::string_view text) {
  if (text == "lenet300-100" || text == "lenet300") return Architecture::LeNet300_100;
  if (text == "lenet5-caffe" || text == "lenet5") return Architecture::LeNet5Caffe;
  throw std::invalid_argument("unknown architecture '" + std::string(text) + "'");
}

std::vector<LayerSpec> architecture_layers(Architecture arch) {
  using K = LayerKind;
  if (arch == Architecture::LeNet300_100) {
    return {{K::FullyConnected, {784, 1, 1, 300}, true, false},
            {K::FullyConnected, {300, 1, 1, 100}, true, false},
            {K::FullyConnected, {100, 1, 1, 10}, false, false}};
  }
  return {{K::Convolutional, {1, 5, 5, 20}, false, true},
          {K::Convolutional, {20, 5, 5, 50}, false, true},
          {K::FullyConnected, {800, 1, 1, 500}, true, false},
          {K::FullyConnected, {500, 1, 1, 10}, false, false}};
}

template <typename Real>
BasicTensor<Real> forward_stack(BasicTape<Real>& tape, std::span<const LayerSpec> layers,
                                std::span<const BasicTensor<Real>> weights,
                                std::span<const BasicTensor<Real>> biases, const BasicTensor<Real>& batch) {
  if (layers.size() != weights.size() || layers.size() != biases.size()) {
    throw std::invalid_argument("forward_stack: layer, weight and bias counts differ");
  }
  if (batch.rank() != 2 || batch.dim(1) != kImageSide * kImageSide) {
    throw std::invalid_argument("forward_stack expects a [batch x 784] input, got " +
                                shape_to_string(batch.shape()));
  }
  const std::size_t n = batch.dim(0);
  BasicTensor<Real> x = batch;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& spec = layers[l];
    if (spec.kind == LayerKind::Convolutional) {
      if (x.rank() == 2) {
        const std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(double(x.dim(1) / spec.dims.n_in))));
        x = x.reshaped({n, spec.dims.n_in, side, side});
      }
      x = add_bias(tape, conv2d(tape, x, weights[l]), biases[l]);
      if (spec.pool) x = maxpool2x2(tape, x);
    } else {
      if (x.rank() != 2) x = x.reshaped({n, x.numel() / n});
      x = add_bias(tape, matmul(tape, x, weights[l]), biases[l]);
    }
    if (spec.relu) x = relu(tape, x);
  }
  return x;
}

Tensor DenseModel::logits(const Tensor& batch) const {
  Tape tape;
  tape.set_recording(false);
  return forward_stack<float>(tape, layers, weights, biases, batch);
}

double xavier_limit(const LayerSpec& layer) {
  const double area = static_cast<double>(layer.dims.kernel_area());
  const double fan_in = static_cast<double>(layer.dims.n_in) * area;
  const double fan_out = static_cast<double>(layer.dims.n_out) * area;
  return std::sqrt(6.0 / (fan_in + fan_out));
}

Network::Network(Architecture arch, const std::vector<GranularitySpec>& pruning, QuantSpec quant, Rng& init)
    : arch_(arch), specs_(architecture_layers(arch)), quant_(quant) {
  if (pruning.size() != specs_.size()) {
    throw std::invalid_argument(std::string(to_string(arch)) + " has " + std::to_string(specs_.size()) +
                                " layers but " + std::to_string(pruning.size()) + " pruning specs were given");
  }
  for (std::size_t l = 0; l < specs_.size(); ++l) {
    const auto& spec = specs_[l];
    auto logits = build_logits<float>(spec.kind, spec.dims, pruning[l]);
    Tensor weights(logits.geometry.weight_shape());
    const double limit = xavier_limit(spec);
    for (auto& w : weights.values()) w = static_cast<float>(init.uniform(-limit, limit));
    weights.set_requires_grad(true);
    Tensor bias({spec.dims.n_out});
    bias.set_requires_grad(true);
    layers_.push_back({std::move(weights), std::move(bias), std::move(logits)});
  }
}

std::vector<Tensor> Network::parameters() const {
  std::vector<Tensor> params;
  for (const auto& layer : layers_) {
    params.push_back(layer.weights);
    params.push_back(layer.bias);
    params.push_back(layer.logits.values);
  }
  return params;
}

std::size_t Network::weight_count() const {
  std::size_t total = 0;
  for (const auto& layer : layers_) total += layer.weights.numel();
  return total;
}

DenseModel Network::freeze(const std::vector<std::vector<std::uint8_t>>& effective_masks) const {
  if (effective_masks.size() != layers_.size()) throw std::invalid_argument("one mask per layer is required");
  DenseModel model;
  model.arch = arch_;
  model.layers = specs_;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    const auto full = expand_hard_mask(effective_masks[l], layer.geometry());
    Tensor w(layer.weights.shape());
    auto latent = layer.weights.values();
    auto out = w.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
      const float q = static_cast<float>(quantize_value(static_cast<double>(latent[i]), quant_));
      out[i] = full[i] ? q : 0.0f;
    }
    model.weights.push_back(std::move(w));
    model.biases.emplace_back(layer.bias.shape(),
                              std::vector<float>(layer.bias.values().begin(), layer.bias.values().end()));
  }
  return model;
}

template BasicTensor<float> forward_stack<float>(BasicTape<float>&, std::span<const LayerSpec>,
                                                 std::span<const BasicTensor<float>>,
                                                 std::span<const BasicTensor<float>>, const BasicTensor<float>&);
template BasicTensor<double> forward_stack<double>(BasicTape<double>&, std::span<const LayerSpec>,
                                                   std::span<const BasicTensor<double>>,
                                                   std::span<const BasicTensor<double>>,
                                                   const BasicTensor<double>&);

}  // namespace dppkit
