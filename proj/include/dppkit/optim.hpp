#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "dppkit/tensor.hpp"

namespace dppkit {

struct AdamOptions {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct SgdOptions {
  double learning_rate = 0.01;
  double momentum = 0.9;
};

/// Adam with bias-corrected moments. One moment pair per parameter.
template <typename Real>
class BasicAdam {
 public:
  BasicAdam(std::vector<BasicTensor<Real>> params, AdamOptions options = {})
      : params_(std::move(params)), options_(options) {
    for (const auto& p : params_) {
      first_.emplace_back(p.numel(), Real(0));
      second_.emplace_back(p.numel(), Real(0));
    }
  }

  void step() {
    ++steps_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    const Real b1 = static_cast<Real>(options_.beta1);
    const Real b2 = static_cast<Real>(options_.beta2);
    const Real step_size = static_cast<Real>(options_.learning_rate / c1);
    const Real root_c2 = static_cast<Real>(std::sqrt(c2));
    const Real eps = static_cast<Real>(options_.epsilon);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto values = p.values();
      auto grad = p.grad();
      auto& m = first_[k];
      auto& v = second_[k];
      if (grad.size() != m.size()) throw std::invalid_argument("parameter resized after optimizer setup");
      for (std::size_t i = 0; i < values.size(); ++i) {
        const Real g = grad[i];
        m[i] = b1 * m[i] + (Real(1) - b1) * g;
        v[i] = b2 * v[i] + (Real(1) - b2) * g * g;
        values[i] -= step_size * m[i] / (std::sqrt(v[i]) / root_c2 + eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t steps() const { return steps_; }
  const AdamOptions& options() const { return options_; }
  const std::vector<BasicTensor<Real>>& params() const { return params_; }

 private:
  std::vector<BasicTensor<Real>> params_;
  AdamOptions options_;
  std::vector<std::vector<Real>> first_;
  std::vector<std::vector<Real>> second_;
  std::size_t steps_ = 0;
};

/// SGD with classical momentum: v <- mu*v + g; p <- p - lr*v.
template <typename Real>
class BasicSgd {
 public:
  BasicSgd(std::vector<BasicTensor<Real>> params, SgdOptions options = {})
      : params_(std::move(params)), options_(options) {
    for (const auto& p : params_) velocity_.emplace_back(p.numel(), Real(0));
  }

  void step() {
    const Real lr = static_cast<Real>(options_.learning_rate);
    const Real mu = static_cast<Real>(options_.momentum);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.has_grad()) continue;
      auto values = p.values();
      auto grad = p.grad();
      auto& vel = velocity_[k];
      if (grad.size() != vel.size()) throw std::invalid_argument("parameter resized after optimizer setup");
      for (std::size_t i = 0; i < values.size(); ++i) {
        vel[i] = mu * vel[i] + grad[i];
        values[i] -= lr * vel[i];
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const SgdOptions& options() const { return options_; }

 private:
  std::vector<BasicTensor<Real>> params_;
  SgdOptions options_;
  std::vector<std::vector<Real>> velocity_;
};

using Adam = BasicAdam<float>;
using Sgd = BasicSgd<float>;

}  // namespace dppkit
