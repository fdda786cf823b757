#include "dppkit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace dppkit {

namespace detail {

template <typename Real>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* c_row = c + i * n;
    const Real* a_row = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = a_row[p];
      if (aip == Real(0)) continue;
      const Real* b_row = b + p * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += aip * b_row[j];
    }
  }
}

template <typename Real>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const Real* a_row = a + p * m;
    const Real* b_row = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const Real api = a_row[i];
      if (api == Real(0)) continue;
      Real* c_row = c + i * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += api * b_row[j];
    }
  }
}

template <typename Real>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
  std::vector<Real> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, k, n, a, bt.data(), c);
}

template void gemm_nn<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
template void gemm_nn<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);
template void gemm_tn<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
template void gemm_tn<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);
template void gemm_nt<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*);
template void gemm_nt<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*);

}  // namespace detail

namespace {

template <typename Real>
bool wants_grad(const BasicTape<Real>& tape, const BasicTensor<Real>& a) {
  return tape.recording() && a.requires_grad();
}

template <typename Real>
bool wants_grad(const BasicTape<Real>& tape, const BasicTensor<Real>& a,
                const BasicTensor<Real>& b) {
  return tape.recording() && (a.requires_grad() || b.requires_grad());
}

void require(bool condition, const std::string& message) {
  if (!condition) throw std::invalid_argument(message);
}

}  // namespace

template <typename Real>
BasicTensor<Real> matmul(BasicTape<Real>& tape, const BasicTensor<Real>& a,
                         const BasicTensor<Real>& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 operands");
  require(a.dim(1) == b.dim(0), "matmul inner extents differ: " + shape_to_string(a.shape()) +
                                    " vs " + shape_to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  BasicTensor<Real> out({m, n});
  detail::gemm_nn(m, k, n, a.values().data(), b.values().data(), out.values().data());
  if (wants_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record([a, b, out, m, k, n]() mutable {
      const Real* dy = out.grad().data();
      if (a.requires_grad()) detail::gemm_nt(m, n, k, dy, b.values().data(), a.grad().data());
      if (b.requires_grad()) detail::gemm_tn(k, m, n, a.values().data(), dy, b.grad().data());
    });
  }
  return out;
}

namespace {

struct ConvGeometry {
  std::size_t batch, cin, h, w, kh, kw, cout, stride, oh, ow;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

template <typename Real>
void im2col(const ConvGeometry& g, const Real* image, Real* col) {
  // col: [positions x patch], patch order (c, i, j) matches the weight layout.
  for (std::size_t y = 0; y < g.oh; ++y) {
    for (std::size_t x = 0; x < g.ow; ++x) {
      Real* row = col + (y * g.ow + x) * g.patch();
      std::size_t q = 0;
      for (std::size_t c = 0; c < g.cin; ++c) {
        const Real* plane = image + c * g.h * g.w;
        for (std::size_t i = 0; i < g.kh; ++i) {
          const Real* src = plane + (y * g.stride + i) * g.w + x * g.stride;
          for (std::size_t j = 0; j < g.kw; ++j) row[q++] = src[j];
        }
      }
    }
  }
}

template <typename Real>
void col2im_add(const ConvGeometry& g, const Real* col, Real* image) {
  for (std::size_t y = 0; y < g.oh; ++y) {
    for (std::size_t x = 0; x < g.ow; ++x) {
      const Real* row = col + (y * g.ow + x) * g.patch();
      std::size_t q = 0;
      for (std::size_t c = 0; c < g.cin; ++c) {
        Real* plane = image + c * g.h * g.w;
        for (std::size_t i = 0; i < g.kh; ++i) {
          Real* dst = plane + (y * g.stride + i) * g.w + x * g.stride;
          for (std::size_t j = 0; j < g.kw; ++j) dst[j] += row[q++];
        }
      }
    }
  }
}

}  // namespace

template <typename Real>
BasicTensor<Real> conv2d(BasicTape<Real>& tape, const BasicTensor<Real>& x,
                         const BasicTensor<Real>& w, std::size_t stride) {
  require(x.rank() == 4 && w.rank() == 4, "conv2d expects rank-4 input and kernel");
  require(stride > 0, "conv2d stride must be positive");
  require(x.dim(1) == w.dim(0), "conv2d channel mismatch: input " + shape_to_string(x.shape()) +
                                    ", kernel " + shape_to_string(w.shape()));
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(1), w.dim(2), w.dim(3), stride, 0, 0};
  require(g.kh <= g.h && g.kw <= g.w, "conv2d kernel larger than input");
  require((g.h - g.kh) % stride == 0 && (g.w - g.kw) % stride == 0,
          "conv2d output extent is not an integer for stride " + std::to_string(stride));
  g.oh = (g.h - g.kh) / stride + 1;
  g.ow = (g.w - g.kw) / stride + 1;

  BasicTensor<Real> out({g.batch, g.cout, g.oh, g.ow});
  const std::size_t in_image = g.cin * g.h * g.w;
  const std::size_t out_image = g.cout * g.positions();
  std::vector<Real> col(g.positions() * g.patch());
  std::vector<Real> tmp(g.positions() * g.cout);
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(g, x.values().data() + b * in_image, col.data());
    std::fill(tmp.begin(), tmp.end(), Real(0));
    detail::gemm_nn(g.positions(), g.patch(), g.cout, col.data(), w.values().data(), tmp.data());
    Real* dst = out.values().data() + b * out_image;
    for (std::size_t p = 0; p < g.positions(); ++p)
      for (std::size_t o = 0; o < g.cout; ++o) dst[o * g.positions() + p] = tmp[p * g.cout + o];
  }

  if (wants_grad(tape, x, w)) {
    out.set_requires_grad(true);
    tape.record([x, w, out, g]() mutable {
      const std::size_t in_image = g.cin * g.h * g.w;
      const std::size_t out_image = g.cout * g.positions();
      std::vector<Real> col(g.positions() * g.patch());
      std::vector<Real> dcol(g.positions() * g.patch());
      std::vector<Real> dy(g.positions() * g.cout);
      for (std::size_t b = 0; b < g.batch; ++b) {
        const Real* src = out.grad().data() + b * out_image;
        for (std::size_t p = 0; p < g.positions(); ++p)
          for (std::size_t o = 0; o < g.cout; ++o) dy[p * g.cout + o] = src[o * g.positions() + p];
        if (w.requires_grad()) {
          im2col(g, x.values().data() + b * in_image, col.data());
          detail::gemm_tn(g.patch(), g.positions(), g.cout, col.data(), dy.data(), w.grad().data());
        }
        if (x.requires_grad()) {
          std::fill(dcol.begin(), dcol.end(), Real(0));
          detail::gemm_nt(g.positions(), g.cout, g.patch(), dy.data(), w.values().data(), dcol.data());
          col2im_add(g, dcol.data(), x.grad().data() + b * in_image);
        }
      }
    });
  }
  return out;
}

template <typename Real>
BasicTensor<Real> relu(BasicTape<Real>& tape, const BasicTensor<Real>& x) {
  BasicTensor<Real> out(x.shape());
  auto xv = x.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > Real(0) ? xv[i] : Real(0);
  if (wants_grad(tape, x)) {
    out.set_requires_grad(true);
    tape.record([x, out]() mutable {
      auto xv = x.values();
      auto dy = out.grad();
      auto dx = x.grad();
      for (std::size_t i = 0; i < xv.size(); ++i)
        if (xv[i] > Real(0)) dx[i] += dy[i];
    });
  }
  return out;
}

template <typename Real>
BasicTensor<Real> maxpool2x2(BasicTape<Real>& tape, const BasicTensor<Real>& x) {
  require(x.rank() == 4, "maxpool2x2 expects a rank-4 tensor");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h % 2 == 0 && w % 2 == 0, "maxpool2x2 needs even spatial extents");
  const std::size_t oh = h / 2, ow = w / 2;
  BasicTensor<Real> out({x.dim(0), x.dim(1), oh, ow});
  std::vector<std::size_t> argmax(out.numel());
  auto xv = x.values();
  auto ov = out.values();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t c = 0; c < ow; ++c) {
        std::size_t best = p * h * w + (2 * y) * w + 2 * c;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = p * h * w + (2 * y + dy) * w + 2 * c + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = p * oh * ow + y * ow + c;
        ov[o] = xv[best];
        argmax[o] = best;
      }
    }
  }
  if (wants_grad(tape, x)) {
    out.set_requires_grad(true);
    tape.record([x, out, argmax = std::move(argmax)]() mutable {
      auto dy = out.grad();
      auto dx = x.grad();
      for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += dy[o];
    });
  }
  return out;
}

template <typename Real>
BasicTensor<Real> add_bias(BasicTape<Real>& tape, const BasicTensor<Real>& x,
                           const BasicTensor<Real>& b) {
  require(x.rank() >= 2 && b.rank() == 1 && x.dim(1) == b.dim(0),
          "add_bias shape mismatch: " + shape_to_string(x.shape()) + " + " +
              shape_to_string(b.shape()));
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t inner = x.numel() / (batch * channels);
  BasicTensor<Real> out(x.shape());
  auto xv = x.values();
  auto bv = b.values();
  auto ov = out.values();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (n * channels + c) * inner + i;
        ov[idx] = xv[idx] + bv[c];
      }
  if (wants_grad(tape, x, b)) {
    out.set_requires_grad(true);
    tape.record([x, b, out, batch, channels, inner]() mutable {
      auto dy = out.grad();
      if (x.requires_grad()) {
        auto dx = x.grad();
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t c = 0; c < channels; ++c) {
            const Real* row = dy.data() + (n * channels + c) * inner;
            Real acc = 0;
            for (std::size_t i = 0; i < inner; ++i) acc += row[i];
            db[c] += acc;
          }
      }
    });
  }
  return out;
}

template <typename Real>
BasicTensor<Real> elementwise_mul(BasicTape<Real>& tape, const BasicTensor<Real>& a,
                                  const BasicTensor<Real>& b) {
  require(a.shape() == b.shape(), "elementwise_mul shape mismatch: " +
                                      shape_to_string(a.shape()) + " vs " +
                                      shape_to_string(b.shape()));
  BasicTensor<Real> out(a.shape());
  auto av = a.values();
  auto bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (wants_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record([a, b, out]() mutable {
      auto dy = out.grad();
      if (a.requires_grad()) {
        auto da = a.grad();
        auto bv = b.values();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        auto av = a.values();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
      }
    });
  }
  return out;
}

template <typename Real>
BasicTensor<Real> add(BasicTape<Real>& tape, const BasicTensor<Real>& a,
                      const BasicTensor<Real>& b) {
  require(a.shape() == b.shape(), "add shape mismatch");
  BasicTensor<Real> out(a.shape());
  auto av = a.values();
  auto bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (wants_grad(tape, a, b)) {
    out.set_requires_grad(true);
    tape.record([a, b, out]() mutable {
      auto dy = out.grad();
      if (a.requires_grad()) {
        auto da = a.grad();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
      }
      if (b.requires_grad()) {
        auto db = b.grad();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
      }
    });
  }
  return out;
}

template <typename Real>
BasicTensor<Real> scale(BasicTape<Real>& tape, const BasicTensor<Real>& a, Real factor) {
  BasicTensor<Real> out(a.shape());
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * factor;
  if (wants_grad(tape, a)) {
    out.set_requires_grad(true);
    tape.record([a, out, factor]() mutable {
      auto dy = out.grad();
      auto da = a.grad();
      for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * factor;
    });
  }
  return out;
}

template <typename Real>
BasicTensor<Real> sum(BasicTape<Real>& tape, const BasicTensor<Real>& a) {
  Real acc = 0;
  for (Real v : a.values()) acc += v;
  BasicTensor<Real> out({1}, std::vector<Real>{acc});
  if (wants_grad(tape, a)) {
    out.set_requires_grad(true);
    tape.record([a, out]() mutable {
      const Real g = out.grad()[0];
      for (auto& d : a.grad()) d += g;
    });
  }
  return out;
}

template <typename Real>
BasicTensor<Real> softmax_cross_entropy(BasicTape<Real>& tape, const BasicTensor<Real>& logits,
                                        std::span<const int> labels) {
  require(logits.rank() == 2, "softmax_cross_entropy expects [batch x classes] logits");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  require(labels.size() == batch, "label count does not match batch size");
  auto lv = logits.values();
  std::vector<Real> probs(lv.size());
  double total = 0;
  for (std::size_t n = 0; n < batch; ++n) {
    const int label = labels[n];
    require(label >= 0 && static_cast<std::size_t>(label) < classes, "label out of range");
    const Real* row = lv.data() + n * classes;
    Real peak = row[0];
    for (std::size_t c = 0; c < classes; ++c) {
      if (!std::isfinite(row[c])) throw std::domain_error("non-finite logit in softmax_cross_entropy");
      peak = std::max(peak, row[c]);
    }
    Real z = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      probs[n * classes + c] = std::exp(row[c] - peak);
      z += probs[n * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) probs[n * classes + c] /= z;
    total += static_cast<double>(std::log(z) + peak - row[label]);
  }
  BasicTensor<Real> out({1}, std::vector<Real>{static_cast<Real>(total / static_cast<double>(batch))});
  if (wants_grad(tape, logits)) {
    out.set_requires_grad(true);
    std::vector<int> targets(labels.begin(), labels.end());
    tape.record([logits, out, probs = std::move(probs), targets = std::move(targets), batch,
                 classes]() mutable {
      const Real g = out.grad()[0] / static_cast<Real>(batch);
      auto dx = logits.grad();
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t c = 0; c < classes; ++c) {
          const Real target = static_cast<std::size_t>(targets[n]) == c ? Real(1) : Real(0);
          dx[n * classes + c] += g * (probs[n * classes + c] - target);
        }
    });
  }
  return out;
}

template <typename Real>
BasicTensor<Real> softmax_cross_entropy(BasicTape<Real>& tape, const BasicTensor<Real>& logits,
                                        const BasicTensor<Real>& one_hot_targets) {
  require(one_hot_targets.shape() == logits.shape(), "target shape differs from logits");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  std::vector<int> labels(batch);
  auto tv = one_hot_targets.values();
  for (std::size_t n = 0; n < batch; ++n) {
    int hot = -1;
    for (std::size_t c = 0; c < classes; ++c) {
      const Real v = tv[n * classes + c];
      if (v == Real(1) && hot < 0) {
        hot = static_cast<int>(c);
      } else if (v != Real(0)) {
        throw std::invalid_argument("target row " + std::to_string(n) + " is not one-hot");
      }
    }
    if (hot < 0) throw std::invalid_argument("target row " + std::to_string(n) + " is not one-hot");
    labels[n] = hot;
  }
  return softmax_cross_entropy(tape, logits, std::span<const int>(labels));
}

#define DPPKIT_INSTANTIATE_OPS(Real)                                                              \
  template BasicTensor<Real> matmul(BasicTape<Real>&, const BasicTensor<Real>&,                   \
                                    const BasicTensor<Real>&);                                    \
  template BasicTensor<Real> conv2d(BasicTape<Real>&, const BasicTensor<Real>&,                   \
                                    const BasicTensor<Real>&, std::size_t);                       \
  template BasicTensor<Real> relu(BasicTape<Real>&, const BasicTensor<Real>&);                    \
  template BasicTensor<Real> maxpool2x2(BasicTape<Real>&, const BasicTensor<Real>&);              \
  template BasicTensor<Real> add_bias(BasicTape<Real>&, const BasicTensor<Real>&,                 \
                                      const BasicTensor<Real>&);                                  \
  template BasicTensor<Real> elementwise_mul(BasicTape<Real>&, const BasicTensor<Real>&,          \
                                             const BasicTensor<Real>&);                           \
  template BasicTensor<Real> add(BasicTape<Real>&, const BasicTensor<Real>&,                      \
                                 const BasicTensor<Real>&);                                       \
  template BasicTensor<Real> scale(BasicTape<Real>&, const BasicTensor<Real>&, Real);             \
  template BasicTensor<Real> sum(BasicTape<Real>&, const BasicTensor<Real>&);                     \
  template BasicTensor<Real> softmax_cross_entropy(BasicTape<Real>&, const BasicTensor<Real>&,    \
                                                   std::span<const int>);                         \
  template BasicTensor<Real> softmax_cross_entropy(BasicTape<Real>&, const BasicTensor<Real>&,    \
                                                   const BasicTensor<Real>&);

DPPKIT_INSTANTIATE_OPS(float)
DPPKIT_INSTANTIATE_OPS(double)

#undef DPPKIT_INSTANTIATE_OPS

}  // namespace dppkit
