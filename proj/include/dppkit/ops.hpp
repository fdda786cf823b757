#pragma once

#include <cstddef>
#include <span>

#include "dppkit/tensor.hpp"

// Differentiable operations. Every function records its backward step on the
// tape when the tape is recording and at least one operand requires a
// gradient; the result then requires a gradient as well.

namespace dppkit {

/// [m x k] * [k x n] -> [m x n].
template <typename Real>
BasicTensor<Real> matmul(BasicTape<Real>& tape, const BasicTensor<Real>& a,
                         const BasicTensor<Real>& b);

/// Valid cross-correlation. x: [batch x cin x h x w], w: [cin x kh x kw x cout].
template <typename Real>
BasicTensor<Real> conv2d(BasicTape<Real>& tape, const BasicTensor<Real>& x,
                         const BasicTensor<Real>& w, std::size_t stride = 1);

template <typename Real>
BasicTensor<Real> relu(BasicTape<Real>& tape, const BasicTensor<Real>& x);

/// 2x2 max pooling with stride 2 over the trailing two axes of a rank-4 tensor.
template <typename Real>
BasicTensor<Real> maxpool2x2(BasicTape<Real>& tape, const BasicTensor<Real>& x);

/// Adds b[n] along axis 1 of x ([batch x n] or [batch x n x h x w]).
template <typename Real>
BasicTensor<Real> add_bias(BasicTape<Real>& tape, const BasicTensor<Real>& x,
                           const BasicTensor<Real>& b);

template <typename Real>
BasicTensor<Real> elementwise_mul(BasicTape<Real>& tape, const BasicTensor<Real>& a,
                                  const BasicTensor<Real>& b);

template <typename Real>
BasicTensor<Real> add(BasicTape<Real>& tape, const BasicTensor<Real>& a,
                      const BasicTensor<Real>& b);

template <typename Real>
BasicTensor<Real> scale(BasicTape<Real>& tape, const BasicTensor<Real>& a, Real factor);

/// Sum of all entries as a scalar tensor.
template <typename Real>
BasicTensor<Real> sum(BasicTape<Real>& tape, const BasicTensor<Real>& a);

/// Mean cross-entropy of softmax(logits) against class labels.
/// Backward is (softmax - onehot) / batch.
template <typename Real>
BasicTensor<Real> softmax_cross_entropy(BasicTape<Real>& tape, const BasicTensor<Real>& logits,
                                        std::span<const int> labels);

/// Same loss with one-hot target rows; rows that are not one-hot are rejected.
template <typename Real>
BasicTensor<Real> softmax_cross_entropy(BasicTape<Real>& tape, const BasicTensor<Real>& logits,
                                        const BasicTensor<Real>& one_hot_targets);

namespace detail {

// Row-major GEMM kernels, accumulating into c.
// c[m x n] += a[m x k] * b[k x n]
template <typename Real>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c);
// c[m x n] += a^T * b, a stored [k x m]
template <typename Real>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c);
// c[m x n] += a * b^T, b stored [n x k]
template <typename Real>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c);

}  // namespace detail

}  // namespace dppkit
