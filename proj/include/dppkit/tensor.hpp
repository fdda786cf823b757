#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dppkit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array with an optional gradient buffer.
///
/// Tensors have handle semantics: copying a tensor shares the underlying
/// storage, which is what lets the tape refer back to operands after the
/// forward pass. Use clone() for an independent deep copy.
template <typename Real>
class BasicTensor {
 public:
  BasicTensor();
  explicit BasicTensor(Shape shape, Real fill = Real(0));
  BasicTensor(Shape shape, std::vector<Real> values);

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
  static BasicTensor ones(Shape shape) { return BasicTensor(std::move(shape), Real(1)); }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  bool empty() const { return numel() == 0; }

  std::span<Real> values();
  std::span<const Real> values() const;
  Real& operator[](std::size_t i) { return values()[i]; }
  const Real& operator[](std::size_t i) const { return values()[i]; }
  Real item() const;

  bool requires_grad() const;
  BasicTensor& set_requires_grad(bool flag);

  bool has_grad() const;
  /// Gradient buffer; allocated (zero-filled) on first access. The buffer
  /// belongs to the shared storage, so it stays writable through const
  /// handles (the tape holds const copies of its operands).
  std::span<Real> grad() const;
  void zero_grad() const;
  void drop_grad() const;

  /// Same storage reinterpreted with a new shape of equal size.
  BasicTensor reshaped(Shape shape) const;
  BasicTensor clone() const;
  bool shares_storage(const BasicTensor& other) const;

 private:
  struct Storage {
    std::vector<Real> values;
    std::vector<Real> grad;
    bool requires_grad = false;
  };

  BasicTensor(Shape shape, std::shared_ptr<Storage> storage);

  Shape shape_;
  std::shared_ptr<Storage> storage_;
};

/// Ordered record of executed differentiable operations.
///
/// Each recorded entry is a closure that propagates the gradient of one
/// operation's result into its operands. backward() replays the record in
/// reverse exactly once; the tape must be reset before it can be reused.
template <typename Real>
class BasicTape {
 public:
  using BackwardFn = std::function<void()>;

  BasicTape() = default;
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  bool recording() const { return recording_; }
  void set_recording(bool flag) { recording_ = flag; }

  void record(BackwardFn fn);
  std::size_t size() const { return entries_.size(); }

  void backward(BasicTensor<Real>& loss);
  void reset();

 private:
  std::vector<BackwardFn> entries_;
  bool recording_ = true;
  bool consumed_ = false;
};

/// Disables recording on a tape for the lifetime of the guard.
template <typename Real>
class NoGradGuard {
 public:
  explicit NoGradGuard(BasicTape<Real>& tape) : tape_(tape), previous_(tape.recording()) {
    tape_.set_recording(false);
  }
  ~NoGradGuard() { tape_.set_recording(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  BasicTape<Real>& tape_;
  bool previous_;
};

using Tensor = BasicTensor<float>;
using Tape = BasicTape<float>;

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;
extern template class BasicTape<float>;
extern template class BasicTape<double>;

}  // namespace dppkit
