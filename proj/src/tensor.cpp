#include "dppkit/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace dppkit {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

template <typename Real>
BasicTensor<Real>::BasicTensor() : storage_(std::make_shared<Storage>()) {}

template <typename Real>
BasicTensor<Real>::BasicTensor(Shape shape, Real fill)
    : shape_(std::move(shape)), storage_(std::make_shared<Storage>()) {
  for (auto extent : shape_) {
    if (extent == 0) throw std::invalid_argument("tensor extents must be positive");
  }
  storage_->values.assign(shape_numel(shape_), fill);
}

template <typename Real>
BasicTensor<Real>::BasicTensor(Shape shape, std::vector<Real> values)
    : shape_(std::move(shape)), storage_(std::make_shared<Storage>()) {
  for (auto extent : shape_) {
    if (extent == 0) throw std::invalid_argument("tensor extents must be positive");
  }
  if (values.size() != shape_numel(shape_)) {
    throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                " does not match shape " + shape_to_string(shape_));
  }
  storage_->values = std::move(values);
}

template <typename Real>
BasicTensor<Real>::BasicTensor(Shape shape, std::shared_ptr<Storage> storage)
    : shape_(std::move(shape)), storage_(std::move(storage)) {}

template <typename Real>
const Shape& BasicTensor<Real>::shape() const {
  return shape_;
}

template <typename Real>
std::size_t BasicTensor<Real>::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw std::out_of_range("tensor axis out of range");
  return shape_[axis];
}

template <typename Real>
std::size_t BasicTensor<Real>::numel() const {
  return storage_->values.size();
}

template <typename Real>
std::span<Real> BasicTensor<Real>::values() {
  return storage_->values;
}

template <typename Real>
std::span<const Real> BasicTensor<Real>::values() const {
  return storage_->values;
}

template <typename Real>
Real BasicTensor<Real>::item() const {
  if (numel() != 1) throw std::logic_error("item() requires a single-element tensor");
  return storage_->values[0];
}

template <typename Real>
bool BasicTensor<Real>::requires_grad() const {
  return storage_->requires_grad;
}

template <typename Real>
BasicTensor<Real>& BasicTensor<Real>::set_requires_grad(bool flag) {
  storage_->requires_grad = flag;
  return *this;
}

template <typename Real>
bool BasicTensor<Real>::has_grad() const {
  return !storage_->grad.empty();
}

template <typename Real>
std::span<Real> BasicTensor<Real>::grad() const {
  if (storage_->grad.empty()) storage_->grad.assign(numel(), Real(0));
  return storage_->grad;
}

template <typename Real>
void BasicTensor<Real>::zero_grad() const {
  std::fill(storage_->grad.begin(), storage_->grad.end(), Real(0));
}

template <typename Real>
void BasicTensor<Real>::drop_grad() const {
  storage_->grad.clear();
  storage_->grad.shrink_to_fit();
}

template <typename Real>
BasicTensor<Real> BasicTensor<Real>::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw std::invalid_argument("cannot reshape " + shape_to_string(shape_) + " to " +
                                shape_to_string(shape));
  }
  return BasicTensor(std::move(shape), storage_);
}

template <typename Real>
BasicTensor<Real> BasicTensor<Real>::clone() const {
  auto copy = std::make_shared<Storage>(*storage_);
  return BasicTensor(shape_, std::move(copy));
}

template <typename Real>
bool BasicTensor<Real>::shares_storage(const BasicTensor& other) const {
  return storage_ == other.storage_;
}

template <typename Real>
void BasicTape<Real>::record(BackwardFn fn) {
  if (!recording_) return;
  if (consumed_) throw std::logic_error("tape already replayed; reset() before recording again");
  entries_.push_back(std::move(fn));
}

template <typename Real>
void BasicTape<Real>::backward(BasicTensor<Real>& loss) {
  if (consumed_) throw std::logic_error("backward() called twice on the same tape");
  if (loss.numel() != 1) throw std::invalid_argument("backward() needs a scalar loss");
  if (!loss.requires_grad()) throw std::logic_error("loss was not produced by recorded operations");
  consumed_ = true;
  loss.grad()[0] += Real(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
}

template <typename Real>
void BasicTape<Real>::reset() {
  entries_.clear();
  consumed_ = false;
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class BasicTape<float>;
template class BasicTape<double>;

}  // namespace dppkit
