#include "xnet/tensor.hpp"

#include <cstdlib>
#include <cstring>
#include <sstream>

#include "xnet/errors.hpp"

namespace xnet {

Shape::Shape(std::initializer_list<std::int64_t> extents) : Shape(std::vector<std::int64_t>(extents)) {}

Shape::Shape(std::vector<std::int64_t> extents) : extents_(std::move(extents)) {
  for (auto e : extents_) {
    if (e <= 0) throw ShapeError("shape extents must be positive, got " + str());
  }
}

std::int64_t Shape::numel() const noexcept {
  std::int64_t n = 1;
  for (auto e : extents_) n *= e;
  return n;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < extents_.size(); ++i) {
    if (i) os << ',';
    os << extents_[i];
  }
  os << ')';
  return os.str();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(const Shape& shape) {
  return full(shape, T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(const Shape& shape, T value) {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = shape;
  impl->data.assign(static_cast<std::size_t>(shape.numel()), value);
  return BasicTensor(std::move(impl));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_data(const Shape& shape, std::vector<T> data) {
  if (static_cast<std::int64_t>(data.size()) != shape.numel()) {
    throw ShapeError("buffer of " + std::to_string(data.size()) + " elements does not fill shape " +
                     shape.str());
  }
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = shape;
  impl->data.assign(data.begin(), data.end());
  return BasicTensor(std::move(impl));
}

template <typename T>
T BasicTensor<T>::item() const {
  if (impl_->data.size() != 1) throw UsageError("item() on tensor of shape " + shape().str());
  return impl_->data[0];
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  impl_->grad.clear();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return BasicTensor(std::move(impl));
}

namespace {

template <typename T>
Tape<T>*& tape_slot() noexcept {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

}  // namespace

template <typename T>
Tape<T>* active_tape() noexcept {
  return tape_slot<T>();
}

namespace detail {
template <typename T>
void set_active_tape(Tape<T>* tape) noexcept {
  tape_slot<T>() = tape;
}
}  // namespace detail

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(active_tape<T>()) {
  detail::set_active_tape<T>(&tape);
}

template <typename T>
TapeScope<T>::~TapeScope() {
  detail::set_active_tape<T>(previous_);
}

template <typename T>
void Tape<T>::backward(BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " +
                     (loss.defined() ? loss.shape().str() : std::string("<undefined>")));
  }
  if (loss.requires_grad()) {
    auto g = detail::grad_buffer(*loss.impl());
    g[0] += T(1);
  }
  // Move the records out first so a record can never be replayed.
  std::vector<BackwardFn> records;
  records.swap(records_);
  for (auto it = records.rbegin(); it != records.rend(); ++it) {
    (*it)();
    *it = nullptr;  // release saved intermediates early
  }
}

template <typename T>
void backward(BasicTensor<T>& loss) {
  auto* tape = active_tape<T>();
  if (tape == nullptr) throw UsageError("backward() called without an active tape");
  tape->backward(loss);
}

bool deterministic_mode() {
  const char* v = std::getenv("XNET_DETERMINISTIC");
  return v != nullptr && std::strcmp(v, "0") != 0 && v[0] != '\0';
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template Tape<float>* active_tape<float>() noexcept;
template Tape<double>* active_tape<double>() noexcept;
template void backward<float>(BasicTensor<float>&);
template void backward<double>(BasicTensor<double>&);
template void detail::set_active_tape<float>(Tape<float>*) noexcept;
template void detail::set_active_tape<double>(Tape<double>*) noexcept;

}  // namespace xnet
