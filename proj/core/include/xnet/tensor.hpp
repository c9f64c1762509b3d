#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace xnet {

/// Extents of a tensor. Rank 0 denotes a scalar; every extent is positive.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::int64_t> extents);
  explicit Shape(std::vector<std::int64_t> extents);

  std::size_t rank() const noexcept { return extents_.size(); }
  std::int64_t operator[](std::size_t axis) const { return extents_[axis]; }
  std::int64_t numel() const noexcept;
  const std::vector<std::int64_t>& extents() const noexcept { return extents_; }

  /// "(1,3,4,4)"
  std::string str() const;

  bool operator==(const Shape&) const = default;

 private:
  std::vector<std::int64_t> extents_;
};

/// 64-byte aligned storage. Vectorised reductions peel up to the first
/// aligned element, so a fixed alignment keeps their summation order (and the
/// rounding) identical from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct TensorImpl {
  Shape shape;
  AlignedVector<T> data;
  AlignedVector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

/// Shared handle to a dense row-major array. Copies alias the same storage;
/// use clone() for a deep copy.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  static BasicTensor zeros(const Shape& shape);
  static BasicTensor full(const Shape& shape, T value);
  static BasicTensor from_data(const Shape& shape, std::vector<T> data);
  static BasicTensor scalar(T value) { return full(Shape{}, value); }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }
  std::int64_t dim(std::size_t axis) const { return impl_->shape[axis]; }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  BasicTensor& set_requires_grad(bool flag = true);

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer; empty span when nothing has been accumulated.
  std::span<T> grad() { return impl_->grad; }
  std::span<const T> grad() const { return impl_->grad; }
  void zero_grad();

  BasicTensor clone() const;
  /// Same storage values, detached from any recorded computation.
  BasicTensor detach() const { return clone(); }

  bool same_storage(const BasicTensor& other) const noexcept { return impl_ == other.impl_; }
  const std::shared_ptr<TensorImpl<T>>& impl() const noexcept { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Ordered log of executed differentiable operations. Each record is a
/// closure that propagates the output gradient into its operands.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(BackwardFn fn) { records_.push_back(std::move(fn)); }
  std::size_t size() const noexcept { return records_.size(); }
  void clear() { records_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and replays records in reverse. The tape is
  /// consumed: each record runs at most once.
  void backward(BasicTensor<T>& loss);

 private:
  std::vector<BackwardFn> records_;
};

template <typename T>
Tape<T>* active_tape() noexcept;

/// Installs a tape as the recording target for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Backward through the thread's active tape.
template <typename T>
void backward(BasicTensor<T>& loss);

namespace detail {

template <typename T>
void set_active_tape(Tape<T>* tape) noexcept;

/// True when an op over these operands must be recorded.
template <typename T>
bool should_record(std::initializer_list<const BasicTensor<T>*> operands) noexcept {
  if (active_tape<T>() == nullptr) return false;
  for (const auto* t : operands) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
std::span<T> grad_buffer(TensorImpl<T>& impl) {
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), T(0));
  return impl.grad;
}

}  // namespace detail

/// XNET_DETERMINISTIC=1 pins every parallel path to one thread.
bool deterministic_mode();

}  // namespace xnet
