#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hyperseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Thrown for any shape/extent disagreement between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major tensor of doubles with shared storage. Copies alias the same
// buffer; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor full(Shape shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const { return impl().data.size(); }

  std::span<const double> data() const { return impl().data; }
  std::span<double> mutable_data() { return impl().data; }
  const double* ptr() const { return impl().data.data(); }
  double* mutable_ptr() { return impl().data.data(); }
  double operator[](std::size_t i) const { return impl().data[i]; }
  double item() const;

  bool requires_grad() const { return defined() && impl().requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return defined() && !impl().grad.empty(); }
  std::span<const double> grad() const { return impl().grad; }
  // Allocates a zero gradient buffer if none exists.
  std::span<double> grad_buffer() const;
  void zero_grad() const;

  // Deep copy of the values; no grad, not tracked.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  detail::TensorImpl& impl() const;

  std::shared_ptr<detail::TensorImpl> impl_;
};

// Ordered record of differentiable operations. Operations record themselves
// into the tape that is active on the current thread (see TapeGuard).
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(Tensor output, BackwardFn fn);
  // Seeds d(loss)/d(loss) = 1 and replays every recorded entry once, newest
  // first. Throws if loss is not a single-element tensor.
  void backward(const Tensor& loss);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
};

// Activates a tape for the current thread for the guard's lifetime.
class TapeGuard {
 public:
  explicit TapeGuard(Tape& tape);
  ~TapeGuard();
  TapeGuard(const TapeGuard&) = delete;
  TapeGuard& operator=(const TapeGuard&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// True when an op with these inputs must be recorded.
bool needs_tape(std::initializer_list<const Tensor*> inputs);

}  // namespace hyperseg
