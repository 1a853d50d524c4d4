#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "adsd/errors.hpp"
#include "adsd/rng.hpp"

namespace adsd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

template <typename T>
struct Storage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is needed
  bool requires_grad = false;

  std::size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

// Dense N-dimensional array with value semantics over a shared buffer.
// Copies are cheap and alias the same storage; ops always allocate fresh
// outputs, so within a forward pass tensors behave as immutable values.
template <typename T>
class Tensor {
 public:
  using StoragePtr = std::shared_ptr<detail::Storage<T>>;

  Tensor() : s_(std::make_shared<detail::Storage<T>>()) {}

  explicit Tensor(Shape shape) : s_(std::make_shared<detail::Storage<T>>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    s_->shape = std::move(shape);
    s_->data.assign(shape_numel(s_->shape), T(0));
  }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.s_->data.begin(), t.s_->data.end(), value);
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<T> values) {
    Tensor t(std::move(shape));
    if (values.size() != t.numel())
      throw DimensionError("from_data: " + std::to_string(values.size()) + " values for shape " +
                           shape_str(t.shape()));
    t.s_->data = std::move(values);
    return t;
  }

  static Tensor seeded_normal(Shape shape, SplitMix64& rng, T stddev) {
    Tensor t(std::move(shape));
    for (auto& v : t.s_->data) v = static_cast<T>(rng.normal()) * stddev;
    return t;
  }

  static Tensor seeded_uniform(Shape shape, SplitMix64& rng, T lo, T hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.s_->data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  const Shape& shape() const { return s_->shape; }
  std::size_t ndim() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->data.size(); }

  T* data() { return s_->data.data(); }
  const T* data() const { return s_->data.data(); }
  std::vector<T>& vec() { return s_->data; }
  const std::vector<T>& vec() const { return s_->data; }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool rg) {
    s_->requires_grad = rg;
    if (rg) s_->ensure_grad();
  }

  void ensure_grad() { s_->ensure_grad(); }
  bool has_grad() const { return !s_->grad.empty(); }
  T* grad() { return s_->grad.data(); }
  const T* grad() const { return s_->grad.data(); }
  std::vector<T>& grad_vec() { return s_->grad; }
  void zero_grad() {
    if (has_grad()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
  }

  StoragePtr storage() const { return s_; }

  bool same_shape(const Tensor& o) const { return s_->shape == o.s_->shape; }

  bool all_finite() const {
    for (T v : s_->data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // Deep copy (data only, no grad linkage).
  Tensor clone() const {
    Tensor t;
    t.s_->shape = s_->shape;
    t.s_->data = s_->data;
    return t;
  }

 private:
  StoragePtr s_;
};

// Integer map for labels, masks and argmax results. No gradient machinery.
class IntTensor {
 public:
  IntTensor() = default;
  explicit IntTensor(Shape shape) : shape_(std::move(shape)) {
    data_.assign(shape_numel(shape_), 0);
  }
  static IntTensor from_data(Shape shape, std::vector<std::int32_t> values) {
    IntTensor t(std::move(shape));
    if (values.size() != t.numel())
      throw DimensionError("IntTensor::from_data size mismatch for " + shape_str(t.shape_));
    t.data_ = std::move(values);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  std::int32_t* data() { return data_.data(); }
  const std::int32_t* data() const { return data_.data(); }
  std::vector<std::int32_t>& vec() { return data_; }
  const std::vector<std::int32_t>& vec() const { return data_; }

 private:
  Shape shape_;
  std::vector<std::int32_t> data_;
};

// Reverse-mode tape. Ops executed while a tape is active append one node
// each; nodes are closures that propagate the output gradient to the input
// gradients. Execution order gives topological order for free, so the
// backward sweep is a single reverse pass.
template <typename T>
class Tape {
 public:
  Tape() {
    if (active_) throw UsageError("nested gradient tapes are not supported");
    active_ = this;
  }
  ~Tape() { active_ = nullptr; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(std::function<void()> node) { nodes_.push_back(std::move(node)); }

  std::size_t size() const { return nodes_.size(); }

  // Runs nodes newest-to-oldest exactly once, then discards them.
  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
  static thread_local Tape* active_;
};

template <typename T>
thread_local Tape<T>* Tape<T>::active_ = nullptr;

// Seeds d(loss)/d(loss) = 1 and runs the active tape backwards, populating
// grads of every reachable tensor. The tape is consumed.
template <typename T>
void backward(Tensor<T>& loss) {
  auto* tape = Tape<T>::active();
  if (!tape) throw UsageError("backward() requires an active tape");
  if (loss.numel() != 1)
    throw UsageError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) {
    // Constant loss (e.g. all pixels ignored): nothing reaches parameters.
    tape->clear();
    return;
  }
  loss.ensure_grad();
  loss.grad()[0] += T(1);
  tape->run_backward();
}

}  // namespace adsd
