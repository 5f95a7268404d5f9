#pragma once

#include <functional>
#include <memory>
#include <utility>

#include "atm/common.hpp"

namespace atm {

// Dense n-d array over scalar T (float for training, double for gradient
// checks). Layout is contiguous row-major; feature maps use channel-last
// (B,H,W,C) so per-token channel loops are stride-1. Values are immutable
// once an op has produced them; only the grad buffer accumulates. Copies
// are shallow: handles share the value and grad buffers.
template <class T>
class Array {
 public:
  Array() = default;

  explicit Array(Shape shape, T fill = T(0))
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(size_t(numel(shape_)), fill)) {}

  Array(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    ATM_CHECK(int64_t(values.size()) == numel(shape_), ShapeError,
              "value count ", values.size(), " does not match shape ",
              shape_str(shape_));
    data_ = std::make_shared<std::vector<T>>(std::move(values));
  }

  static Array scalar(T v) { return Array(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return int(shape_.size()); }
  int64_t dim(int i) const { return shape_[size_t(i)]; }
  int64_t size() const { return data_ ? int64_t(data_->size()) : 0; }
  bool defined() const { return bool(data_); }

  T* data() { return data_->data(); }
  const T* data() const { return data_->data(); }
  T& operator[](int64_t i) { return (*data_)[size_t(i)]; }
  const T& operator[](int64_t i) const { return (*data_)[size_t(i)]; }

  // Leaf marker: parameters and inputs that should receive d(loss)/d(self).
  void set_requires_grad(bool b) {
    requires_grad_ = b;
    if (b) ensure_grad();
  }
  bool requires_grad() const { return requires_grad_; }

  // True when this array participates in the current autodiff graph.
  bool tracked() const { return requires_grad_ || tracked_; }
  void mark_tracked() {
    tracked_ = true;
    ensure_grad();
  }

  void ensure_grad() {
    if (!grad_) grad_ = std::make_shared<std::vector<T>>(size_t(size()), T(0));
  }
  bool has_grad() const { return bool(grad_); }
  T* grad() { return grad_->data(); }
  const T* grad() const { return grad_->data(); }
  std::shared_ptr<std::vector<T>> grad_buffer() const { return grad_; }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), T(0));
  }

  void fill(T v) { std::fill(data_->begin(), data_->end(), v); }

  bool all_finite() const {
    for (const T& v : *data_)
      if (!std::isfinite(double(v))) return false;
    return true;
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  std::shared_ptr<std::vector<T>> grad_;
  bool requires_grad_ = false;
  bool tracked_ = false;
};

// Reverse-mode tape: ops append one closure per executed primitive; backward
// replays them in exact reverse execution order. A tape and everything
// recorded on it belong to one logical thread.
template <class T>
class Tape {
 public:
  void record(std::function<void()> node) { nodes_.push_back(std::move(node)); }

  void run_backward() {
    ATM_CHECK(!consumed_, StateError,
              "backward called twice on one tape without re-recording");
    consumed_ = true;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  size_t num_nodes() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

namespace detail {
template <class T>
inline Tape<T>*& active_tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}
}  // namespace detail

template <class T>
inline Tape<T>* active_tape() {
  return detail::active_tape_slot<T>();
}

// RAII recording scope; ops record onto the innermost active tape.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(detail::active_tape_slot<T>()) {
    detail::active_tape_slot<T>() = &tape;
  }
  ~TapeScope() { detail::active_tape_slot<T>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

// Seeds d(loss)/d(loss)=1 and replays the active tape.
template <class T>
void backward(Array<T>& loss) {
  auto* tape = active_tape<T>();
  ATM_CHECK(tape != nullptr, StateError, "backward: no active tape");
  ATM_CHECK(loss.size() == 1, ArgumentError,
            "backward: loss must be a single element, got shape ",
            shape_str(loss.shape()));
  ATM_CHECK(loss.tracked(), StateError,
            "backward: loss was not produced under the active tape");
  loss.grad()[0] += T(1);
  tape->run_backward();
}

#ifndef NDEBUG
#define ATM_DEBUG_FINITE(arr, opname)                                     \
  ATM_CHECK((arr).all_finite(), ::atm::NumericError,                      \
            opname, ": non-finite value produced")
#else
#define ATM_DEBUG_FINITE(arr, opname) ((void)0)
#endif

}  // namespace atm
