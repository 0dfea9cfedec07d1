#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pvec/errors.hpp"

namespace pvec {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t id = 0;
};

inline std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

} // namespace detail

/// Dense row-major float64 array. Copies of a Tensor share storage; use
/// clone() for an independent buffer.
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<detail::TensorImpl>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
    }
    impl_->data.assign(numel_of(shape), fill);
    impl_->shape = std::move(shape);
    impl_->id = detail::next_tensor_id();
  }

  Tensor(Shape shape, std::vector<double> values) : Tensor(std::move(shape)) {
    if (values.size() != impl_->data.size()) {
      throw DimensionError("tensor of shape " + to_string(impl_->shape) + " needs " +
                           std::to_string(impl_->data.size()) + " values, got " +
                           std::to_string(values.size()));
    }
    impl_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return Tensor(Shape{1}, v); }

  bool defined() const noexcept { return static_cast<bool>(impl_); }
  std::uint64_t id() const noexcept { return impl_ ? impl_->id : 0; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  // Views into storage; deleted on rvalues so a temporary cannot dangle.
  std::span<double> data() & { return impl_->data; }
  std::span<const double> data() const& { return impl_->data; }
  std::span<const double> data() && = delete;
  std::vector<double>& values() & { return impl_->data; }
  const std::vector<double>& values() const& { return impl_->data; }
  std::vector<double> values() && { return impl_->data; }

  double item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  double& operator[](std::size_t i) { return impl_->data[i]; }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const noexcept { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const noexcept { return impl_ && !impl_->grad.empty(); }
  /// Gradient buffer, allocated (zero-filled) on first access. Gradient
  /// storage belongs to the shared handle, so const handles may accumulate.
  std::span<double> grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
  }
  void zero_grad() {
    if (impl_) impl_->grad.clear();
  }
  Tensor grad_tensor() const {
    Tensor g(shape());
    if (has_grad()) g.values() = impl_->grad;
    return g;
  }

  Tensor clone() const {
    Tensor t(shape());
    t.values() = impl_->data;
    return t;
  }
  Tensor detach() const { return clone(); }

  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of differentiable operations. Every op whose inputs require
/// gradients appends one record while a tape is active on the current thread;
/// backward() replays the records in reverse.
class Tape {
public:
  struct Record {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() noexcept { return slot(); }

  void push(std::string op, std::vector<Tensor> inputs, Tensor output, std::function<void()> fn) {
    records_.push_back({std::move(op), std::move(inputs), std::move(output), std::move(fn)});
  }

  const std::vector<Record>& records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }
  std::size_t last_backward_visits() const noexcept { return visits_; }
  void clear() { records_.clear(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every requires-grad tensor.
  /// Gradients accumulate. The tape is cleared afterwards.
  void backward(Tensor loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw UsageError("backward: loss must be a scalar tensor, got shape " +
                       (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    }
    std::size_t end = records_.size();
    while (end > 0 && records_[end - 1].output.id() != loss.id()) --end;
    if (end == 0) throw UsageError("backward: loss was not produced under the active tape");
    loss.grad()[0] += 1.0;
    visits_ = 0;
    for (std::size_t i = end; i-- > 0;) {
      Record& r = records_[i];
      ++visits_;
      if (r.output.has_grad()) r.backward();
    }
    records_.clear();
  }

  /// True when `out` was computed (transitively) from `in` on this tape.
  bool depends_on(const Tensor& out, const Tensor& in) const {
    if (out.id() == in.id()) return true;
    std::unordered_map<std::uint64_t, std::size_t> producer;
    for (std::size_t i = 0; i < records_.size(); ++i) producer[records_[i].output.id()] = i;
    std::vector<std::uint64_t> stack{out.id()};
    std::unordered_map<std::uint64_t, bool> seen;
    while (!stack.empty()) {
      std::uint64_t id = stack.back();
      stack.pop_back();
      if (id == in.id()) return true;
      if (seen[id]) continue;
      seen[id] = true;
      auto it = producer.find(id);
      if (it == producer.end()) continue;
      for (const Tensor& t : records_[it->second].inputs) stack.push_back(t.id());
    }
    return false;
  }

private:
  friend class TapeScope;
  static Tape*& slot() noexcept {
    thread_local Tape* current = nullptr;
    return current;
  }

  std::vector<Record> records_;
  std::size_t visits_ = 0;
};

/// Makes `tape` the active tape for the current thread for the scope's lifetime.
class TapeScope {
public:
  explicit TapeScope(Tape& tape) : previous_(Tape::slot()) { Tape::slot() = &tape; }
  ~TapeScope() { Tape::slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

private:
  Tape* previous_;
};

/// Fingerprint of the piecewise branches (ReLU sides, clamp floors, argmax
/// picks) taken during a forward. Two forwards with equal fingerprints lie on
/// the same smooth piece of the function.
struct BranchTrace {
  std::uint64_t hash = 14695981039346656037ull;
  void mix(std::uint64_t v) {
    hash ^= v + 0x9e3779b97f4a7c15ull;
    hash *= 1099511628211ull;
  }

  static BranchTrace*& slot() noexcept {
    thread_local BranchTrace* current = nullptr;
    return current;
  }
  static BranchTrace* active() noexcept { return slot(); }
};

class BranchScope {
public:
  explicit BranchScope(BranchTrace& t) : previous_(BranchTrace::slot()) { BranchTrace::slot() = &t; }
  ~BranchScope() { BranchTrace::slot() = previous_; }
  BranchScope(const BranchScope&) = delete;
  BranchScope& operator=(const BranchScope&) = delete;

private:
  BranchTrace* previous_;
};

/// backward() on the thread's active tape.
inline void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (!tape) throw UsageError("backward: no active tape");
  tape->backward(loss);
}

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Registers `fn` as the backward of `out` when recording is on.
inline void record(const char* op, std::vector<Tensor> inputs, Tensor& out,
                   std::function<void()> fn) {
  Tape* tape = Tape::active();
  if (!tape) return;
  bool need = false;
  for (const Tensor& t : inputs) need = need || (t.defined() && t.requires_grad());
  if (!need) return;
  out.set_requires_grad(true);
  tape->push(op, std::move(inputs), out, std::move(fn));
}

} // namespace detail

} // namespace pvec
