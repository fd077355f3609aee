#pragma once

// Dense tensors plus a reverse-mode autodiff tape.
//
// Semantics:
//  * A Tape is a scope object; while alive it is the active tape for the
//    current thread and every op whose inputs require (or carry) gradients
//    appends one node to it, in execution order.
//  * Tape::backward(loss) first clears the gradients of all node outputs,
//    seeds d(loss)/d(loss) = 1, then invokes each node's backward closure
//    exactly once in reverse append order.  Gradients of leaves (tensors the
//    tape did not produce, e.g. parameters) are accumulated, never cleared:
//    calling backward twice on the same loss exactly doubles them.  Zeroing
//    between optimizer steps is the caller's job.
//  * GradPause suspends recording (teacher forward passes, scoring).

#include <atomic>
#include <cstdint>
#include <functional>
#include <iostream>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "oodlm/common.hpp"

namespace oodlm {

template <typename S>
struct TensorStorage {
  std::vector<std::size_t> shape;
  std::vector<S> values;
  std::vector<S> grad;  // empty until a gradient is first written
  bool requires_grad = false;
  // Producing tape (0 = none) and node index within it.
  std::uint64_t tape_epoch = 0;
  std::int64_t node_id = -1;
};

template <typename S>
class Tensor {
public:
  using Storage = TensorStorage<S>;

  Tensor() : s_(std::make_shared<Storage>()) {}
  explicit Tensor(std::shared_ptr<Storage> s) : s_(std::move(s)) {}

  static Tensor zeros(std::vector<std::size_t> shape) {
    return full(std::move(shape), S(0));
  }

  static Tensor full(std::vector<std::size_t> shape, S v) {
    auto s = std::make_shared<Storage>();
    s->shape = std::move(shape);
    s->values.assign(count(s->shape), v);
    return Tensor(std::move(s));
  }

  static Tensor from(std::vector<std::size_t> shape, std::vector<S> values) {
    auto s = std::make_shared<Storage>();
    s->shape = std::move(shape);
    if (count(s->shape) != values.size())
      throw ShapeError("Tensor::from: shape does not match value count");
    s->values = std::move(values);
    return Tensor(std::move(s));
  }

  static Tensor scalar(S v) { return from({1}, {v}); }

  const std::vector<std::size_t>& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t numel() const { return s_->values.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  // Row/column accessors for the (ubiquitous) rank-2 case.
  std::size_t rows() const { return s_->shape.at(0); }
  std::size_t cols() const { return s_->shape.at(s_->shape.size() - 1); }

  std::vector<S>& values() { return s_->values; }
  const std::vector<S>& values() const { return s_->values; }

  S item() const {
    if (numel() != 1) throw UsageError("Tensor::item: tensor is not a scalar");
    return s_->values[0];
  }
  S operator()(std::size_t i) const { return s_->values.at(i); }
  S operator()(std::size_t i, std::size_t j) const {
    return s_->values.at(i * cols() + j);
  }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    s_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return !s_->grad.empty(); }
  std::vector<S>& grad() { return s_->grad; }
  const std::vector<S>& grad() const { return s_->grad; }

  // Gradient buffer, allocated (zero-filled) on first use.  Declared const
  // because a Tensor is a handle onto shared storage: backward closures hold
  // const copies of the handle yet must accumulate into the shared gradient.
  std::vector<S>& grad_buffer() const {
    if (s_->grad.size() != s_->values.size())
      s_->grad.assign(s_->values.size(), S(0));
    return s_->grad;
  }

  void zero_grad() {
    if (!s_->grad.empty()) s_->grad.assign(s_->values.size(), S(0));
  }

  // Value copy detached from any tape.
  Tensor detached_copy() const {
    auto s = std::make_shared<Storage>();
    s->shape = s_->shape;
    s->values = s_->values;
    return Tensor(std::move(s));
  }

  const std::shared_ptr<Storage>& storage() const { return s_; }

private:
  static std::size_t count(const std::vector<std::size_t>& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive");
      n *= d;
    }
    return n;
  }

  std::shared_ptr<Storage> s_;
};

template <typename S>
Tensor<S> randn(std::vector<std::size_t> shape, Rng& rng, double stddev,
                bool requires_grad = false) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  for (auto& v : t.values()) v = static_cast<S>(rng.gauss() * stddev);
  t.set_requires_grad(requires_grad);
  return t;
}

template <typename S>
class Tape {
public:
  struct Node {
    const char* op;
    std::vector<std::int64_t> inputs;  // producing node ids, -1 for leaves
    std::shared_ptr<TensorStorage<S>> out;
    std::function<void()> backward;
  };

  Tape() : epoch_(next_epoch()) { stack().push_back(this); }
  ~Tape() { stack().pop_back(); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Active tape of the current thread; nullptr when none is open or when the
  // innermost scope is a GradPause.
  static Tape* active() {
    auto& s = stack();
    return s.empty() ? nullptr : s.back();
  }

  static void push_pause() { stack().push_back(nullptr); }
  static void pop_pause() { stack().pop_back(); }

  std::uint64_t epoch() const { return epoch_; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }

  // True when `t` should propagate gradients through newly recorded ops.
  bool tracks(const Tensor<S>& t) const {
    const auto& st = *t.storage();
    return st.requires_grad || (st.tape_epoch == epoch_ && st.node_id >= 0);
  }

  std::int64_t record(const char* op, std::vector<std::int64_t> input_nodes,
                      const Tensor<S>& out, std::function<void()> back) {
    nodes_.push_back(Node{op, std::move(input_nodes), out.storage(),
                          std::move(back)});
    const auto id = static_cast<std::int64_t>(nodes_.size() - 1);
    out.storage()->tape_epoch = epoch_;
    out.storage()->node_id = id;
    return id;
  }

  // Node id of `t` on this tape, or -1.
  std::int64_t node_of(const Tensor<S>& t) const {
    const auto& st = *t.storage();
    return st.tape_epoch == epoch_ ? st.node_id : -1;
  }

  void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1)
      throw UsageError("Tape::backward: loss must be a scalar tensor");
    const auto& st = *loss.storage();
    if (st.tape_epoch != epoch_ || st.node_id < 0) {
      std::cerr << "oodlm: backward on a value this tape did not record; "
                   "gradients left unchanged\n";
      return;
    }
    const auto last = static_cast<std::size_t>(st.node_id);
    // Clear node-output gradients so only leaf gradients accumulate across
    // repeated backward calls.
    for (std::size_t i = 0; i <= last; ++i) {
      auto& out = *nodes_[i].out;
      out.grad.assign(out.values.size(), S(0));
    }
    loss.storage()->grad[0] = S(1);
    for (std::size_t i = last + 1; i-- > 0;) nodes_[i].backward();
  }

private:
  static std::vector<Tape*>& stack() {
    thread_local std::vector<Tape*> s;
    return s;
  }
  // Process-wide so tapes on different threads never share an epoch id.
  static std::uint64_t next_epoch() {
    static std::atomic<std::uint64_t> c{0};
    return ++c;
  }

  std::uint64_t epoch_;
  std::vector<Node> nodes_;
};

// Scope that disables recording on the current thread (frozen teacher,
// scoring).  Ops executed inside behave as plain numeric kernels.
template <typename S>
class GradPause {
public:
  GradPause() { Tape<S>::push_pause(); }
  ~GradPause() { Tape<S>::pop_pause(); }
  GradPause(const GradPause&) = delete;
  GradPause& operator=(const GradPause&) = delete;
};

}  // namespace oodlm
