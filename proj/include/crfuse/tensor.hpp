#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "crfuse/errors.hpp"

namespace crfuse {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

inline long shape_numel(const Shape& s) {
  long n = 1;
  for (int d : s) {
    if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

template <typename T>
class TapeT;

// Dense row-major tensor. Copies are cheap and share the value buffer;
// forward operations always allocate fresh outputs, so sharing is only
// observable through explicit in-place mutation (parameter updates).
template <typename T>
class TensorT {
 public:
  TensorT() : TensorT(Shape{}) {}
  explicit TensorT(Shape shape)
      : shape_(std::move(shape)),
        values_(std::make_shared<std::vector<T>>(static_cast<size_t>(shape_numel(shape_)), T(0))) {}
  TensorT(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    if (shape_numel(shape_) != static_cast<long>(values.size()))
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape_));
    values_ = std::make_shared<std::vector<T>>(std::move(values));
  }

  static TensorT scalar(T v) { return TensorT(Shape{}, std::vector<T>{v}); }
  static TensorT full(Shape shape, T v) {
    TensorT t(std::move(shape));
    for (T& x : *t.values_) x = v;
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  long size() const { return static_cast<long>(values_->size()); }

  T* data() { return values_->data(); }
  const T* data() const { return values_->data(); }
  std::vector<T>& values() { return *values_; }
  const std::vector<T>& values() const { return *values_; }

  T item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape_));
    return (*values_)[0];
  }

  bool requires_grad() const { return requires_grad_; }
  int node() const { return node_; }
  uint64_t tape_id() const { return tape_id_; }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> values_;
  int node_ = -1;        // position on the owning tape, -1 when free
  uint64_t tape_id_ = 0; // identity of the owning tape; stale ids are ignored
  bool requires_grad_ = false;

  friend class TapeT<T>;
};

// Records one forward pass. Nodes are appended in execution order, which is
// already a topological order, so the backward sweep is a single reverse
// scan. A tape belongs to one logical execution context; independent runs
// use independent tapes.
template <typename T>
class TapeT {
 public:
  // (tape, upstream gradient of this node) -> accumulates into parents
  using BackwardFn = std::function<void(TapeT&, const std::vector<T>&)>;

  TapeT() : id_(next_id()) {}
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  // Registers a leaf whose gradient should be available after backward().
  int watch(TensorT<T>& t) {
    if (t.tape_id_ == id_ && t.node_ >= 0) return t.node_;
    t.node_ = add_node(t.size(), BackwardFn{});
    t.tape_id_ = id_;
    t.requires_grad_ = true;
    return t.node_;
  }

  // Registers an op result along with its backward rule. Inputs of the op
  // must already live on this tape (value capture in `fn` pins them).
  int record(TensorT<T>& out, BackwardFn fn) {
    out.node_ = add_node(out.size(), std::move(fn));
    out.tape_id_ = id_;
    return out.node_;
  }

  bool tracks(const TensorT<T>& t) const { return t.tape_id_ == id_ && t.node_ >= 0; }

  // Gradient buffer of a node, zero-initialized on first touch. Only valid
  // inside a backward sweep.
  std::vector<T>& grad_buffer(int node) {
    auto& g = grads_[static_cast<size_t>(node)];
    if (g.empty()) g.assign(static_cast<size_t>(nodes_[static_cast<size_t>(node)].size), T(0));
    return g;
  }

  // Gradient of a watched/recorded tensor after backward(); zeros when the
  // loss never reached it.
  std::vector<T> grad_of(const TensorT<T>& t) const {
    if (!tracks(t)) throw ContractError("grad_of: tensor is not on this tape");
    const auto* g = grad_ptr(t);
    if (g == nullptr) return std::vector<T>(static_cast<size_t>(t.size()), T(0));
    return *g;
  }

  // nullptr when untouched; avoids copies on the optimizer path.
  const std::vector<T>* grad_ptr(const TensorT<T>& t) const {
    if (!tracks(t)) throw ContractError("grad_ptr: tensor is not on this tape");
    const auto idx = static_cast<size_t>(t.node_);
    if (idx >= grads_.size() || grads_[idx].empty()) return nullptr;
    return &grads_[idx];
  }

  void backward(const TensorT<T>& loss) {
    if (!tracks(loss)) throw ContractError("backward: loss is not on this tape");
    if (loss.size() != 1)
      throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    grads_.assign(nodes_.size(), {});
    grads_[static_cast<size_t>(loss.node_)].assign(1, T(1));
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      auto& node = nodes_[static_cast<size_t>(i)];
      if (!node.fn || grads_[static_cast<size_t>(i)].empty()) continue;
      node.fn(*this, grads_[static_cast<size_t>(i)]);
    }
  }

  size_t node_count() const { return nodes_.size(); }
  uint64_t id() const { return id_; }

  // Running digest of every discrete forward decision (ReLU signs, pool
  // argmaxes). Two evaluations with equal digests lie in the same linear
  // region of the piecewise-smooth program, which is what a central
  // difference needs to be meaningful.
  void mix_pattern(uint64_t word) {
    pattern_hash_ = (pattern_hash_ ^ word) * 0x100000001b3ull;
  }
  uint64_t pattern_hash() const { return pattern_hash_; }

 private:
  struct Node {
    long size;
    BackwardFn fn;  // empty for leaves
  };

  int add_node(long size, BackwardFn fn) {
    nodes_.push_back(Node{size, std::move(fn)});
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    return static_cast<int>(nodes_.size()) - 1;
  }

  static uint64_t next_id() {
    static std::atomic<uint64_t> counter{0};
    return ++counter;
  }

  uint64_t id_;
  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  uint64_t pattern_hash_ = 0xcbf29ce484222325ull;
};

}  // namespace crfuse
