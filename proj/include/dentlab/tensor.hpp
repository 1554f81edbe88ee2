#pragma once

// Reverse-mode automatic differentiation core.
//
// A Tensor is a shared handle to an n-dimensional float array with an optional
// gradient slot. Ops record nodes on the thread's current Tape; backward()
// walks the tape in reverse creation order (creation order is topological by
// construction) and accumulates gradients additively into every reachable
// tensor that requires grad. Gradient buffers used during a backward pass are
// pass-local, so repeated backward() calls accumulate (calling twice doubles
// every grad). Tapes are confined to one thread; clearing a tape frees its
// nodes and invalidates node handles held by tensors.

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "dentlab/common.hpp"

namespace dentlab {

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct Storage {
  std::vector<int64_t> shape;
  std::shared_ptr<std::vector<T>> data;
  std::unique_ptr<std::vector<T>> grad;  // lazily allocated, same length as data
  bool requires_grad = false;
  // Tape linkage: valid only while (tape, epoch) match the live tape.
  int64_t node = -1;
  const void* tape = nullptr;
  uint64_t epoch = 0;
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape, T fill = T(0)) {
    int64_t n = 1;
    for (int64_t d : shape) {
      if (d <= 0) throw ShapeError("tensor: nonpositive extent in shape " + shape_str(shape));
      n *= d;
    }
    st_ = std::make_shared<detail::Storage<T>>();
    st_->shape = std::move(shape);
    st_->data = std::make_shared<std::vector<T>>(size_t(n), fill);
  }

  Tensor(std::vector<int64_t> shape, std::vector<T> values) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    if (n != int64_t(values.size()))
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    st_ = std::make_shared<detail::Storage<T>>();
    st_->shape = std::move(shape);
    st_->data = std::make_shared<std::vector<T>>(std::move(values));
  }

  static Tensor<T> scalar(T v) { return Tensor<T>({1}, std::vector<T>{v}); }

  // Trainable leaf.
  static Tensor<T> param(std::vector<int64_t> shape, T fill = T(0)) {
    Tensor<T> t(std::move(shape), fill);
    t.set_requires_grad(true);
    return t;
  }

  bool defined() const { return st_ != nullptr; }

  const std::vector<int64_t>& shape() const { return st_->shape; }
  int ndim() const { return int(st_->shape.size()); }
  int64_t dim(size_t i) const { return st_->shape[i]; }
  int64_t numel() const { return int64_t(st_->data->size()); }

  T* data() { return st_->data->data(); }
  const T* data() const { return st_->data->data(); }
  std::vector<T>& vec() { return *st_->data; }
  const std::vector<T>& vec() const { return *st_->data; }

  T item() const {
    if (numel() != 1) throw ValueError("item(): tensor has " + std::to_string(numel()) + " elements");
    return (*st_->data)[0];
  }

  bool requires_grad() const { return st_ && st_->requires_grad; }
  void set_requires_grad(bool b) { st_->requires_grad = b; }

  bool has_grad() const { return st_ && st_->grad != nullptr; }
  T* grad() { return st_->grad ? st_->grad->data() : nullptr; }
  const T* grad() const { return st_->grad ? st_->grad->data() : nullptr; }
  const std::vector<T>& grad_vec() const {
    if (!st_->grad) throw ValueError("grad_vec(): no gradient present");
    return *st_->grad;
  }

  void zero_grad() {
    if (st_->grad) std::fill(st_->grad->begin(), st_->grad->end(), T(0));
  }
  void drop_grad() { st_->grad.reset(); }

  void accumulate_grad(const std::vector<T>& g) {
    if (!st_->requires_grad) return;  // requires_grad=false never accumulates
    if (!st_->grad) st_->grad = std::make_unique<std::vector<T>>(st_->data->size(), T(0));
    if (g.size() != st_->grad->size())
      throw ShapeError("accumulate_grad: size mismatch");
    T* dst = st_->grad->data();
    const T* src = g.data();
    for (size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
  }

  // Steals the buffer when no grad is present yet (the common case for
  // activations during a backward sweep).
  void accumulate_grad_move(std::vector<T>&& g) {
    if (!st_->requires_grad) return;
    if (!st_->grad) {
      if (g.size() != st_->data->size()) throw ShapeError("accumulate_grad: size mismatch");
      st_->grad = std::make_unique<std::vector<T>>(std::move(g));
    } else {
      accumulate_grad(g);
    }
  }

  // Deep copy of the values; detached from any tape, no grad.
  Tensor<T> clone() const {
    Tensor<T> t;
    t.st_ = std::make_shared<detail::Storage<T>>();
    t.st_->shape = st_->shape;
    t.st_->data = std::make_shared<std::vector<T>>(*st_->data);
    return t;
  }

  // Same underlying values, fresh storage without grad/tape linkage.
  Tensor<T> detached() const {
    Tensor<T> t;
    t.st_ = std::make_shared<detail::Storage<T>>();
    t.st_->shape = st_->shape;
    t.st_->data = st_->data;
    return t;
  }

  // Shares the data vector (used by reshape; ops never mutate input data).
  Tensor<T> with_shape(std::vector<int64_t> shape) const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    if (n != numel())
      throw ShapeError("reshape: cannot view " + shape_str(st_->shape) + " as " + shape_str(shape));
    Tensor<T> t;
    t.st_ = std::make_shared<detail::Storage<T>>();
    t.st_->shape = std::move(shape);
    t.st_->data = st_->data;
    return t;
  }

  detail::Storage<T>* storage() const { return st_.get(); }

 private:
  std::shared_ptr<detail::Storage<T>> st_;
};

template <typename T>
inline thread_local Tape<T>* tl_current_tape = nullptr;

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape<T>&, const std::vector<int64_t>&, int64_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape<T>* current() { return tl_current_tape<T>; }

  int64_t size() const { return int64_t(nodes_.size()); }

  // Frees all nodes and invalidates outstanding node handles.
  void clear() {
    nodes_.clear();
    bufs_.clear();
    epoch_ = next_epoch();
  }

  // Registers t as a leaf (or returns its existing node on this tape).
  int64_t ensure_node(const Tensor<T>& t) {
    auto* st = t.storage();
    if (st->tape == this && st->epoch == epoch_ && st->node >= 0) return st->node;
    int64_t id = int64_t(nodes_.size());
    nodes_.push_back(Node{t, {}, nullptr});
    st->tape = this;
    st->epoch = epoch_;
    st->node = id;
    return id;
  }

  // Records an op output whose parents are already on the tape. in_nodes may
  // contain -1 for untracked inputs; fn receives (tape, in_nodes, self_id).
  void record(Tensor<T>& out, std::vector<int64_t> in_nodes, BackwardFn fn) {
    int64_t id = int64_t(nodes_.size());
    for (int64_t p : in_nodes)
      if (p >= id) throw ValueError("tape: parent recorded after child");
    out.set_requires_grad(true);
    auto* st = out.storage();
    nodes_.push_back(Node{out, std::move(in_nodes), std::move(fn)});
    st->tape = this;
    st->epoch = epoch_;
    st->node = id;
  }

  // Pass-local gradient buffers (valid during backward only).
  std::vector<T>& grad_buf(int64_t id) {
    auto& b = bufs_[size_t(id)];
    if (b.empty()) b.assign(size_t(nodes_[size_t(id)].out.numel()), T(0));
    return b;
  }
  const std::vector<T>& grad_out(int64_t id) const { return bufs_[size_t(id)]; }

  void backward(const Tensor<T>& root) {
    if (nodes_.empty()) throw ValueError("backward: tape is empty");
    if (root.numel() != 1) throw ValueError("backward: root must be a scalar, got shape " + shape_str(root.shape()));
    auto* st = root.storage();
    if (st->tape != this || st->epoch != epoch_ || st->node < 0)
      throw ValueError("backward: root is not recorded on this tape");

    int64_t root_id = st->node;
    bufs_.assign(nodes_.size(), {});
    std::vector<char> reach(nodes_.size(), 0);
    std::vector<int64_t> stack{root_id};
    reach[size_t(root_id)] = 1;
    while (!stack.empty()) {
      int64_t id = stack.back();
      stack.pop_back();
      for (int64_t p : nodes_[size_t(id)].in_nodes) {
        if (p >= 0 && !reach[size_t(p)]) {
          reach[size_t(p)] = 1;
          stack.push_back(p);
        }
      }
    }

    grad_buf(root_id)[0] = T(1);
    for (int64_t i = root_id; i >= 0; --i) {
      if (!reach[size_t(i)] || bufs_[size_t(i)].empty()) continue;
      Node& n = nodes_[size_t(i)];
      if (n.fn) n.fn(*this, n.in_nodes, i);
      n.out.accumulate_grad_move(std::move(bufs_[size_t(i)]));
      bufs_[size_t(i)].clear();
      bufs_[size_t(i)].shrink_to_fit();
    }
    bufs_.clear();
  }

 private:
  struct Node {
    Tensor<T> out;
    std::vector<int64_t> in_nodes;
    BackwardFn fn;
  };

  // Epochs are globally unique so a tensor's stale node handle can never be
  // mistaken for a registration on a newer tape reusing the same address.
  static uint64_t next_epoch() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> bufs_;
  uint64_t epoch_ = next_epoch();
};

// RAII scope making a tape the thread's recording target.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& t) : prev_(tl_current_tape<T>) { tl_current_tape<T> = &t; }
  ~TapeScope() { tl_current_tape<T> = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

// Suspends recording (evaluation passes inside an adaptation loop).
template <typename T>
class NoTapeScope {
 public:
  NoTapeScope() : prev_(tl_current_tape<T>) { tl_current_tape<T> = nullptr; }
  ~NoTapeScope() { tl_current_tape<T> = prev_; }
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

}  // namespace dentlab
