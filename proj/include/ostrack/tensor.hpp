#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ostrack {

/// Thrown when tensor shapes do not fit an operation.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a caller breaks an operation's calling contract.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Thrown when an object is used in a state that does not allow the call.
struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Thrown when internal bookkeeping is found corrupted.
struct InvariantError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Thrown when an op produces NaN or Inf.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until backward touches this node
  bool requires_grad = false;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor handle. Copies share storage.
template <class T = float>
class Tensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  Tensor() : node_(std::make_shared<Node>()) {}

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                           to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// Direct write access. Only for parameters being initialized, loaded or stepped.
  std::span<T> mutable_data() { return node_->data; }

  T operator[](std::size_t i) const { return node_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * node_->shape.back() + c]; }
  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, no gradient history, new storage.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  /// Same storage viewed under a new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

/// Ordered record of differentiable ops. Backward replays entries in exact reverse order.
template <class T = float>
class Tape {
 public:
  using NodePtr = std::shared_ptr<TensorNode<T>>;

  struct Entry {
    std::string_view op;
    std::vector<NodePtr> inputs;
    NodePtr output;
    std::function<void()> backward;
  };

  void record(std::string_view op, std::vector<NodePtr> inputs, NodePtr output, std::function<void()> backward) {
    entries_.push_back(Entry{op, std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  bool contains_output(const TensorNode<T>* node) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.output.get() == node; });
  }

 private:
  std::vector<Entry> entries_;
};

namespace detail {

template <class T>
inline thread_local Tape<T>* active_tape = nullptr;

}  // namespace detail

/// Installs a tape as the recording target for the current thread while in scope.
template <class T = float>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(detail::active_tape<T>) { detail::active_tape<T> = &tape; }
  ~TapeScope() { detail::active_tape<T> = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording for the current thread while in scope.
template <class T = float>
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape<T>) { detail::active_tape<T> = nullptr; }
  ~NoGradScope() { detail::active_tape<T> = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

template <class T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  auto* tape = active_tape<T>;
  if (tape == nullptr) return nullptr;
  for (const auto* t : inputs)
    if (t->requires_grad()) return tape;
  return nullptr;
}

template <class T>
Tape<T>* recording_tape(std::span<const Tensor<T>> inputs) {
  auto* tape = active_tape<T>;
  if (tape == nullptr) return nullptr;
  for (const auto& t : inputs)
    if (t.requires_grad()) return tape;
  return nullptr;
}

template <class T>
void check_finite(const std::vector<T>& values, std::string_view op) {
  for (const T v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite value produced by " + std::string(op));
  }
}

/// Wraps freshly computed op output, checking the finiteness invariant.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::string_view op, bool requires_grad) {
  check_finite(data, op);
  return Tensor<T>(std::move(shape), std::move(data), requires_grad);
}

template <class T>
void accumulate(TensorNode<T>& node, std::size_t i, T value) {
  node.ensure_grad()[i] += value;
}

}  // namespace detail

template <class T>
Tensor<T> Tensor<T>::reshaped(Shape new_shape) const {
  if (numel(new_shape) != size()) {
    throw DimensionError("cannot reshape " + to_string(shape()) + " to " + to_string(new_shape));
  }
  auto* tape = detail::recording_tape<T>({this});
  Tensor out(new_shape, node_->data, tape != nullptr);
  if (tape) {
    auto in = node_;
    auto o = out.node();
    tape->record("reshape", {in}, o, [in, o] {
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
    });
  }
  return out;
}

/// Reverse-mode sweep from a scalar loss. Grads accumulate into every reachable requires_grad tensor.
template <class T>
void backward_pass(Tape<T>& tape, const Tensor<T>& loss) {
  if (loss.size() != 1) throw ContractError("backward_pass needs a scalar loss, got " + to_string(loss.shape()));
  if (!tape.contains_output(loss.node().get())) throw ContractError("loss tensor was not recorded on this tape");
  auto& entries = tape.entries();
  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward();
  }
}

}  // namespace ostrack
