#pragma once

// Dense row-major tensor with tape-free reverse-mode autodiff.
//
// A BasicTensor is a shared handle to a node. Ops that see at least one
// input with requires_grad record their parents and a backward closure on
// the output node; backward() walks the resulting DAG in reverse
// topological order and accumulates into every reachable grad buffer.
// Intermediate nodes are released after the pass, leaves keep their grads.
//
// Accumulation order inside every kernel is fixed (plain loops, no
// reassociation), so results are bit-stable for a given build.

#include <algorithm>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <istream>
#include <memory>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "nightrain/error.hpp"

namespace nightrain {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

namespace detail {
inline thread_local bool grad_mode_enabled = true;
}

inline bool grad_enabled() noexcept { return detail::grad_mode_enabled; }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() noexcept : previous_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
  ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <std::floating_point T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <std::floating_point T>
class BasicTensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (shape.empty()) shape = {1};
    for (std::size_t d : shape)
      if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
    node_->data.assign(nightrain::numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  BasicTensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (shape.empty()) shape = {1};
    if (nightrain::numel(shape) != values.size())
      throw DimensionError("data length " + std::to_string(values.size()) + " does not match shape " +
                           shape_str(shape));
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor scalar(T v, bool requires_grad = false) { return BasicTensor(Shape{1}, v, requires_grad); }

  [[nodiscard]] bool defined() const noexcept { return static_cast<bool>(node_); }
  [[nodiscard]] const Shape& shape() const { return node_->shape; }
  [[nodiscard]] std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  [[nodiscard]] std::size_t rank() const { return node_->shape.size(); }
  [[nodiscard]] std::size_t numel() const { return node_->data.size(); }

  [[nodiscard]] std::span<T> data() { return node_->data; }
  [[nodiscard]] std::span<const T> data() const { return node_->data; }
  [[nodiscard]] std::vector<T>& values() { return node_->data; }
  [[nodiscard]] const std::vector<T>& values() const { return node_->data; }

  [[nodiscard]] T item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  [[nodiscard]] bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; zeros if nothing has been accumulated yet.
  [[nodiscard]] std::span<const T> grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy of the values; the copy is a leaf with the same requires_grad.
  [[nodiscard]] BasicTensor clone() const {
    return BasicTensor(node_->shape, node_->data, node_->requires_grad);
  }

  /// Leaf copy that shares no graph history and does not require grad.
  [[nodiscard]] BasicTensor detach() const { return BasicTensor(node_->shape, node_->data, false); }

  template <std::floating_point U>
  [[nodiscard]] BasicTensor<U> cast() const {
    std::vector<U> v(node_->data.begin(), node_->data.end());
    return BasicTensor<U>(node_->shape, std::move(v), node_->requires_grad);
  }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(node_->data.begin(), node_->data.end(), [](T v) { return std::isfinite(v); });
  }

  [[nodiscard]] Node* node() const noexcept { return node_.get(); }
  [[nodiscard]] const std::shared_ptr<Node>& node_ptr() const noexcept { return node_; }

  /// Builds an op output. Graph edges are recorded only when grad mode is on
  /// and some parent requires grad.
  static BasicTensor make_result(Shape shape, std::vector<T> values,
                                 std::initializer_list<const BasicTensor*> parents,
                                 std::function<void(Node&)> backward_fn) {
    BasicTensor out(std::move(shape), std::move(values));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const BasicTensor* p : parents) any = any || p->requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    for (const BasicTensor* p : parents) out.node_->parents.push_back(p->node_);
    out.node_->backward_fn = std::move(backward_fn);
    return out;
  }

  static BasicTensor make_result(Shape shape, std::vector<T> values, const std::vector<BasicTensor>& parents,
                                 std::function<void(Node&)> backward_fn) {
    BasicTensor out(std::move(shape), std::move(values));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    for (const auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward_fn = std::move(backward_fn);
    return out;
  }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;

/// Runs reverse-mode differentiation from a scalar loss. Gradients are added
/// to the grad buffers of every reachable leaf with requires_grad; the graph
/// is consumed.
template <std::floating_point T>
void backward(const BasicTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw UsageError("backward() needs a scalar loss, got shape " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  if (!loss.requires_grad()) return;

  using Node = TensorNode<T>;
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.contains(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      n->grad_buffer();
      n->backward_fn(*n);
    }
  }
  for (Node* n : order) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->parents.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

template <std::floating_point T>
void require_finite(const BasicTensor<T>& t, const std::string& what) {
  if (!t.all_finite()) throw NumericalError("non-finite values in " + what);
}

// Debug dump: "shape d0 d1 ...\n" then little-endian float32 payload.
inline void write_dump(std::ostream& os, const Shape& shape, std::span<const float> values) {
  os << "shape";
  for (std::size_t d : shape) os << ' ' << d;
  os << '\n';
  for (float v : values) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    const char bytes[4] = {static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
                           static_cast<char>((bits >> 16) & 0xFF), static_cast<char>((bits >> 24) & 0xFF)};
    os.write(bytes, 4);
  }
}

inline void write_dump(std::ostream& os, const Tensor& t) { write_dump(os, t.shape(), t.data()); }

inline Tensor read_dump(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DataError("tensor dump: missing header");
  std::istringstream header(line);
  std::string tag;
  header >> tag;
  if (tag != "shape") throw DataError("tensor dump: malformed header '" + line + "'");
  Shape shape;
  std::size_t d = 0;
  while (header >> d) shape.push_back(d);
  if (shape.empty()) throw DataError("tensor dump: empty shape");
  std::vector<float> values(numel(shape));
  for (float& v : values) {
    unsigned char bytes[4];
    if (!is.read(reinterpret_cast<char*>(bytes), 4)) throw DataError("tensor dump: truncated payload");
    const std::uint32_t bits = std::uint32_t{bytes[0]} | (std::uint32_t{bytes[1]} << 8) |
                               (std::uint32_t{bytes[2]} << 16) | (std::uint32_t{bytes[3]} << 24);
    v = std::bit_cast<float>(bits);
  }
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace nightrain
