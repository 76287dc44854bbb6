#pragma once

// Tape-based reverse-mode differentiation over Tensor values.
//
// A Graph records nodes in creation order, which is a topological order, and
// backward() walks it in reverse. Ops whose inputs are all constants produce
// constants and record no backward closure.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "trajmae/tensor.hpp"

namespace trajmae {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the Graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  /// Called with the node's output gradient; accumulates into input gradients.
  using BackwardFn = std::function<void(Graph&, std::span<const double>)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor t);
  Var variable(Tensor t);

  /// Records an op output. Inputs decide whether the node requires grad.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient buffer of a node, or nullptr when the node needs no gradient.
  /// Lazily zero-allocated.
  double* grad_buffer(std::size_t id);

  /// d(loss)/d(node). All zeros for nodes not on a path to the loss.
  std::vector<double> grad(Var v) const;

  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

/// Group layout for attention: within group g every query row attends to every
/// key row of the group. Rows not listed as queries produce zero output; keys
/// outside a group receive an additive -inf bias for that group's queries.
struct AttentionLayout {
  std::vector<std::size_t> q_offsets{0};
  std::vector<std::size_t> q_rows;
  std::vector<std::size_t> k_offsets{0};
  std::vector<std::size_t> k_rows;

  void add_group(std::span<const std::size_t> queries, std::span<const std::size_t> keys);
  std::size_t groups() const noexcept { return q_offsets.size() - 1; }
};

/// CSR list of row sets, one output row per segment.
struct Segments {
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> rows;

  void add(std::span<const std::size_t> r);
  std::size_t count() const noexcept { return offsets.size() - 1; }
};

namespace ad {

/// While alive, fingerprints which piece of every piecewise op (relu, huber,
/// and choices reported through note()) is evaluated on this thread.
class RegionTrace {
 public:
  RegionTrace() noexcept;
  ~RegionTrace();
  RegionTrace(const RegionTrace&) = delete;
  RegionTrace& operator=(const RegionTrace&) = delete;

  std::uint64_t digest() const noexcept { return hash_; }
  static bool active() noexcept;
  static void note(std::uint64_t piece) noexcept;

 private:
  RegionTrace* prev_;
  std::uint64_t hash_ = 0x243f6a8885a308d3ULL;
};

// Elementwise. `b` may also be broadcast when its shape equals a trailing
// suffix of `a`'s shape (bias-style).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var relu(Var a);
/// Elementwise Huber: r^2/2 for |r| <= delta, delta(|r| - delta/2) otherwise.
Var huber(Var a, double delta);

/// a[..., k] x b[k, m] -> [..., m].
Var matmul(Var a, Var b);
/// x[..., in] W[in, out] + bias[out].
Var linear(Var x, Var w, Var bias);
Var transpose(Var a);
Var reshape(Var a, Shape shape);
Var concat(std::span<const Var> parts, std::size_t axis);

/// Selects rows along the first axis.
Var gather_rows(Var a, std::span<const std::size_t> idx);
/// Places row i of `a` at row idx[i] of a zero tensor with `rows` rows.
/// idx must not repeat.
Var scatter_rows(Var a, std::span<const std::size_t> idx, std::size_t rows);
/// Flat element selection.
Var pick(Var a, std::span<const std::size_t> flat_idx);

Var softmax(Var a, std::size_t axis);
Var log_softmax(Var a);
/// Normalizes over the last axis, then applies gamma/beta.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

/// Multi-head scaled dot-product attention on row matrices q[nq,d], k[nk,d],
/// v[nk,d]. Reductions over keys run in a canonical key order (sorted by key
/// and value content), so results do not depend on key row order.
Var attention(Var q, Var k, Var v, const AttentionLayout& layout, std::size_t heads);

/// Mean of each segment's rows -> [segments, d]. Column sums are accumulated
/// in sorted order, so the result does not depend on row order.
Var segment_mean(Var a, const Segments& seg);

Var sum(Var a);
Var mean(Var a);
/// Mean over elements whose selector entry is true. Unselected entries are
/// never read. Throws on an empty selection.
Var masked_mean(Var a, const std::vector<bool>& selector);

}  // namespace ad
}  // namespace trajmae
