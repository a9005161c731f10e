#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "xecg/tensor.hpp"

namespace xecg {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode recording of one forward pass. Nodes are appended in
/// creation order, which is a topological order of the graph. A tape is
/// meant to be built, differentiated once and dropped.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Record an op output. `fn` runs during backward only when the output needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);

  /// d(output)/d(leaf) for every requires_grad leaf; output must be a scalar.
  void backward(Var output);
  /// Seeded backward over several outputs (vector-Jacobian product).
  void backward(std::span<const Var> outputs, std::span<const Tensor> seeds);

  /// Gradient accumulated at `v` (zeros of v's shape when nothing flowed).
  Tensor grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }

  // Used by op implementations.
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Buffer& grad_buffer(std::size_t id) const { return nodes_[id].grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Mutable gradient slot for `id`, zero-initialised on first touch.
  double* grad_slot(std::size_t id);

 private:
  struct Node {
    Tensor value;
    Buffer grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  void run_backward();

  std::deque<Node> nodes_;
};

/// Differentiable operations on tape values. Binary elementwise ops accept
/// equal shapes, a single-element operand, or an operand whose shape is a
/// trailing suffix of the other (e.g. [B x E] with [E]); nothing else broadcasts.
namespace ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var neg(Var a);
/// Row scaling: `x` viewed as [n, rest] where n = numel(s); row r is multiplied by s[r].
Var scale_rows(Var x, Var s);
Var square(Var a);

/// [.., k] x [k, n] -> [.., n]
Var matmul(Var a, Var b);
/// [b, m, k] x [b, k, n] -> [b, m, n]
Var bmm(Var a, Var b);
/// Swaps the last two axes.
Var transpose(Var a);
Var permute(Var a, const std::vector<std::size_t>& perm);
Var reshape(Var a, Shape shape);
/// Replicates size-1 axes up to `shape` (same rank).
Var expand(Var a, Shape shape);

Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var abs(Var a);
Var maximum(Var a, Var b);
Var maximum(Var a, double floor);

Var softmax(Var a, std::size_t axis);
Var max(Var a, std::size_t axis);
Var sum(Var a, std::size_t axis);
Var mean(Var a, std::size_t axis);
Var sum_all(Var a);
Var mean_all(Var a);
Var l2_normalize(Var a, std::size_t axis);

Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(Var a, std::size_t axis, std::size_t start, std::size_t length);
Var reverse(Var a, std::size_t axis);

/// Layer normalisation over the last axis with per-feature gain and bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

/// log det of a symmetric positive-definite matrix via Cholesky.
Var logdet_psd(Var m);

/// Mean binary cross-entropy of sigmoid(logits) against constant targets in [0, 1].
Var bce_with_logits(Var logits, const Tensor& targets);
/// Mean softmax cross-entropy over rows of [n x k] logits.
Var softmax_cross_entropy(Var logits, std::span<const int> labels);

}  // namespace ops

/// Host-side helpers (no tape).
Tensor matmul(const Tensor& a, const Tensor& b);
/// log det via Cholesky; throws DefinitenessError on a non-positive pivot.
double logdet_psd(const Tensor& m);

}  // namespace xecg
