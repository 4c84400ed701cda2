#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "rnb/field.hpp"

namespace rnb {

class Tape;

/// Handle to a node on a Tape. Scalars are 1x1 fields.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const ScalarField& value() const;
  const ScalarField& grad() const;
  double scalar() const;
  bool needs_grad() const;
  int height() const { return value().height(); }
  int width() const { return value().width(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// index is already a topological order and backward() is a single reverse
/// sweep.
///
/// Hard, data-dependent quantities (stop-gradient values, thresholds, masks)
/// go through freeze(). In record mode freeze() returns its argument and keeps
/// a copy; in replay mode it returns the copy from a previous tape instead.
/// Replaying lets a finite-difference probe evaluate exactly the function the
/// backward pass differentiates: every stop-gradient quantity held at its
/// value from the base point.
class Tape {
 public:
  using Backward = std::function<void(const ScalarField& out_grad,
                                      std::span<ScalarField* const> parent_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(ScalarField value);
  Var constant(ScalarField value);
  Var constant(double value) { return constant(ScalarField::scalar(value)); }

  /// Appends a node computed from `parents`. `backward` receives the node's
  /// gradient and one accumulator per parent (null where the parent does not
  /// need a gradient) and must add its contribution into them.
  Var record(ScalarField value, std::initializer_list<Var> parents, Backward backward);

  /// Runs the reverse sweep from a 1x1 loss. Throws NonScalarLoss otherwise.
  /// Gradients from any earlier sweep are discarded.
  void backward(Var loss);

  const ScalarField& value(std::size_t id) const { return nodes_[id].value; }
  const ScalarField& grad(std::size_t id) const { return nodes_[id].grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  ScalarField freeze(ScalarField fresh);
  double freeze(double fresh);

  void start_replay(std::vector<ScalarField> frozen);
  bool replaying() const noexcept { return replaying_; }
  /// True when a replayed tape asked for more frozen values than were
  /// recorded, or for one of a different shape.
  bool replay_mismatch() const noexcept { return replay_mismatch_; }
  const std::vector<ScalarField>& frozen_values() const noexcept { return frozen_; }

  /// Registers a hard decision (comparator outcome, extent, argmax) by hash,
  /// with its distance to the nearest flip.
  void note_decision(std::uint64_t hash, double margin);
  std::uint64_t decision_signature() const noexcept { return signature_; }
  double decision_margin() const noexcept { return margin_; }

 private:
  struct Node {
    ScalarField value;
    ScalarField grad;
    bool needs_grad = false;
    std::vector<std::size_t> parents;
    Backward backward;
  };

  std::deque<Node> nodes_;  // stable references across appends
  std::vector<ScalarField> frozen_;
  std::size_t replay_cursor_ = 0;
  bool replaying_ = false;
  bool replay_mismatch_ = false;
  std::uint64_t signature_ = 1469598103934665603ULL;
  double margin_ = 1e300;
};

namespace ad {

// Stop-gradient: same value, no gradient flows back.
Var detach(Var x);

// Forward value is `hard` exactly; the backward pass hands the incoming
// gradient unchanged to `soft`.
Var ste_attach(const BinaryMask& hard, Var soft);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var mul_const(Var a, const ScalarField& c);
Var affine(Var x, double scale, double shift);
inline Var scale(Var x, double s) { return affine(x, s, 0.0); }
inline Var shift(Var x, double b) { return affine(x, 1.0, b); }
Var square(Var x);
Var sigmoid(Var x);
Var sqrt_eps(Var x, double eps);

Var sum(Var x);
Var broadcast(Var s, int height, int width);
Var reshape(Var x, int height, int width);

// Picks the extreme entry; the gradient goes to the first index attaining it.
Var max_value(Var x);
Var min_value(Var x);

Var upsample(Var x, int out_h, int out_w);
Var avg_pool2(Var x);
// Per-channel variants over a (height*width) x channels layout.
Var upsample_channels(Var x, int height, int width, int out_h, int out_w);
Var avg_pool2_channels(Var x, int height, int width);
Var sobel_x(Var x);
Var sobel_y(Var x);

// x * k^T * scale with k constant: (rows x d) * (d x n) -> rows x n.
Var matmul_const_t(Var x, const ScalarField& k, double scale);
Var softmax_rows(Var x);
// Sum of the listed columns -> rows x 1.
Var column_sum(Var x, std::span<const int> columns);

// Mean binary cross-entropy of predictions p against targets in [0,1], with
// p clamped to [eps, 1-eps]; clamped entries get zero gradient.
Var bce_mean(Var p, const ScalarField& target, double eps);

}  // namespace ad
}  // namespace rnb
