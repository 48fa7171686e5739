#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "sinkgate/numerics/tensor.hpp"

// Reverse-mode differentiation over a linear record of executed ops.
//
// A Tape owns every intermediate value. Leaves are either constants (never
// differentiated) or parameters; only parameters flagged trainable seed
// gradient flow. An op records a backward closure only when one of its inputs
// requires a gradient, so frozen sub-networks cost a forward pass and nothing
// more, while still passing gradients through when they sit between a
// trainable leaf and the loss.
namespace sinkgate::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // The referenced tensor must outlive the tape.
  Var constant_ref(const Tensor& value);
  Var parameter(Tensor value, bool trainable = true);
  Var parameter_ref(const Tensor& value, bool trainable = true);

  // Appends an op result. `fn` runs during backward() when any input
  // requires a gradient; pass an empty function otherwise.
  Var record(const char* op, Tensor value, bool requires_grad, BackwardFn fn);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  // Accumulated gradient, or nullptr when none reached this node.
  const Tensor* grad(Var v) const;
  // Adds `g` into the node's gradient buffer (used by backward closures).
  void accumulate(Var v, const Tensor& g);
  Tensor& grad_buffer(Var v);

  // Seeds d(loss)/d(loss) = 1 and walks the record in exact reverse order.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  const char* op_name(std::uint32_t id) const { return nodes_[id].op; }
  // Node ids whose backward closures ran in the last backward(), in call order.
  const std::vector<std::uint32_t>& last_backward_order() const { return backward_order_; }

 private:
  struct Node {
    const char* op = "leaf";
    const Tensor* ref = nullptr;
    Tensor owned;
    std::optional<Tensor> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var push(Node node);
  const Node& node(Var v) const;

  std::deque<Node> nodes_;
  std::vector<std::uint32_t> backward_order_;
};

// ---- Differentiable ops ---------------------------------------------------

Var matmul(Var a, Var b);
Var matmul_bt(Var a, Var b);  // a * b^T
Var add(Var a, Var b);
Var add_rowvec(Var x, Var v);
Var scale(Var x, double c);
Var mul(Var a, Var b);
// y[i, :] = s[i] * x[i, :]  (diag(s) * x)
Var scale_rows(Var x, Var s);
Var gelu(Var x);
Var softmax_rows(Var x);
Var causal_softmax_rows(Var x, std::size_t offset = 0);
Var layernorm_rows(Var x, Var gamma, Var beta, double eps);
Var rmsnorm_rows(Var x, Var gamma, double eps);
Var slice_cols(Var x, std::size_t begin, std::size_t width);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var row(Var x, std::size_t r);
// Mean over the listed rows -> [1 x cols].
Var mean_rows(Var x, std::span<const std::size_t> rows);
// rows of `table` picked by `ids` -> [ids.size() x cols]
Var gather_rows(Var table, std::span<const std::size_t> ids);
// s[i] = ratios[group[i]] when group[i] >= 0, else exactly 1.
Var expand_groups(Var ratios, std::span<const int> group);
Var sum(Var x);
// -log softmax(logits)[target] for a single logits row.
Var cross_entropy(Var logits_row, std::size_t target);

}  // namespace sinkgate::ad
