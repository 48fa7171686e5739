#include "sinkgate/numerics/autodiff.hpp"

#include <cmath>
#include <memory>
#include <string>

#include "sinkgate/numerics/kernels.hpp"
#include "sinkgate/numerics/ops.hpp"

namespace sinkgate::ad {

const Tensor& Var::value() const { return tape_->value(*this); }
bool Var::requires_grad() const { return tape_->requires_grad(*this); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape() != this) throw InvariantError("variable does not belong to this tape");
  return nodes_[v.id()];
}

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Tape::constant_ref(const Tensor& value) {
  Node n;
  n.ref = &value;
  return push(std::move(n));
}

Var Tape::parameter(Tensor value, bool trainable) {
  Node n;
  n.op = "param";
  n.owned = std::move(value);
  n.requires_grad = trainable;
  return push(std::move(n));
}

Var Tape::parameter_ref(const Tensor& value, bool trainable) {
  Node n;
  n.op = "param";
  n.ref = &value;
  n.requires_grad = trainable;
  return push(std::move(n));
}

Var Tape::record(const char* op, Tensor value, bool requires_grad, BackwardFn fn) {
  value.check_finite(op);
  Node n;
  n.op = op;
  n.owned = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

const Tensor& Tape::value(Var v) const {
  const Node& n = node(v);
  return n.ref ? *n.ref : n.owned;
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

const Tensor* Tape::grad(Var v) const {
  const Node& n = node(v);
  return n.grad ? &*n.grad : nullptr;
}

Tensor& Tape::grad_buffer(Var v) {
  node(v);  // ownership check
  Node& n = nodes_[v.id()];
  if (!n.grad) n.grad.emplace(value(v).shape());
  return *n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
  if (!requires_grad(v)) return;
  Tensor& buf = grad_buffer(v);
  if (buf.shape() != g.shape()) throw ShapeError(std::string("gradient shape mismatch at ") + node(v).op);
  kernels::active().add(buf.data().data(), buf.data().data(), g.data().data(), g.size());
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw InvariantError("backward: loss is not on this tape");
  if (value(loss).size() != 1) throw ShapeError("backward: loss must be a scalar");
  backward_order_.clear();
  for (auto& n : nodes_) n.grad.reset();
  if (!requires_grad(loss)) return;
  grad_buffer(loss)[0] = 1.0;
  for (std::int64_t id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.backward || !n.grad) continue;
    backward_order_.push_back(static_cast<std::uint32_t>(id));
    // Copy: closures may grow other nodes' buffers but never this one.
    const Tensor g = *n.grad;
    n.backward(*this, g);
  }
}

// ---- ops ------------------------------------------------------------------

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw InvariantError("op on an unbound variable");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  if (a.tape() != b.tape()) throw InvariantError("op mixes variables from different tapes");
  return tape_of(a);
}

bool any_grad(std::initializer_list<Var> vs) {
  for (Var v : vs) {
    if (v.requires_grad()) return true;
  }
  return false;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record("matmul", kernels::matmul(a.value(), b.value()), any_grad({a, b}),
                  [a, b](Tape& tp, const Tensor& g) {
                    if (a.requires_grad()) tp.accumulate(a, kernels::matmul_bt(g, b.value()));
                    if (b.requires_grad()) tp.accumulate(b, kernels::matmul_at(a.value(), g));
                  });
}

Var matmul_bt(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record("matmul_bt", kernels::matmul_bt(a.value(), b.value()), any_grad({a, b}),
                  [a, b](Tape& tp, const Tensor& g) {
                    if (a.requires_grad()) tp.accumulate(a, kernels::matmul(g, b.value()));
                    if (b.requires_grad()) tp.accumulate(b, kernels::matmul_at(g, a.value()));
                  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  return t.record("add", ops::add(a.value(), b.value()), any_grad({a, b}), [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var add_rowvec(Var x, Var v) {
  Tape& t = tape_of(x, v);
  return t.record("add_rowvec", ops::add_rowvec(x.value(), v.value()), any_grad({x, v}),
                  [x, v](Tape& tp, const Tensor& g) {
                    tp.accumulate(x, g);
                    if (v.requires_grad()) {
                      Tensor gv(v.value().shape());
                      const auto& kt = kernels::active();
                      for (std::size_t r = 0; r < g.rows(); ++r) {
                        kt.add(gv.data().data(), gv.data().data(), g.row(r).data(), g.cols());
                      }
                      tp.accumulate(v, gv);
                    }
                  });
}

Var scale(Var x, double c) {
  Tape& t = tape_of(x);
  return t.record("scale", ops::scale(x.value(), c), x.requires_grad(),
                  [x, c](Tape& tp, const Tensor& g) { tp.accumulate(x, ops::scale(g, c)); });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  if (a.value().shape() != b.value().shape()) throw ShapeError("mul: shape mismatch");
  Tensor y(a.value().shape());
  kernels::active().mul(y.data().data(), a.value().data().data(), b.value().data().data(), y.size());
  return t.record("mul", std::move(y), any_grad({a, b}), [a, b](Tape& tp, const Tensor& g) {
    const auto& kt = kernels::active();
    if (a.requires_grad()) {
      Tensor ga(g.shape());
      kt.mul(ga.data().data(), g.data().data(), b.value().data().data(), g.size());
      tp.accumulate(a, ga);
    }
    if (b.requires_grad()) {
      Tensor gb(g.shape());
      kt.mul(gb.data().data(), g.data().data(), a.value().data().data(), g.size());
      tp.accumulate(b, gb);
    }
  });
}

Var scale_rows(Var x, Var s) {
  Tape& t = tape_of(x, s);
  if (s.value().size() != x.value().rows()) throw ShapeError("scale_rows: coefficient count does not match rows");
  return t.record("scale_rows", ops::scale_rows(x.value(), s.value().data()), any_grad({x, s}),
                  [x, s](Tape& tp, const Tensor& g) {
                    const auto& kt = kernels::active();
                    if (x.requires_grad()) tp.accumulate(x, ops::scale_rows(g, s.value().data()));
                    if (s.requires_grad()) {
                      Tensor gs(s.value().shape());
                      for (std::size_t r = 0; r < g.rows(); ++r) {
                        gs[r] = kt.dot(g.row(r).data(), x.value().row(r).data(), g.cols());
                      }
                      tp.accumulate(s, gs);
                    }
                  });
}

Var gelu(Var x) {
  Tape& t = tape_of(x);
  return t.record("gelu", ops::gelu(x.value()), x.requires_grad(), [x](Tape& tp, const Tensor& g) {
    Tensor gx(g.shape());
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * ops::gelu_grad(xv[i]);
    tp.accumulate(x, gx);
  });
}

namespace {

// Softmax backward: gx = y * (g - <g, y>) per row.
Tensor softmax_backward(const Tensor& y, const Tensor& g) {
  Tensor gx(g.shape());
  const auto& kt = kernels::active();
  for (std::size_t r = 0; r < g.rows(); ++r) {
    const double inner = kt.dot(g.row(r).data(), y.row(r).data(), g.cols());
    for (std::size_t j = 0; j < g.cols(); ++j) gx.at(r, j) = y.at(r, j) * (g.at(r, j) - inner);
  }
  return gx;
}

}  // namespace

Var softmax_rows(Var x) {
  Tape& t = tape_of(x);
  Tensor yv = ops::softmax_rows(x.value());
  if (!x.requires_grad()) return t.record("softmax_rows", std::move(yv), false, {});
  auto held = std::make_shared<Tensor>(yv);
  return t.record("softmax_rows", std::move(yv), true, [x, held](Tape& tp, const Tensor& g) {
    tp.accumulate(x, softmax_backward(*held, g));
  });
}

Var causal_softmax_rows(Var x, std::size_t offset) {
  Tape& t = tape_of(x);
  Tensor yv = ops::causal_softmax_rows(x.value(), offset);
  if (!x.requires_grad()) return t.record("causal_softmax", std::move(yv), false, {});
  auto held = std::make_shared<Tensor>(yv);
  return t.record("causal_softmax", std::move(yv), true, [x, held](Tape& tp, const Tensor& g) {
    tp.accumulate(x, softmax_backward(*held, g));
  });
}

Var layernorm_rows(Var x, Var gamma, Var beta, double eps) {
  Tape& t = tape_of(x, gamma);
  tape_of(x, beta);
  Tensor y = ops::layernorm_rows(x.value(), gamma.value(), beta.value(), eps);
  const bool rg = any_grad({x, gamma, beta});
  return t.record("layernorm", std::move(y), rg, [x, gamma, beta, eps](Tape& tp, const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& gm = gamma.value();
    const std::size_t d = xv.cols();
    const double dd = static_cast<double>(d);
    const auto& kt = kernels::active();
    Tensor gx(xv.shape()), ggamma(gm.shape()), gbeta(gm.shape());
    std::vector<double> n(d), gn(d);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      auto in = xv.row(r);
      auto go = g.row(r);
      for (std::size_t j = 0; j < d; ++j) gbeta[j] += go[j];
      const double mean = kt.sum(in.data(), d) / dd;
      for (std::size_t j = 0; j < d; ++j) n[j] = in[j] - mean;
      const double var = kt.dot(n.data(), n.data(), d) / dd;
      if (var < ops::kLayerNormVarianceFloor) continue;  // output pinned to beta
      const double inv = 1.0 / std::sqrt(var + eps);
      for (std::size_t j = 0; j < d; ++j) {
        n[j] *= inv;
        ggamma[j] += go[j] * n[j];
        gn[j] = go[j] * gm[j];
      }
      const double mean_gn = kt.sum(gn.data(), d) / dd;
      const double mean_gn_n = kt.dot(gn.data(), n.data(), d) / dd;
      auto gxr = gx.row(r);
      for (std::size_t j = 0; j < d; ++j) gxr[j] = (gn[j] - mean_gn - n[j] * mean_gn_n) * inv;
    }
    tp.accumulate(x, gx);
    tp.accumulate(gamma, ggamma);
    tp.accumulate(beta, gbeta);
  });
}

Var rmsnorm_rows(Var x, Var gamma, double eps) {
  Tape& t = tape_of(x, gamma);
  Tensor y = ops::rmsnorm_rows(x.value(), gamma.value(), eps);
  return t.record("rmsnorm", std::move(y), any_grad({x, gamma}), [x, gamma, eps](Tape& tp, const Tensor& g) {
    const Tensor& xv = x.value();
    const Tensor& gm = gamma.value();
    const std::size_t d = xv.cols();
    const double dd = static_cast<double>(d);
    const auto& kt = kernels::active();
    Tensor gx(xv.shape()), ggamma(gm.shape());
    std::vector<double> n(d), gn(d);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      auto in = xv.row(r);
      auto go = g.row(r);
      const double inv = 1.0 / std::sqrt(kt.dot(in.data(), in.data(), d) / dd + eps);
      for (std::size_t j = 0; j < d; ++j) {
        n[j] = in[j] * inv;
        ggamma[j] += go[j] * n[j];
        gn[j] = go[j] * gm[j];
      }
      const double mean_gn_n = kt.dot(gn.data(), n.data(), d) / dd;
      auto gxr = gx.row(r);
      for (std::size_t j = 0; j < d; ++j) gxr[j] = (gn[j] - n[j] * mean_gn_n) * inv;
    }
    tp.accumulate(x, gx);
    tp.accumulate(gamma, ggamma);
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t width) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  if (begin + width > xv.cols()) throw ShapeError("slice_cols: range out of bounds");
  Tensor y = Tensor::matrix(xv.rows(), width);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    std::copy_n(xv.row(r).data() + begin, width, y.row(r).data());
  }
  return t.record("slice_cols", std::move(y), x.requires_grad(), [x, begin, width](Tape& tp, const Tensor& g) {
    Tensor& buf = tp.grad_buffer(x);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double* dst = buf.row(r).data() + begin;
      kernels::active().add(dst, dst, g.row(r).data(), width);
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape& t = tape_of(parts[0]);
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  bool rg = false;
  for (Var p : parts) {
    tape_of(parts[0], p);
    if (p.value().rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.value().cols();
    rg = rg || p.requires_grad();
  }
  Tensor y = Tensor::matrix(rows, cols);
  std::size_t off = 0;
  for (Var p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(pv.row(r).data(), pv.cols(), y.row(r).data() + off);
    off += pv.cols();
  }
  std::vector<Var> held(parts.begin(), parts.end());
  return t.record("concat_cols", std::move(y), rg, [held](Tape& tp, const Tensor& g) {
    std::size_t off2 = 0;
    for (Var p : held) {
      const std::size_t w = p.value().cols();
      if (p.requires_grad()) {
        Tensor gp = Tensor::matrix(g.rows(), w);
        for (std::size_t r = 0; r < g.rows(); ++r) std::copy_n(g.row(r).data() + off2, w, gp.row(r).data());
        tp.accumulate(p, gp);
      }
      off2 += w;
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& t = tape_of(parts[0]);
  const std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  bool rg = false;
  for (Var p : parts) {
    tape_of(parts[0], p);
    if (p.value().cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.value().rows();
    rg = rg || p.requires_grad();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (Var p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  std::vector<Var> held(parts.begin(), parts.end());
  return t.record("concat_rows", Tensor({rows, cols}, std::move(data)), rg, [held](Tape& tp, const Tensor& g) {
    std::size_t off = 0;
    for (Var p : held) {
      const std::size_t n = p.value().size();
      if (p.requires_grad()) {
        Tensor gp(p.value().shape());
        std::copy_n(g.data().data() + off, n, gp.data().data());
        tp.accumulate(p, gp);
      }
      off += n;
    }
  });
}

Var row(Var x, std::size_t r) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  if (r >= xv.rows()) throw ShapeError("row: index out of range");
  Tensor y = Tensor::matrix(1, xv.cols());
  std::copy_n(xv.row(r).data(), xv.cols(), y.data().data());
  return t.record("row", std::move(y), x.requires_grad(), [x, r](Tape& tp, const Tensor& g) {
    double* dst = tp.grad_buffer(x).row(r).data();
    kernels::active().add(dst, dst, g.data().data(), g.size());
  });
}

Var mean_rows(Var x, std::span<const std::size_t> rows) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  if (rows.empty()) throw ShapeError("mean_rows: empty row set");
  Tensor y = Tensor::matrix(1, xv.cols());
  const auto& kt = kernels::active();
  for (auto r : rows) {
    if (r >= xv.rows()) throw ShapeError("mean_rows: index out of range");
    kt.add(y.data().data(), y.data().data(), xv.row(r).data(), xv.cols());
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  kt.scale(y.data().data(), inv, y.data().data(), y.size());
  std::vector<std::size_t> held(rows.begin(), rows.end());
  return t.record("mean_rows", std::move(y), x.requires_grad(), [x, held, inv](Tape& tp, const Tensor& g) {
    Tensor& buf = tp.grad_buffer(x);
    for (auto r : held) kernels::active().axpy(buf.row(r).data(), inv, g.data().data(), g.size());
  });
}

Var gather_rows(Var table, std::span<const std::size_t> ids) {
  Tape& t = tape_of(table);
  const Tensor& tv = table.value();
  Tensor y = Tensor::matrix(ids.size(), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows()) throw ShapeError("gather_rows: id " + std::to_string(ids[i]) + " out of range");
    std::copy_n(tv.row(ids[i]).data(), tv.cols(), y.row(i).data());
  }
  std::vector<std::size_t> held(ids.begin(), ids.end());
  return t.record("gather_rows", std::move(y), table.requires_grad(), [table, held](Tape& tp, const Tensor& g) {
    Tensor& buf = tp.grad_buffer(table);
    for (std::size_t i = 0; i < held.size(); ++i) {
      double* dst = buf.row(held[i]).data();
      kernels::active().add(dst, dst, g.row(i).data(), g.cols());
    }
  });
}

Var expand_groups(Var ratios, std::span<const int> group) {
  Tape& t = tape_of(ratios);
  const Tensor& rv = ratios.value();
  Tensor s = Tensor::vector(group.size());
  for (std::size_t i = 0; i < group.size(); ++i) {
    if (group[i] >= static_cast<int>(rv.size())) throw ShapeError("expand_groups: group id out of range");
    s[i] = group[i] < 0 ? 1.0 : rv[static_cast<std::size_t>(group[i])];
  }
  std::vector<int> held(group.begin(), group.end());
  return t.record("expand_groups", std::move(s), ratios.requires_grad(),
                  [ratios, held](Tape& tp, const Tensor& g) {
                    Tensor gr(ratios.value().shape());
                    for (std::size_t i = 0; i < held.size(); ++i) {
                      if (held[i] >= 0) gr[static_cast<std::size_t>(held[i])] += g[i];
                    }
                    tp.accumulate(ratios, gr);
                  });
}

Var sum(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  Tensor y = Tensor::scalar(kernels::active().sum(xv.data().data(), xv.size()));
  return t.record("sum", std::move(y), x.requires_grad(), [x](Tape& tp, const Tensor& g) {
    tp.accumulate(x, Tensor(x.value().shape(), g[0]));
  });
}

Var cross_entropy(Var logits_row, std::size_t target) {
  Tape& t = tape_of(logits_row);
  const Tensor& lv = logits_row.value();
  if (lv.rows() != 1) throw ShapeError("cross_entropy: expected a single logits row");
  if (target >= lv.cols()) throw ShapeError("cross_entropy: target out of vocabulary");
  Tensor p = ops::softmax_rows(lv);
  double mx = lv[0];
  for (std::size_t j = 1; j < lv.size(); ++j) mx = std::max(mx, lv[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < lv.size(); ++j) z += std::exp(lv[j] - mx);
  const double loss = -(lv[target] - mx - std::log(z));
  auto held = std::make_shared<Tensor>(std::move(p));
  return t.record("cross_entropy", Tensor::scalar(loss), logits_row.requires_grad(),
                  [logits_row, target, held](Tape& tp, const Tensor& g) {
                    Tensor gl = ops::scale(*held, g[0]);
                    gl[target] -= g[0];
                    tp.accumulate(logits_row, gl);
                  });
}

}  // namespace sinkgate::ad
