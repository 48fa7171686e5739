#include "sinkgate/backbone/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "sinkgate/backbone/forward.hpp"
#include "sinkgate/common/json_util.hpp"
#include "sinkgate/numerics/kernels.hpp"
#include "sinkgate/numerics/linalg.hpp"
#include "sinkgate/numerics/ops.hpp"
#include "sinkgate/numerics/sgt1.hpp"
#include "sinkgate/scenes/dataset.hpp"
#include "sinkgate/scenes/vocab.hpp"

namespace sinkgate::backbone {

namespace fs = std::filesystem;

void Backbone::visit(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  const_cast<Backbone*>(this)->visit_mut([&](const std::string& name, Tensor& t) { fn(name, t); });
}

void Backbone::visit_mut(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("enc_w", enc_w);
  fn("enc_b", enc_b);
  fn("proj_w1", proj_w1);
  fn("proj_b1", proj_b1);
  fn("proj_w2", proj_w2);
  fn("proj_b2", proj_b2);
  fn("tok_emb", tok_emb);
  fn("pos_emb", pos_emb);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerWeights& w = layers[l];
    fn(p + "norm1", w.norm1);
    fn(p + "wq", w.wq);
    fn(p + "wk", w.wk);
    fn(p + "wv", w.wv);
    fn(p + "wo", w.wo);
    fn(p + "norm2", w.norm2);
    fn(p + "w_up", w.w_up);
    fn(p + "b_up", w.b_up);
    fn(p + "w_down", w.w_down);
    fn(p + "b_down", w.b_down);
  }
  fn("final_norm", final_norm);
  fn("unembed", unembed);
}

Tensor encode(const Backbone& bb, const Tensor& patches) {
  const auto& c = bb.config;
  if (patches.cols() != static_cast<std::size_t>(c.D_v)) throw ShapeError("encode: patch width must equal D_v");
  Tensor e = ops::add_rowvec(kernels::matmul(patches, bb.enc_w), bb.enc_b);
  if (!c.plant.enabled) return e;
  // Sink pathway: sink-eligible background cells get the spike and a
  // count summary (the encoder "looks" at the whole image for them).
  int count = 0;
  for (std::size_t j = 0; j < patches.rows(); ++j) count += patches.at(j, scenes::feat::object) > 0.5;
  const int code = std::min(count, scenes::feat::count_code_len - 1);
  for (std::size_t j = 0; j < patches.rows(); ++j) {
    if (patches.at(j, scenes::feat::sink_eligible) <= 0.5) continue;
    e.at(j, static_cast<std::size_t>(c.sink_dim_vit)) += c.plant.magnitude_vit;
    e.at(j, static_cast<std::size_t>(scenes::feat::count_code + code)) += c.plant.count_amplitude;
  }
  return e;
}

Tensor project(const Backbone& bb, const Tensor& encoded) {
  Tensor h = ops::gelu(ops::add_rowvec(kernels::matmul(encoded, bb.proj_w1), bb.proj_b1));
  return ops::add_rowvec(kernels::matmul(h, bb.proj_w2), bb.proj_b2);
}

namespace {

Tensor random_matrix(Rng rng, std::size_t r, std::size_t c, double std) {
  Tensor t = Tensor::matrix(r, c);
  for (double& v : t.data()) v = std * rng.normal();
  return t;
}

void init_random(Backbone& bb, std::uint64_t seed) {
  const auto& c = bb.config;
  const Rng base = Rng::stream(seed, "weights");
  const std::size_t D = c.D, Dv = c.D_v, F = c.ffn_hidden, P = c.proj_hidden;
  const double s = c.init_std;
  bb.enc_w = Tensor::matrix(Dv, Dv);
  for (std::size_t i = 0; i < Dv; ++i) bb.enc_w.at(i, i) = 1.0;
  bb.enc_b = Tensor::vector(Dv);
  bb.proj_w1 = random_matrix(base.split("proj_w1"), Dv, P, 1.0 / std::sqrt(static_cast<double>(Dv)));
  bb.proj_b1 = Tensor::vector(P);
  bb.proj_w2 = random_matrix(base.split("proj_w2"), P, D, 1.0 / std::sqrt(static_cast<double>(P)));
  bb.proj_b2 = Tensor::vector(D);
  bb.tok_emb = random_matrix(base.split("tok_emb"), c.vocab, D, 1.0);
  bb.pos_emb = random_matrix(base.split("pos_emb"), c.max_seq, D, 1.0);
  bb.layers.assign(static_cast<std::size_t>(c.L), {});
  for (int l = 0; l < c.L; ++l) {
    const Rng r = base.split("layer", static_cast<std::uint64_t>(l));
    LayerWeights& w = bb.layers[static_cast<std::size_t>(l)];
    w.norm1 = Tensor::vector(D, 1.0);
    w.norm2 = Tensor::vector(D, 1.0);
    w.wq = random_matrix(r.split("wq"), D, D, s);
    w.wk = random_matrix(r.split("wk"), D, D, s);
    w.wv = random_matrix(r.split("wv"), D, D, s);
    w.wo = random_matrix(r.split("wo"), D, D, s);
    w.w_up = random_matrix(r.split("w_up"), D, F, s);
    w.b_up = Tensor::vector(F);
    w.w_down = random_matrix(r.split("w_down"), F, D, s);
    w.b_down = Tensor::vector(D);
  }
  bb.final_norm = Tensor::vector(D, 1.0);
  bb.unembed = random_matrix(base.split("unembed"), D, c.vocab, s);
}

// ---- planted construction -------------------------------------------------

constexpr int kGroup1 = 32;  // linear block of the projector
constexpr int kVisRead = 31; // group 1 reads encoder dims [0, 31)

double median(std::vector<double> v) {
  if (v.empty()) throw InvariantError("plant calibration: no samples");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

void plant_embeddings(Backbone& bb, Rng rng) {
  const auto& c = bb.config;
  const int side = 4;
  bb.tok_emb = Tensor::matrix(c.vocab, c.D);
  for (int id = 0; id < c.vocab; ++id) {
    auto row = bb.tok_emb.row(static_cast<std::size_t>(id));
    if (id == vocab::BOS) {
      row[dims::bos] = 1.0;
    } else if (id >= vocab::COLOR_0 && id < vocab::COLOR_0 + vocab::kColors) {
      row[static_cast<std::size_t>(dims::qcolour_a + id - vocab::COLOR_0)] = 1.0;
    } else if (id >= vocab::CELL_0 && id < vocab::CELL_0 + vocab::kMaxCells) {
      const int cell = id - vocab::CELL_0;
      row[static_cast<std::size_t>(dims::qcell_row + cell / side)] = 1.0;
      row[static_cast<std::size_t>(dims::qcell_col + cell % side)] = 1.0;
    } else if (id >= vocab::Q_COUNT && id <= vocab::Q_LEFT_OF) {
      row[static_cast<std::size_t>(dims::kind + id - vocab::Q_COUNT)] = 1.0;
    } else if (id == vocab::VIS || id == vocab::NONE) {
      // zero
    } else {
      // Answer-only tokens: small random content, away from reserved dims.
      for (int d = 0; d < 18; ++d) row[static_cast<std::size_t>(d)] = c.init_std * rng.normal();
      row[61] = c.init_std * rng.normal();
    }
  }
  bb.pos_emb = Tensor::matrix(c.max_seq, c.D);
  for (int p = 0; p < c.max_seq; ++p) {
    auto row = bb.pos_emb.row(static_cast<std::size_t>(p));
    row[dims::constant] = 1.0;
    const int j = p - 1;
    if (j >= 0 && j < c.n) {
      row[static_cast<std::size_t>(dims::pos_row + j / side)] = c.plant.pos_scale;
      row[static_cast<std::size_t>(dims::pos_col + j % side)] = c.plant.pos_scale;
    }
    if (p == c.n + 1) row[dims::slot1] = 1.0;
    if (p == c.n + 2) row[dims::slot2] = 1.0;
  }
}

void plant_projector(Backbone& bb, Rng rng) {
  const auto& c = bb.config;
  const auto& p = c.plant;
  const std::size_t Dv = c.D_v, D = c.D, P = c.proj_hidden;
  bb.proj_w1 = Tensor::matrix(Dv, P);
  bb.proj_b1 = Tensor::vector(P);
  bb.proj_w2 = Tensor::matrix(P, D);
  bb.proj_b2 = Tensor::vector(D);

  // Group 1: a GELU block kept in its linear regime by a large bias, with W2
  // chosen so that the block reproduces a fixed linear map Pi.
  const double beta = 8.0;
  Tensor w1a = Tensor::matrix(kVisRead, kGroup1);
  Rng r1 = rng.split("group1");
  for (double& v : w1a.data()) v = 0.3 * r1.normal();
  Tensor pi = Tensor::matrix(kVisRead, D);
  for (int d = 0; d < scenes::feat::kContent; ++d) pi.at(d, d) = 1.0;
  for (int k = 0; k < scenes::feat::count_code_len; ++k) {
    pi.at(static_cast<std::size_t>(scenes::feat::count_code + k), static_cast<std::size_t>(dims::count_code + k)) = 1.0;
  }
  const Tensor w2a = kernels::matmul(linalg::right_pinv(w1a), pi);  // 32 x D
  for (int i = 0; i < kVisRead; ++i) {
    for (int u = 0; u < kGroup1; ++u) bb.proj_w1.at(i, u) = w1a.at(i, u);
  }
  for (int u = 0; u < kGroup1; ++u) {
    bb.proj_b1[u] = beta;
    for (std::size_t d = 0; d < D; ++d) bb.proj_w2.at(u, d) = w2a.at(u, d);
  }
  for (std::size_t d = 0; d < D; ++d) {
    double acc = 0.0;
    for (int u = 0; u < kGroup1; ++u) acc += ops::gelu(beta) * w2a.at(u, d);
    bb.proj_b2[d] = -acc;
  }

  // Group 2: reads only the spike dim, no bias, so it is exactly silent on
  // ordinary patches and lifts every spiked patch onto the same direction.
  Rng r2 = rng.split("group2");
  std::vector<double> g(P - kGroup1);
  double gg = 0.0;
  for (std::size_t k = 0; k < g.size(); ++k) {
    const double w = r2.normal();
    bb.proj_w1.at(static_cast<std::size_t>(c.sink_dim_vit), kGroup1 + k) = w;
    g[k] = ops::gelu(w * p.magnitude_vit);
    gg += g[k] * g[k];
  }
  if (gg < 1e-6) throw InvariantError("projector: silent sink group");
  Tensor target = Tensor::vector(D);
  Rng r3 = rng.split("elevation");
  double tn = 0.0;
  for (int d = dims::count_code; d < dims::count_code + scenes::feat::count_code_len; ++d) {
    target[d] = r3.normal();
    tn += target[d] * target[d];
  }
  for (int d = dims::count_code; d < dims::count_code + scenes::feat::count_code_len; ++d) {
    target[d] *= p.sink_norm / std::sqrt(tn);
  }
  target[dims::detector] = p.sink_detector;
  for (std::size_t k = 0; k < g.size(); ++k) {
    for (std::size_t d = 0; d < D; ++d) bb.proj_w2.at(kGroup1 + k, d) = g[k] * target[d] / gg;
  }
}

// Residual-stream statistics on the calibration set at one layer input.
struct Probe {
  std::vector<scenes::Example> const* data;
  std::vector<RunTrace> traces;
};

Tensor normalized(const Tensor& h, double eps) {
  return ops::rmsnorm_rows(h, Tensor::vector(h.cols(), 1.0), eps);
}

std::size_t col(const ModelConfig& c, int head, int j) { return static_cast<std::size_t>(head * c.head_dim() + j); }

void clear_head(LayerWeights& w, const ModelConfig& c, int head) {
  const std::size_t dh = c.head_dim();
  for (std::size_t r = 0; r < static_cast<std::size_t>(c.D); ++r) {
    for (std::size_t j = 0; j < dh; ++j) {
      w.wq.at(r, col(c, head, j)) = 0.0;
      w.wk.at(r, col(c, head, j)) = 0.0;
      w.wv.at(r, col(c, head, j)) = 0.0;
      w.wo.at(col(c, head, j), r) = 0.0;
    }
  }
}

// One bilinear term: logit(q, k) += coef * x̂_q[qd] * x̂_k[kd] for every
// (qd, kd) pair listed, routed through head column j.
void qk_term(LayerWeights& w, const ModelConfig& c, int head, int j, std::initializer_list<int> qdims,
             std::initializer_list<int> kdims, double coef) {
  const double a = std::sqrt(std::abs(coef) * std::sqrt(static_cast<double>(c.head_dim())));
  const double sign = coef < 0 ? -1.0 : 1.0;
  for (int d : qdims) w.wq.at(static_cast<std::size_t>(d), col(c, head, j)) = sign * a;
  for (int d : kdims) w.wk.at(static_cast<std::size_t>(d), col(c, head, j)) = a;
}

struct Samples {
  // x̂ of the final prompt token per example
  std::vector<Tensor> final_rows;
  std::vector<scenes::Task> tasks;
  std::vector<Tensor> all;  // x̂ per example (T x D)
  std::vector<scenes::Spans> spans;
  std::vector<std::vector<int>> cell_rows;
};

Samples sample_layer_input(const Backbone& bb, const std::vector<scenes::Example>& data, int layer,
                           const scenes::EncodeSpec& enc) {
  Samples s;
  ForwardOptions opts;
  opts.capture = true;
  for (const auto& ex : data) {
    const RunTrace tr = forward(bb, ex, opts);
    const Tensor xn = normalized(tr.H(layer - 1), bb.config.norm_eps);
    const auto last = xn.row(xn.rows() - 1);
    s.final_rows.emplace_back(Shape{xn.cols()}, std::vector<double>(last.begin(), last.end()));
    s.tasks.push_back(ex.task);
    s.all.push_back(xn);
    s.spans.push_back(tr.spans);
    s.cell_rows.push_back(scenes::cell_rows(ex.scene, enc));
  }
  return s;
}

enum class Kind { ordinary_object, ordinary_bg, vsink, textured };

Kind kind_of(int row) {
  if (row == scenes::kRowSinkEligible) return Kind::vsink;
  if (row == scenes::kRowTextured) return Kind::textured;
  if (row == scenes::kRowBackground) return Kind::ordinary_bg;
  return Kind::ordinary_object;
}

// Median of x̂[dim] over visual tokens of the given kinds where the raw
// value of `dim` is known to be "on" (chosen by `on`).
template <typename On>
double visual_median(const Samples& s, std::initializer_list<Kind> kinds, On on) {
  std::vector<double> v;
  for (std::size_t e = 0; e < s.all.size(); ++e) {
    for (int j = 0; j < static_cast<int>(s.cell_rows[e].size()); ++j) {
      const Kind k = kind_of(s.cell_rows[e][static_cast<std::size_t>(j)]);
      if (std::find(kinds.begin(), kinds.end(), k) == kinds.end()) continue;
      const auto row = s.all[e].row(static_cast<std::size_t>(s.spans[e].vis_begin + j));
      const double x = on(j, s.cell_rows[e][static_cast<std::size_t>(j)], row);
      if (!std::isnan(x)) v.push_back(x);
    }
  }
  return median(v);
}

double final_median(const Samples& s, std::initializer_list<scenes::Task> tasks, std::initializer_list<int> dims_on) {
  std::vector<double> v;
  for (std::size_t e = 0; e < s.final_rows.size(); ++e) {
    if (std::find(tasks.begin(), tasks.end(), s.tasks[e]) == tasks.end()) continue;
    double best = 0.0;
    for (int d : dims_on) best = std::max(best, s.final_rows[e][static_cast<std::size_t>(d)]);
    v.push_back(best);
  }
  return median(v);
}

double bos_median(const Samples& s) {
  std::vector<double> v;
  for (const auto& xn : s.all) v.push_back(xn.at(0, dims::bos));
  return median(v);
}

// Default channel: every query that carries the constant dim prefers BOS.
void default_channel(LayerWeights& w, const ModelConfig& c, int head, double q_const, double k_bos, double logit) {
  qk_term(w, c, head, c.head_dim() - 1, {dims::constant}, {dims::bos}, logit / (q_const * k_bos));
}

void plant_defaults(LayerWeights& w, const ModelConfig& c, const Samples& s) {
  const double q = visual_median(s, {Kind::ordinary_object, Kind::ordinary_bg},
                                 [](int, int, std::span<const double> r) { return r[dims::constant]; });
  const double k = bos_median(s);
  for (int h = 0; h < c.H; ++h) {
    for (int r = 0; r < c.D; ++r) {
      w.wq.at(static_cast<std::size_t>(r), col(c, h, c.head_dim() - 1)) = 0.0;
      w.wk.at(static_cast<std::size_t>(r), col(c, h, c.head_dim() - 1)) = 0.0;
    }
    default_channel(w, c, h, q, k, c.plant.logit_default);
  }
}

void plant_movers(LayerWeights& w, const ModelConfig& c, const Samples& s) {
  const auto& p = c.plant;
  using scenes::Task;
  const std::initializer_list<int> kinds = {dims::kind, dims::kind + 1, dims::kind + 2, dims::kind + 3,
                                            dims::kind + 4};
  const double q_kind = final_median(s, {Task::global_count, Task::local_attribute, Task::relation}, kinds);
  const double q_const =
      final_median(s, {Task::global_count, Task::local_attribute, Task::relation}, {dims::constant});
  const double k_bos = bos_median(s);
  std::vector<double> slot1, slot2, code1, code2;
  for (std::size_t e = 0; e < s.all.size(); ++e) {
    const std::size_t a1 = static_cast<std::size_t>(s.spans[e].txt_begin);
    slot1.push_back(s.all[e].at(a1, dims::slot1));
    slot2.push_back(s.all[e].at(a1 + 1, dims::slot2));
    for (int d = dims::qcell_row; d < dims::qcolour_a + 8; ++d) {
      if (s.all[e].at(a1, static_cast<std::size_t>(d)) > 0.5) code1.push_back(s.all[e].at(a1, static_cast<std::size_t>(d)));
    }
    for (int d = dims::qcolour_a; d < dims::qcolour_a + 8; ++d) {
      if (s.all[e].at(a1 + 1, static_cast<std::size_t>(d)) > 0.5) code2.push_back(s.all[e].at(a1 + 1, static_cast<std::size_t>(d)));
    }
  }
  for (int head : {0, 1}) {
    clear_head(w, c, head);
    const double slot = median(head == 0 ? slot1 : slot2);
    qk_term(w, c, head, 0, kinds, {head == 0 ? dims::slot1 : dims::slot2}, p.logit_mover / (q_kind * slot));
    default_channel(w, c, head, q_const, k_bos, p.logit_default);
  }
  // Head 0 copies arg1's query codes (cell + colour A); head 1 moves arg2's
  // colour into the colour-B slot.
  const double g1 = 1.0 / median(code1);
  for (int i = 0; i < 16; ++i) {
    w.wv.at(static_cast<std::size_t>(dims::qcell_row + i), col(c, 0, i)) = 1.0;
    w.wo.at(col(c, 0, i), static_cast<std::size_t>(dims::qcell_row + i)) = g1;
  }
  const double g2 = code2.empty() ? g1 : 1.0 / median(code2);
  for (int i = 0; i < 8; ++i) {
    w.wv.at(static_cast<std::size_t>(dims::qcolour_a + i), col(c, 1, i)) = 1.0;
    w.wo.at(col(c, 1, i), static_cast<std::size_t>(dims::qcolour_b + i)) = g2;
  }
}

void plant_lsink_ffn(LayerWeights& w, const ModelConfig& c, const Samples& s, PlantReport& rep) {
  const auto& p = c.plant;
  // Trigger values on the normalized textured dim: textured visual tokens vs
  // every other position.
  double min_tex = 1e300, max_other = -1e300;
  for (std::size_t e = 0; e < s.all.size(); ++e) {
    for (int t = 0; t < static_cast<int>(s.all[e].rows()); ++t) {
      const double x = s.all[e].at(static_cast<std::size_t>(t), dims::textured);
      const int j = t - s.spans[e].vis_begin;
      const bool tex = j >= 0 && j < static_cast<int>(s.cell_rows[e].size()) &&
                       kind_of(s.cell_rows[e][static_cast<std::size_t>(j)]) == Kind::textured;
      if (tex) {
        min_tex = std::min(min_tex, x);
      } else {
        max_other = std::max(max_other, x);
      }
    }
  }
  if (!(min_tex > max_other + 0.2)) throw InvariantError("L-sink trigger not separable on the calibration set");
  const double theta = 0.5 * (min_tex + max_other);
  const double kappa = 12.0 / (min_tex - theta);
  rep.trigger_min_textured = min_tex;
  rep.trigger_max_other = max_other;
  rep.lsink_threshold = theta;
  rep.lsink_slope = kappa;
  for (std::size_t u : {0, 1}) {
    for (int r = 0; r < c.D; ++r) w.w_up.at(static_cast<std::size_t>(r), u) = 0.0;
    for (int d = 0; d < c.D; ++d) w.w_down.at(u, static_cast<std::size_t>(d)) = 0.0;
    w.w_up.at(dims::textured, u) = kappa;
    w.b_up[u] = -kappa * theta - static_cast<double>(u);
    for (int d : c.sink_dims_llm) w.w_down.at(u, static_cast<std::size_t>(d)) = u == 0 ? p.magnitude_llm : -p.magnitude_llm;
  }
}

void plant_readers(LayerWeights& w, const ModelConfig& c, const Samples& s) {
  const auto& p = c.plant;
  using scenes::Task;
  for (int h = 0; h < c.H; ++h) clear_head(w, c, h);
  const double k_bos = bos_median(s);
  const auto ordinary = {Kind::ordinary_object, Kind::ordinary_bg};
  const double pos_ord = visual_median(s, ordinary, [](int j, int, std::span<const double> r) {
    return r[static_cast<std::size_t>(dims::pos_row + j / 4)];
  });
  const double pos_sink = visual_median(s, {Kind::vsink}, [](int j, int, std::span<const double> r) {
    return r[static_cast<std::size_t>(dims::pos_row + j / 4)];
  });
  const double det_sink = visual_median(s, {Kind::vsink}, [](int, int, std::span<const double> r) {
    return r[dims::detector];
  });
  const double colour_obj = visual_median(s, {Kind::ordinary_object}, [](int, int row, std::span<const double> r) {
    return r[static_cast<std::size_t>(row / (vocab::kShapes * vocab::kSizes))];
  });
  // Raw-to-normalized ratios, used to turn copies back into raw units.
  const double rms_sink = visual_median(s, {Kind::vsink}, [&](int, int, std::span<const double> r) {
    return p.sink_detector / r[dims::detector];
  });
  const double rms_obj = visual_median(s, {Kind::ordinary_object}, [](int, int, std::span<const double> r) {
    return 1.0 / r[scenes::feat::object];
  });

  // Head 0: count query -> V-sinks (strongly) and other visual tokens.
  {
    const double qk = final_median(s, {Task::global_count}, {dims::kind});
    const double qc = final_median(s, {Task::global_count}, {dims::constant});
    const double vis = p.logit_visual_read / (qk * 2.0 * pos_ord);
    qk_term(w, c, 0, 1, {dims::kind}, {20, 21, 22, 23, 24, 25, 26, 27}, vis);
    const double from_pos = vis * qk * 2.0 * pos_sink;
    qk_term(w, c, 0, 0, {dims::kind}, {dims::detector}, (p.logit_sink_read - from_pos) / (qk * det_sink));
    default_channel(w, c, 0, qc, k_bos, p.logit_default);
    for (int i = 0; i < 16; ++i) {
      w.wv.at(static_cast<std::size_t>(4 + i), col(c, 0, i)) = 1.0;
      w.wo.at(col(c, 0, i), static_cast<std::size_t>(4 + i)) = rms_sink;
    }
  }
  // Head 1: queried cell (row and column matches); local queries also
  // reach the V-sinks.
  {
    const auto local = {Task::local_attribute};
    const double qcell = final_median(s, local, {28, 29, 30, 31});
    const double qk = final_median(s, local, {dims::kind + 1, dims::kind + 2, dims::kind + 3});
    const double qc = final_median(s, local, {dims::constant});
    const double m = p.logit_cell_match / (qcell * pos_ord);
    for (int r = 0; r < 4; ++r) qk_term(w, c, 1, r, {dims::qcell_row + r}, {dims::pos_row + r}, m);
    for (int r = 0; r < 4; ++r) qk_term(w, c, 1, 4 + r, {dims::qcell_col + r}, {dims::pos_col + r}, m);
    qk_term(w, c, 1, 8, {dims::kind + 1, dims::kind + 2, dims::kind + 3}, {dims::detector},
            p.logit_cell_sink / (qk * det_sink));
    default_channel(w, c, 1, qc, k_bos, p.logit_default);
    for (int i = 0; i < 16; ++i) {
      w.wv.at(static_cast<std::size_t>(i), col(c, 1, i)) = 1.0;
      w.wo.at(col(c, 1, i), static_cast<std::size_t>(i)) = rms_obj;
    }
  }
  // Heads 2, 3: locate a colour and report its column (+1).
  for (int which : {0, 1}) {
    const int head = 2 + which;
    const int qbase = which == 0 ? dims::qcolour_a : dims::qcolour_b;
    const auto rel = {Task::relation};
    const double qcol = final_median(s, rel, {qbase, qbase + 1, qbase + 2, qbase + 3, qbase + 4, qbase + 5,
                                              qbase + 6, qbase + 7});
    const double qk = final_median(s, rel, {dims::kind + 4});
    const double qc = final_median(s, rel, {dims::constant});
    const double m = p.logit_colour_match / (qcol * colour_obj);
    for (int k = 0; k < vocab::kColors; ++k) qk_term(w, c, head, k, {qbase + k}, {k}, m);
    qk_term(w, c, head, 8, {dims::kind + 4}, {dims::detector}, p.logit_relation_sink / (qk * det_sink));
    default_channel(w, c, head, qc, k_bos, p.logit_default);
    for (int k = 0; k < 4; ++k) w.wv.at(static_cast<std::size_t>(dims::pos_col + k), col(c, head, 0)) = k + 1.0;
    w.wo.at(col(c, head, 0), static_cast<std::size_t>(which == 0 ? dims::relation_a : dims::relation_b)) =
        1.0 / (pos_ord);
  }
}

std::vector<scenes::Example> calibration_set(const ModelConfig& c, std::uint64_t seed) {
  scenes::DataSpec d;
  d.seed = Rng::derive(seed, "calibration", 0);
  d.size = 60;
  d.encode.sink_eligible_cells = c.plant.vsink_cells;
  d.encode.textured_cells = c.plant.lsink_cells;
  return scenes::generate_dataset(d);
}

void verify(const Backbone& bb, const std::vector<scenes::Example>& data, PlantReport& rep) {
  const auto& c = bb.config;
  const int l0 = c.plant.emergence_layer;
  std::vector<double> ordinary;
  double sink_norm = 1e300;
  ForwardOptions opts;
  opts.capture = true;
  scenes::EncodeSpec enc;
  enc.sink_eligible_cells = c.plant.vsink_cells;
  enc.textured_cells = c.plant.lsink_cells;
  for (const auto& ex : data) {
    const RunTrace tr = forward(bb, ex, opts);
    const auto rows = scenes::cell_rows(ex.scene, enc);
    for (int j = 0; j < c.n; ++j) {
      const Kind k = kind_of(rows[static_cast<std::size_t>(j)]);
      double nrm = 0.0;
      for (double v : tr.projected.row(static_cast<std::size_t>(j))) nrm += v * v;
      nrm = std::sqrt(nrm);
      const bool spiked = std::abs(tr.encoder_out.at(static_cast<std::size_t>(j), c.sink_dim_vit)) >= c.tau_vit;
      if (spiked != (k == Kind::vsink)) throw InvariantError("plant verify: encoder spike mismatch");
      if (k == Kind::vsink) {
        sink_norm = std::min(sink_norm, nrm);
      } else {
        ordinary.push_back(nrm);
      }
      const std::size_t t = static_cast<std::size_t>(tr.spans.vis_begin + j);
      for (int l = 0; l < c.L; ++l) {
        double mx = 0.0;
        for (int d : c.sink_dims_llm) mx = std::max(mx, std::abs(tr.H(l).at(t, static_cast<std::size_t>(d))));
        const bool want = k == Kind::textured && l >= l0;
        if ((mx >= c.tau_llm) != want) throw InvariantError("plant verify: L-sink activation at layer " + std::to_string(l));
      }
    }
    for (int t = 0; t < tr.T; ++t) {
      if (t >= tr.spans.vis_begin && t < tr.spans.vis_end) continue;
      for (int l = 0; l < c.L; ++l) {
        for (int d : c.sink_dims_llm) {
          if (std::abs(tr.H(l).at(static_cast<std::size_t>(t), static_cast<std::size_t>(d))) >= c.tau_llm) {
            throw InvariantError("plant verify: non-visual token crosses tau_llm");
          }
        }
      }
    }
  }
  rep.vsink_norm = sink_norm;
  rep.ordinary_norm_median = median(ordinary);
  if (!(sink_norm >= 2.0 * rep.ordinary_norm_median)) throw InvariantError("plant verify: V-sink norm not elevated");
}

Backbone build_planted(const ModelConfig& c, std::uint64_t seed) {
  Backbone bb;
  bb.config = c;
  init_random(bb, seed);
  const Rng rng = Rng::stream(seed, "plant");
  plant_embeddings(bb, rng.split("embeddings"));
  plant_projector(bb, rng.split("projector"));
  const auto data = calibration_set(c, seed);
  scenes::EncodeSpec enc;
  enc.sink_eligible_cells = c.plant.vsink_cells;
  enc.textured_cells = c.plant.lsink_cells;
  const int l0 = c.plant.emergence_layer;
  // Layer by layer: each layer is calibrated on activations produced by the
  // already-planted layers below it.
  for (int l = 0; l < c.L; ++l) {
    LayerWeights& w = bb.layers[static_cast<std::size_t>(l)];
    const Samples s = sample_layer_input(bb, data, l, enc);
    plant_defaults(w, c, s);
    if (l == l0 - 1) plant_movers(w, c, s);
    if (l == l0 + 1) plant_readers(w, c, s);
    if (l == l0) {
      // The FFN reads the post-attention residual; attention here is small,
      // so the layer input is a close stand-in and the margin absorbs it.
      plant_lsink_ffn(w, c, s, bb.plant_report);
    }
  }
  verify(bb, data, bb.plant_report);
  return bb;
}

}  // namespace

Backbone build_backbone(const ModelConfig& config, std::uint64_t seed) {
  validate(config);
  if (!config.plant.enabled) {
    Backbone bb;
    bb.config = config;
    init_random(bb, seed);
    return bb;
  }
  std::string last;
  for (int attempt = 0; attempt < 8; ++attempt) {
    try {
      Backbone bb = build_planted(config, Rng::derive(seed, "attempt", static_cast<std::uint64_t>(attempt)));
      bb.plant_report.attempts = attempt + 1;
      return bb;
    } catch (const InvariantError& e) {
      last = e.what();
    } catch (const NumericError& e) {
      last = e.what();
    }
  }
  throw InvariantError("planting failed after 8 attempts: " + last);
}

// ---- checkpoints -----------------------------------------------------------

void save_checkpoint(const Backbone& bb, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::json meta = {{"model", to_json(bb.config)},
                         {"tensors", nlohmann::json::array()},
                         {"plant_report",
                          {{"attempts", bb.plant_report.attempts},
                           {"vsink_norm", bb.plant_report.vsink_norm},
                           {"ordinary_norm_median", bb.plant_report.ordinary_norm_median},
                           {"lsink_threshold", bb.plant_report.lsink_threshold},
                           {"lsink_slope", bb.plant_report.lsink_slope},
                           {"trigger_min_textured", bb.plant_report.trigger_min_textured},
                           {"trigger_max_other", bb.plant_report.trigger_max_other}}}};
  bb.visit([&](const std::string& name, const Tensor& t) {
    sgt1::save(dir / (name + ".sgt1"), t);
    meta["tensors"].push_back(name);
  });
  std::ofstream(dir / "config.json") << jsonu::dump(meta);
}

Backbone load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "config.json");
  if (!in) throw IoError("missing checkpoint config: " + (dir / "config.json").string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint config: ") + e.what());
  }
  Backbone bb;
  bb.config = model_config_from_json(meta.at("model"));
  init_random(bb, 0);  // shapes; every tensor is overwritten below
  bb.visit_mut([&](const std::string& name, Tensor& t) {
    Tensor loaded = sgt1::load(dir / (name + ".sgt1"));
    if (loaded.shape() != t.shape()) throw ShapeError("checkpoint tensor " + name + " has the wrong shape");
    t = std::move(loaded);
  });
  if (meta.contains("plant_report")) {
    const auto& r = meta["plant_report"];
    bb.plant_report.attempts = r.value("attempts", 0);
    bb.plant_report.vsink_norm = r.value("vsink_norm", 0.0);
    bb.plant_report.ordinary_norm_median = r.value("ordinary_norm_median", 0.0);
    bb.plant_report.lsink_threshold = r.value("lsink_threshold", 0.0);
    bb.plant_report.lsink_slope = r.value("lsink_slope", 0.0);
    bb.plant_report.trigger_min_textured = r.value("trigger_min_textured", 0.0);
    bb.plant_report.trigger_max_other = r.value("trigger_max_other", 0.0);
  }
  return bb;
}

std::string serialize(const Backbone& bb) {
  std::string out = to_json(bb.config).dump();
  bb.visit([&](const std::string& name, const Tensor& t) {
    out += name;
    out += sgt1::encode(t);
  });
  return out;
}

std::uint64_t weights_hash(const Backbone& bb) { return fnv1a64(serialize(bb)); }

}  // namespace sinkgate::backbone
