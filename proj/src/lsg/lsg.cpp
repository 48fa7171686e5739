#include "sinkgate/lsg/lsg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "sinkgate/common/json_util.hpp"
#include "sinkgate/common/parallel.hpp"
#include "sinkgate/numerics/adam.hpp"
#include "sinkgate/numerics/ops.hpp"
#include "sinkgate/numerics/sgt1.hpp"
#include "sinkgate/scenes/vocab.hpp"

namespace sinkgate::lsg {

using nlohmann::json;

const char* group_mode_name(GroupMode m) {
  switch (m) {
    case GroupMode::vsink_vs_rest: return "vsink_vs_rest";
    case GroupMode::lsink_vs_rest: return "lsink_vs_rest";
    default: return "three_group";
  }
}

GroupMode parse_group_mode(const std::string& s) {
  for (auto m : {GroupMode::vsink_vs_rest, GroupMode::lsink_vs_rest, GroupMode::three_group}) {
    if (s == group_mode_name(m)) return m;
  }
  throw ConfigError("unknown group mode '" + s + "'");
}

const char* signal_kind_name(SignalKind k) {
  switch (k) {
    case SignalKind::last_token: return "last_token";
    case SignalKind::mean_pool_all: return "mean_pool_all";
    default: return "mean_pool_visual";
  }
}

SignalKind parse_signal_kind(const std::string& s) {
  for (auto k : {SignalKind::last_token, SignalKind::mean_pool_all, SignalKind::mean_pool_visual}) {
    if (s == signal_kind_name(k)) return k;
  }
  throw ConfigError("unknown signal kind '" + s + "'");
}

std::vector<Tensor*> GateModule::params() { return {&ln_gamma, &ln_beta, &w1, &b1, &w2, &b2}; }
std::vector<const Tensor*> GateModule::params() const { return {&ln_gamma, &ln_beta, &w1, &b1, &w2, &b2}; }

std::size_t GateModule::num_params() const {
  std::size_t n = 0;
  for (const Tensor* t : params()) n += t->size();
  return n;
}

GateModule init_gate(int D, int layer, const GateSpec& spec, std::uint64_t seed) {
  if (D < 1 || spec.hidden < 1) throw ConfigError("gate: D and hidden width must be >= 1");
  if (!(spec.ln_eps > 0)) throw ConfigError("gate: ln_eps must be > 0");
  GateModule g;
  g.layer = layer;
  g.spec = spec;
  const auto d = static_cast<std::size_t>(D), h = static_cast<std::size_t>(spec.hidden);
  const auto G = static_cast<std::size_t>(g.groups());
  g.ln_gamma = Tensor::vector(d, 1.0);
  g.ln_beta = Tensor::vector(d);
  g.w1 = Tensor::matrix(d, h);
  Rng rng = Rng::stream(seed, "gate", static_cast<std::uint64_t>(layer + 1));
  const double sd = 1.0 / std::sqrt(static_cast<double>(D));
  for (double& v : g.w1.data()) v = sd * rng.normal();
  g.b1 = Tensor::vector(h);
  g.w2 = Tensor::matrix(h, G);
  g.b2 = Tensor::vector(G);
  return g;
}

namespace {

struct GateVars {
  std::vector<ad::Var> leaves;
};

ad::Var ratios_on_tape(ad::Tape& tape, const GateModule& g, ad::Var signal, bool trainable, GateVars* vars) {
  std::vector<ad::Var> p;
  for (const Tensor* t : g.params()) p.push_back(trainable ? tape.parameter_ref(*t) : tape.constant_ref(*t));
  if (vars) vars->leaves = p;
  ad::Var n = ad::layernorm_rows(signal, p[0], p[1], g.spec.ln_eps);
  ad::Var h = ad::gelu(ad::add_rowvec(ad::matmul(n, p[2]), p[3]));
  return ad::softmax_rows(ad::add_rowvec(ad::matmul(h, p[4]), p[5]));
}

scenes::Spans spans_of(std::span<const int> tokens) {
  scenes::Spans s;
  const auto first = std::find(tokens.begin(), tokens.end(), vocab::VIS);
  const auto vis_begin = static_cast<int>(first - tokens.begin());
  int n = 0;
  for (auto it = first; it != tokens.end() && *it == vocab::VIS; ++it) ++n;
  s.sys_end = vis_begin;
  s.vis_begin = vis_begin;
  s.vis_end = vis_begin + n;
  s.txt_begin = s.vis_end;
  s.txt_end = static_cast<int>(tokens.size());
  return s;
}

void check_layers(const backbone::Backbone& bb, const StackConfig& gates, int start_layer) {
  for (const auto& [l, g] : gates.gates) {
    if (l < -1 || l > bb.config.L - 2) throw ConfigError("gate layer " + std::to_string(l) + " outside [-1, L-2]");
    if (g.layer != l) throw InvariantError("stack key differs from the gate's layer");
    if (g.ln_gamma.size() != static_cast<std::size_t>(bb.config.D)) throw ShapeError("gate width differs from D");
    if (l + 1 < start_layer) throw ConfigError("start_layer skips gate " + std::to_string(l));
  }
}

// Builds the forward hook for a stack. Gate parameters become tape leaves
// (trainable when `vars` is given, so gradients are collected).
backbone::ScaleHook make_hook(const backbone::Backbone& bb, const StackConfig& gates, const scenes::Example& ex,
                              GateLog* log, std::map<int, GateVars>* vars) {
  const auto spans = spans_of(ex.prompt);
  const int n = spans.vis_end - spans.vis_begin;
  const auto sink = sinkid::SinkConfig::of(bb.config);
  const int dim_vit = sink.dim_vit;
  const auto vsink = sinkid::identify_sinks(backbone::encode(bb, ex.patches), std::span<const int>(&dim_vit, 1),
                                            sink.tau_vit);
  const std::size_t T = ex.prompt.size();
  return [&gates, spans, n, sink, vsink, T, log, vars](int l, ad::Tape& tape, ad::Var x) -> ad::Var {
    const auto it = gates.gates.find(l);
    if (it == gates.gates.end()) return {};
    const GateModule& g = it->second;
    const Tensor& hv = x.value();
    std::vector<int> lsink;
    if (g.spec.group_mode != GroupMode::vsink_vs_rest) lsink = sinkid::lsinks_at(hv, spans, sink, vsink);
    const auto vis = visual_groups(g.spec.group_mode, n, vsink, lsink);
    std::vector<int> group(T, -1);
    for (int j = 0; j < n; ++j) group[static_cast<std::size_t>(spans.vis_begin + j)] = vis[static_cast<std::size_t>(j)];

    ad::Var signal;
    switch (g.spec.signal) {
      case SignalKind::last_token: signal = ad::row(x, T - 1); break;
      case SignalKind::mean_pool_all: {
        std::vector<std::size_t> rows(T);
        for (std::size_t i = 0; i < T; ++i) rows[i] = i;
        signal = ad::mean_rows(x, rows);
        break;
      }
      case SignalKind::mean_pool_visual: {
        std::vector<std::size_t> rows;
        for (int t = spans.vis_begin; t < spans.vis_end; ++t) rows.push_back(static_cast<std::size_t>(t));
        signal = ad::mean_rows(x, rows);
        break;
      }
    }
    for (double v : signal.value().data()) {
      if (!std::isfinite(v)) throw NumericError("gate " + std::to_string(l) + ": non-finite signal");
    }
    ad::Var r = ratios_on_tape(tape, g, signal, vars != nullptr, vars ? &(*vars)[l] : nullptr);
    for (double v : r.value().data()) {
      if (!std::isfinite(v)) throw NumericError("gate " + std::to_string(l) + ": non-finite ratios");
    }
    if (log) (*log)[l] = std::vector<double>(r.value().data().begin(), r.value().data().end());
    return ad::expand_groups(r, group);
  };
}

backbone::ForwardOptions options(const GatedOptions& o, backbone::ScaleHook hook) {
  backbone::ForwardOptions f;
  f.hook = std::move(hook);
  f.capture = o.capture;
  f.start_layer = o.start_layer;
  f.start_hidden = o.start_hidden;
  return f;
}

}  // namespace

std::vector<double> gate_forward(const GateModule& gate, std::span<const double> signal) {
  if (signal.size() != gate.ln_gamma.size()) throw ShapeError("gate_forward: signal width differs from D");
  for (double v : signal) {
    if (!std::isfinite(v)) throw NumericError("gate_forward: non-finite signal");
  }
  ad::Tape tape;
  Tensor s = Tensor::matrix(1, signal.size());
  std::copy(signal.begin(), signal.end(), s.data().begin());
  const ad::Var r = ratios_on_tape(tape, gate, tape.constant(std::move(s)), false, nullptr);
  return {r.value().data().begin(), r.value().data().end()};
}

std::vector<int> visual_groups(GroupMode mode, int n, std::span<const int> vsink, std::span<const int> lsink) {
  const auto in = [](std::span<const int> set, int j) { return std::find(set.begin(), set.end(), j) != set.end(); };
  std::vector<int> g(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    const bool v = in(vsink, j), l = !v && in(lsink, j);
    switch (mode) {
      case GroupMode::vsink_vs_rest: g[static_cast<std::size_t>(j)] = v ? 0 : 1; break;
      case GroupMode::lsink_vs_rest: g[static_cast<std::size_t>(j)] = l ? 0 : 1; break;
      case GroupMode::three_group: g[static_cast<std::size_t>(j)] = v ? 0 : (l ? 1 : 2); break;
    }
  }
  return g;
}

void StackConfig::add(GateModule g) {
  if (gates.count(g.layer)) throw InvariantError("stack already has a gate at layer " + std::to_string(g.layer));
  const int l = g.layer;
  gates.emplace(l, std::move(g));
}

std::vector<int> StackConfig::layers() const {
  std::vector<int> out;
  for (const auto& [l, g] : gates) out.push_back(l);
  return out;
}

backbone::RunTrace gated_forward(const backbone::Backbone& bb, const StackConfig& gates, const scenes::Example& ex,
                                 const GatedOptions& opts) {
  check_layers(bb, gates, opts.start_layer);
  return backbone::forward(bb, ex, options(opts, make_hook(bb, gates, ex, opts.log, nullptr)));
}

std::vector<int> gated_generate(const backbone::Backbone& bb, const StackConfig& gates, const scenes::Example& ex,
                                int max_new) {
  if (max_new < 1) throw ConfigError("generate: max_new must be >= 1");
  GateLog log;
  GatedOptions o;
  o.log = &log;
  const auto tr = gated_forward(bb, gates, ex, o);
  std::vector<int> out{backbone::argmax(tr.logits.data())};
  if (max_new == 1 || static_cast<int>(ex.prompt.size()) + 1 >= bb.config.max_seq) return out;
  // Freeze the prefill ratios and group memberships into a plan.
  GatedOptions cap;
  cap.capture = true;
  const auto full = gated_forward(bb, gates, ex, cap);
  const auto part = sinkid::partition_tokens(full, bb.config);
  backbone::KeyScalePlan plan;
  for (const auto& [l, g] : gates.gates) {
    const auto lsink = l >= 0 ? part.lsink[static_cast<std::size_t>(l)] : std::vector<int>{};
    const auto vis = visual_groups(g.spec.group_mode, part.n, part.vsink, lsink);
    auto& s = plan.layers[l + 1];
    for (int grp : vis) s.push_back(log.at(l)[static_cast<std::size_t>(grp)]);
  }
  scenes::Example next = ex;
  next.prompt.push_back(out.back());
  const auto rest = backbone::generate(bb, next, &plan, max_new - 1);
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

LossGrad loss_and_grad(const backbone::Backbone& bb, const StackConfig& gates, const scenes::Example& ex,
                       const GatedOptions& opts) {
  check_layers(bb, gates, opts.start_layer);
  std::map<int, GateVars> vars;
  ad::Tape tape;
  const auto hook = make_hook(bb, gates, ex, opts.log, &vars);
  const ad::Var logits = backbone::forward_on_tape(tape, bb, ex.patches, ex.prompt, options(opts, hook), nullptr);
  const ad::Var loss = ad::cross_entropy(logits, static_cast<std::size_t>(ex.answer.at(0)));
  tape.backward(loss);
  LossGrad out;
  out.loss = loss.value()[0];
  if (!std::isfinite(out.loss)) throw NumericError("gate training: non-finite loss");
  for (const auto& [l, g] : gates.gates) {
    const auto& leaves = vars.at(l).leaves;
    const auto ps = g.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const Tensor* gr = tape.grad(leaves[i]);
      out.grads.push_back(gr ? *gr : Tensor(ps[i]->shape()));
    }
  }
  return out;
}

namespace {

RhoStat stat_of(const std::vector<double>& v) {
  RhoStat s;
  s.n = static_cast<int>(v.size());
  if (v.empty()) return s;
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - m) * (x - m);
  s.mean = m;
  s.std = std::sqrt(var / static_cast<double>(v.size()));
  return s;
}

// H^{start-1} for each example, from one ungated pass.
std::vector<Tensor> prefix_cache(const backbone::Backbone& bb, const std::vector<scenes::Example>& data, int start,
                                 int workers) {
  std::vector<Tensor> out(data.size());
  if (start == 0) return out;
  parallel_for(data.size(), workers, [&](std::size_t i) {
    backbone::ForwardOptions o;
    o.capture = true;
    out[i] = backbone::forward(bb, data[i], o).hidden[static_cast<std::size_t>(start)];
  });
  return out;
}

std::map<int, std::map<Task, RhoStat>> rho_all(const backbone::Backbone& bb, const StackConfig& gates,
                                               const std::vector<scenes::Example>& data,
                                               const std::vector<Tensor>& cache, int start, int workers) {
  std::vector<GateLog> logs(data.size());
  parallel_for(data.size(), workers, [&](std::size_t i) {
    GatedOptions o;
    o.log = &logs[i];
    o.start_layer = start;
    o.start_hidden = start > 0 ? &cache[i] : nullptr;
    gated_forward(bb, gates, data[i], o);
  });
  std::map<int, std::map<Task, RhoStat>> out;
  for (const int l : gates.layers()) {
    std::map<Task, std::vector<double>> by;
    for (std::size_t i = 0; i < data.size(); ++i) by[data[i].task].push_back(logs[i].at(l)[0]);
    for (const auto& [t, v] : by) out[l][t] = stat_of(v);
  }
  return out;
}

}  // namespace

std::map<Task, RhoStat> rho_stats(const backbone::Backbone& bb, const StackConfig& gates, int layer,
                                  const std::vector<scenes::Example>& data, int workers) {
  if (!gates.gates.count(layer)) throw ConfigError("rho_stats: no gate at layer " + std::to_string(layer));
  return rho_all(bb, gates, data, {}, 0, workers).at(layer);
}

TrainResult train_joint(const backbone::Backbone& bb, const StackConfig& gates,
                        const std::vector<scenes::Example>& data, const std::vector<scenes::Example>& eval,
                        const TrainHyper& hyper) {
  if (gates.gates.empty()) throw ConfigError("gate training: no gates");
  if (!(hyper.lr > 0) || hyper.batch < 1 || hyper.epochs < 0 || hyper.checkpoints < 1) {
    throw ConfigError("gate training: lr > 0, batch >= 1, epochs >= 0, checkpoints >= 1");
  }
  if (data.empty() && hyper.epochs > 0) throw ConfigError("gate training: empty training set");
  check_layers(bb, gates, 0);
  const std::string before = backbone::serialize(bb);

  TrainResult res;
  res.gates = gates;
  const int start = gates.gates.begin()->first + 1;
  const auto cache = prefix_cache(bb, data, start, hyper.workers);
  const auto eval_cache = prefix_cache(bb, eval, start, hyper.workers);

  std::vector<Tensor*> params;
  for (auto& [l, g] : res.gates.gates) {
    for (Tensor* t : g.params()) params.push_back(t);
  }
  AdamConfig ac;
  ac.lr = hyper.lr;
  Adam opt(params, ac);

  const std::size_t N = data.size();
  const std::size_t B = std::min<std::size_t>(static_cast<std::size_t>(hyper.batch), std::max<std::size_t>(N, 1));
  const int per_epoch = N == 0 ? 0 : static_cast<int>((N + B - 1) / B);
  const int total = per_epoch * hyper.epochs;
  std::set<int> marks;
  for (int c = 0; c <= hyper.checkpoints; ++c) {
    marks.insert(static_cast<int>(std::llround(static_cast<double>(total) * c / hyper.checkpoints)));
  }
  for (int l : res.gates.layers()) res.trajectories.push_back({l, {}});
  const auto record = [&](int step) {
    if (eval.empty()) return;
    const auto rho = rho_all(bb, res.gates, eval, eval_cache, start, hyper.workers);
    for (auto& tj : res.trajectories) tj.points.push_back({step, rho.at(tj.layer)});
  };
  record(0);

  int step = 0;
  for (int e = 0; e < hyper.epochs; ++e) {
    std::vector<std::size_t> order(N);
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    Rng rng = Rng::stream(hyper.seed, "gate-shuffle", static_cast<std::uint64_t>(e));
    for (std::size_t i = N; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t b0 = 0; b0 < N; b0 += B) {
      const std::size_t bn = std::min(B, N - b0);
      std::vector<LossGrad> parts(bn);
      parallel_for(bn, hyper.workers, [&](std::size_t k) {
        const std::size_t i = order[b0 + k];
        GatedOptions o;
        o.start_layer = start;
        o.start_hidden = start > 0 ? &cache[i] : nullptr;
        parts[k] = loss_and_grad(bb, res.gates, data[i], o);
      });
      std::vector<Tensor> grads = parts[0].grads;
      double loss = parts[0].loss;
      for (std::size_t k = 1; k < bn; ++k) {
        loss += parts[k].loss;
        for (std::size_t p = 0; p < grads.size(); ++p) grads[p] = ops::add(grads[p], parts[k].grads[p]);
      }
      const double inv = 1.0 / static_cast<double>(bn);
      for (auto& g : grads) g = ops::scale(g, inv);
      opt.step(grads);
      res.loss.push_back(loss * inv);
      ++step;
      if (marks.count(step)) record(step);
    }
  }
  res.backbone_unchanged = backbone::serialize(bb) == before;
  if (!res.backbone_unchanged) throw InvariantError("gate training modified the backbone");
  return res;
}

TrainResult train_gate(const backbone::Backbone& bb, const GateModule& gate, const std::vector<scenes::Example>& data,
                       const std::vector<scenes::Example>& eval, const TrainHyper& hyper) {
  StackConfig s;
  s.add(gate);
  return train_joint(bb, s, data, eval, hyper);
}

backbone::EvalResult evaluate_gates(const backbone::Backbone& bb, const StackConfig& gates,
                                    const std::vector<scenes::Example>& data, int workers) {
  check_layers(bb, gates, 0);
  std::vector<int> correct(data.size());
  parallel_for(data.size(), workers, [&](std::size_t i) {
    correct[i] = gated_generate(bb, gates, data[i], 1)[0] == data[i].answer.at(0);
  });
  return backbone::tally(data, correct);
}

namespace {

std::map<Task, double> deltas(const std::map<Task, double>& acc, const std::map<Task, double>& base, double* mean) {
  std::map<Task, double> d;
  double s = 0.0;
  for (const auto& [t, a] : acc) {
    d[t] = a - base.at(t);
    s += d[t];
  }
  if (mean) *mean = d.empty() ? 0.0 : s / static_cast<double>(d.size());
  return d;
}

}  // namespace

StackReport greedy_stack(const backbone::Backbone& bb, const std::map<int, GateModule>& trained,
                         const std::vector<scenes::Example>& eval, int steps, int workers) {
  if (steps < 1) throw ConfigError("stack: steps must be >= 1");
  if (steps > static_cast<int>(trained.size())) throw ConfigError("stack: steps exceed the available gate layers");
  StackReport rep;
  rep.baseline = backbone::evaluate(bb, eval).accuracy;
  std::vector<std::pair<double, int>> order;
  for (const auto& [l, g] : trained) {
    if (g.layer != l) throw InvariantError("stack: checkpoint key differs from its layer");
    StackConfig one;
    one.add(g);
    rep.single[l] = evaluate_gates(bb, one, eval, workers).accuracy;
    double m = 0.0;
    deltas(rep.single[l], rep.baseline, &m);
    order.push_back({m, l});
  }
  std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  for (int s = 0; s < steps; ++s) {
    const int l = order[static_cast<std::size_t>(s)].second;
    rep.final.add(trained.at(l));
    StackStep st;
    st.step = s + 1;
    st.added = l;
    st.active = rep.final.layers();
    st.accuracy = evaluate_gates(bb, rep.final, eval, workers).accuracy;
    st.delta = deltas(st.accuracy, rep.baseline, &st.mean_delta);
    rep.steps.push_back(std::move(st));
  }
  return rep;
}

std::vector<GateSpec> ablation_variants() {
  std::vector<GateSpec> v;
  for (auto k : {SignalKind::last_token, SignalKind::mean_pool_all, SignalKind::mean_pool_visual}) {
    GateSpec s;
    s.signal = k;
    v.push_back(s);
  }
  for (auto m : {GroupMode::lsink_vs_rest, GroupMode::three_group}) {
    GateSpec s;
    s.group_mode = m;
    v.push_back(s);
  }
  return v;
}

std::vector<AblationRow> ablate(const backbone::Backbone& bb, int layer, const std::vector<GateSpec>& variants,
                                const std::vector<scenes::Example>& train, const std::vector<scenes::Example>& eval,
                                const TrainHyper& hyper) {
  const auto base = backbone::evaluate(bb, eval).accuracy;
  std::vector<AblationRow> rows;
  for (const auto& spec : variants) {
    const auto res = train_gate(bb, init_gate(bb.config.D, layer, spec, hyper.seed), train, {}, hyper);
    AblationRow r;
    r.name = std::string(signal_kind_name(spec.signal)) + "/" + group_mode_name(spec.group_mode);
    r.spec = spec;
    r.accuracy = evaluate_gates(bb, res.gates, eval, hyper.workers).accuracy;
    r.delta = deltas(r.accuracy, base, &r.mean_delta);
    rows.push_back(std::move(r));
  }
  return rows;
}

namespace {

const char* const kParamNames[] = {"ln_gamma", "ln_beta", "w1", "b1", "w2", "b2"};

json gate_meta(const GateModule& g) {
  return {{"schema_version", 1},
          {"kind", "gate"},
          {"layer", g.layer},
          {"group_mode", group_mode_name(g.spec.group_mode)},
          {"signal", signal_kind_name(g.spec.signal)},
          {"hidden", g.spec.hidden},
          {"ln_eps", g.spec.ln_eps},
          {"D", g.ln_gamma.size()}};
}

}  // namespace

void save_gate(const GateModule& g, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream f(dir / "gate.json");
  if (!f) throw IoError("cannot write " + (dir / "gate.json").string());
  f << jsonu::dump(gate_meta(g));
  const auto ps = g.params();
  for (std::size_t i = 0; i < ps.size(); ++i) sgt1::save(dir / (std::string(kParamNames[i]) + ".sgt1"), *ps[i]);
}

GateModule load_gate(const std::filesystem::path& dir) {
  std::ifstream f(dir / "gate.json");
  if (!f) throw IoError("missing " + (dir / "gate.json").string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("gate.json: ") + e.what());
  }
  jsonu::require_object(j, "gate");
  jsonu::require_only(j, {"schema_version", "kind", "layer", "group_mode", "signal", "hidden", "ln_eps", "D"}, "gate");
  if (j.value("schema_version", -1) != 1 || j.value("kind", "") != "gate") {
    throw ConfigError("gate.json: unsupported schema");
  }
  GateModule g;
  int D = 0;
  try {
    g.layer = j.at("layer").get<int>();
    g.spec.group_mode = parse_group_mode(j.at("group_mode").get<std::string>());
    g.spec.signal = parse_signal_kind(j.at("signal").get<std::string>());
    g.spec.hidden = j.at("hidden").get<int>();
    g.spec.ln_eps = j.at("ln_eps").get<double>();
    D = j.at("D").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("gate.json: ") + e.what());
  }
  const auto ps = g.params();
  for (std::size_t i = 0; i < ps.size(); ++i) *ps[i] = sgt1::load(dir / (std::string(kParamNames[i]) + ".sgt1"));
  const auto d = static_cast<std::size_t>(D), h = static_cast<std::size_t>(g.spec.hidden);
  const auto G = static_cast<std::size_t>(g.groups());
  if (g.ln_gamma.shape() != Shape{d} || g.ln_beta.shape() != Shape{d} || g.w1.shape() != Shape{d, h} ||
      g.b1.shape() != Shape{h} || g.w2.shape() != Shape{h, G} || g.b2.shape() != Shape{G}) {
    throw ShapeError("gate checkpoint: tensor shapes disagree with gate.json");
  }
  return g;
}

std::uint64_t gate_hash(const GateModule& g) {
  std::string bytes = gate_meta(g).dump();
  for (const Tensor* t : g.params()) bytes += sgt1::encode(*t);
  return fnv1a64(bytes);
}

namespace {

json rho_json(const std::map<Task, RhoStat>& m) {
  json j = json::object();
  for (const auto& [t, s] : m) j[scenes::task_name(t)] = {{"mean", s.mean}, {"std", s.std}, {"n", s.n}};
  return j;
}

json task_map(const std::map<Task, double>& m) {
  json j = json::object();
  for (const auto& [t, a] : m) j[scenes::task_name(t)] = a;
  return j;
}

}  // namespace

json to_json(const Trajectory& t) {
  json pts = json::array();
  for (const auto& p : t.points) pts.push_back({{"step", p.step}, {"rho", rho_json(p.rho)}});
  return {{"schema_version", 1}, {"kind", "trajectory"}, {"layer", t.layer}, {"points", pts}};
}

std::string trajectory_csv(const std::vector<Trajectory>& ts) {
  std::ostringstream os;
  os << "layer,checkpoint,step,task,mean_rho,std_rho,n\n";
  for (const auto& t : ts) {
    for (std::size_t c = 0; c < t.points.size(); ++c) {
      for (const auto& [task, s] : t.points[c].rho) {
        os << t.layer << ',' << c << ',' << t.points[c].step << ',' << scenes::task_name(task) << ','
           << jsonu::num(s.mean) << ',' << jsonu::num(s.std) << ',' << s.n << '\n';
      }
    }
  }
  return os.str();
}

json to_json(const StackReport& r) {
  json steps = json::array();
  for (const auto& s : r.steps) {
    steps.push_back({{"step", s.step},
                     {"added", s.added},
                     {"active", s.active},
                     {"accuracy", task_map(s.accuracy)},
                     {"delta_pp", [&] {
                        json d = json::object();
                        for (const auto& [t, v] : s.delta) d[scenes::task_name(t)] = v * 100.0;
                        return d;
                      }()},
                     {"mean_delta_pp", s.mean_delta * 100.0}});
  }
  json single = json::object();
  for (const auto& [l, a] : r.single) single[std::to_string(l)] = task_map(a);
  json hashes = json::object();
  for (const auto& [l, g] : r.final.gates) hashes[std::to_string(l)] = jsonu::hex64(gate_hash(g));
  return {{"schema_version", 1},   {"kind", "stack"},          {"baseline", task_map(r.baseline)},
          {"single", single},      {"steps", steps},           {"gate_hashes", hashes}};
}

std::string stack_csv(const StackReport& r) {
  std::ostringstream os;
  os << "step,added,active";
  for (const auto& [t, a] : r.baseline) os << ",delta_pp_" << scenes::task_name(t);
  os << ",mean_delta_pp\n";
  for (const auto& s : r.steps) {
    os << s.step << ",L" << s.added << ',';
    for (std::size_t i = 0; i < s.active.size(); ++i) os << (i ? " " : "") << 'L' << s.active[i];
    for (const auto& [t, d] : s.delta) os << ',' << jsonu::num(d * 100.0);
    os << ',' << jsonu::num(s.mean_delta * 100.0) << '\n';
  }
  return os.str();
}

json to_json(const std::vector<AblationRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    json d = json::object();
    for (const auto& [t, v] : r.delta) d[scenes::task_name(t)] = v * 100.0;
    out.push_back({{"variant", r.name},
                   {"signal", signal_kind_name(r.spec.signal)},
                   {"group_mode", group_mode_name(r.spec.group_mode)},
                   {"accuracy", task_map(r.accuracy)},
                   {"delta_pp", d},
                   {"mean_delta_pp", r.mean_delta * 100.0}});
  }
  return out;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant,task,accuracy,delta_pp\n";
  for (const auto& r : rows) {
    for (const auto& [t, a] : r.accuracy) {
      os << r.name << ',' << scenes::task_name(t) << ',' << jsonu::num(a) << ',' << jsonu::num(r.delta.at(t) * 100.0)
         << '\n';
    }
  }
  return os.str();
}

}  // namespace sinkgate::lsg
