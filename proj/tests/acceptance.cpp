// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// fails. `acceptance 3 7` runs a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "fixtures.hpp"
#include "sinkgate/backbone/forward.hpp"
#include "sinkgate/cli/experiment.hpp"
#include "sinkgate/intervene/intervene.hpp"
#include "sinkgate/lsg/lsg.hpp"
#include "sinkgate/numerics/kernels.hpp"
#include "sinkgate/numerics/ops.hpp"
#include "sinkgate/probes/probes.hpp"
#include "sinkgate/sinkid/sinkid.hpp"

using namespace sinkgate;
using scenes::Task;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Collects failed sub-checks so a FAIL line says which one.
struct Checks {
  std::vector<std::string> failed;
  std::ostringstream info;
  void expect(bool ok, const std::string& what) {
    if (!ok) failed.push_back(what);
  }
  Outcome done() {
    std::string d = info.str();
    for (const auto& f : failed) d += (d.empty() ? "" : "; ") + std::string("failed: ") + f;
    return {failed.empty(), d};
  }
};

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os.precision(prec);
  os << std::fixed << v;
  return os.str();
}

const int kL0 = backbone::PlantSpec{}.emergence_layer;

const std::vector<scenes::Example>& dataset(std::uint64_t seed, int size) {
  static std::map<std::pair<std::uint64_t, int>, std::vector<scenes::Example>> cache;
  auto it = cache.find({seed, size});
  if (it == cache.end()) it = cache.emplace(std::pair{seed, size}, scenes::generate_dataset(fixtures::planted_data(seed, size))).first;
  return it->second;
}

// ---- 1: identify_sinks against a naive re-scan ----

std::vector<int> rescan(const Tensor& h, const std::vector<int>& dims, double tau) {
  std::vector<int> out;
  for (std::size_t j = 0; j < h.rows(); ++j) {
    bool hit = false;
    for (int d : dims) {
      const double v = h.at(j, static_cast<std::size_t>(d));
      if (v >= tau || -v >= tau) hit = true;
    }
    if (hit) out.push_back(static_cast<int>(j));
  }
  return out;
}

Outcome c1() {
  Checks c;
  Rng rng(101);
  int mismatches = 0, with_sinks = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t rows = 1 + rng.below(120), cols = 2 + rng.below(40);
    Tensor h = testutil::random_tensor({rows, cols}, 5000 + static_cast<std::uint64_t>(trial), 2.0);
    std::vector<int> dims;
    const std::size_t k = 1 + rng.below(3);
    for (std::size_t i = 0; i < k; ++i) dims.push_back(static_cast<int>(rng.below(cols)));
    // plant a few massive activations, some exactly at tau
    const double tau = rng.uniform(0.5, 8.0);
    for (int s = 0; s < 3; ++s) {
      const std::size_t r = rng.below(rows);
      const double mag = s == 0 ? tau : tau * rng.uniform(1.0, 5.0);
      h.at(r, static_cast<std::size_t>(dims[rng.below(dims.size())])) = rng.below(2) ? mag : -mag;
    }
    const auto got = sinkid::identify_sinks(h, dims, tau);
    if (got != rescan(h, dims, tau)) ++mismatches;
    if (!got.empty()) ++with_sinks;
  }
  c.info << "1000 matrices, " << with_sinks << " with sinks, " << mismatches << " mismatches";
  c.expect(mismatches == 0, "set equality");
  return c.done();
}

// ---- 2: partition invariants on generated traces ----

Outcome c2() {
  Checks c;
  const auto& bb = fixtures::trained();
  const auto& cfg = bb.config;
  const auto& data = dataset(201, 300);
  backbone::ForwardOptions o;
  o.capture = true;
  int violations = 0;
  for (const auto& ex : data) {
    const auto tr = backbone::forward(bb, ex, o);
    const auto p = sinkid::partition_tokens(tr, cfg);
    const auto v = rescan(tr.encoder_out, {cfg.sink_dim_vit}, cfg.tau_vit);
    if (p.vsink != v) ++violations;
    for (int l = 0; l < cfg.L; ++l) {
      const auto& ls = p.lsink[static_cast<std::size_t>(l)];
      const auto& od = p.ordinary[static_cast<std::size_t>(l)];
      std::vector<int> seen(static_cast<std::size_t>(cfg.n), 0);
      for (const auto* g : {&p.vsink, &ls, &od}) {
        for (int j : *g) {
          if (j < 0 || j >= cfg.n) {
            ++violations;
          } else {
            ++seen[static_cast<std::size_t>(j)];
          }
        }
      }
      for (int s : seen) violations += s != 1;  // overlap or hole
      // the V-sink group is the same set at every layer
      for (int j = 0; j < cfg.n; ++j) {
        const bool in_v = std::find(v.begin(), v.end(), j) != v.end();
        violations += (p.group_of(l, j) == sinkid::kVSink) != in_v;
      }
    }
  }
  c.info << data.size() << " traces, " << violations << " violations";
  c.expect(violations == 0, "disjoint cover, layer-constant V-sinks");
  return c.done();
}

// ---- 3: key-scaling identity and algebra ----

Tensor norm_rows(const Tensor& h, double eps) { return ops::rmsnorm_rows(h, Tensor::vector(h.cols(), 1.0), eps); }

Tensor head_cols(const Tensor& m, int head, int dh) {
  Tensor out = Tensor::matrix(m.rows(), static_cast<std::size_t>(dh));
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (int j = 0; j < dh; ++j) out.at(r, static_cast<std::size_t>(j)) = m.at(r, static_cast<std::size_t>(head * dh + j));
  }
  return out;
}

Outcome c3() {
  Checks c;
  const auto& bb = fixtures::trained();
  const auto& cfg = bb.config;
  const auto& data = dataset(301, 20);
  backbone::ForwardOptions plain;
  plain.capture = true;

  // all-ones plan at every layer, bitwise
  int identity_fail = 0;
  backbone::KeyScalePlan ones;
  for (int l = 0; l < cfg.L; ++l) ones.layers[l] = std::vector<double>(static_cast<std::size_t>(cfg.n), 1.0);
  backbone::ForwardOptions with_ones = plain;
  with_ones.plan = &ones;
  for (const auto& ex : data) {
    const auto a = backbone::forward(bb, ex, plain), b = backbone::forward(bb, ex, with_ones);
    bool same = bitwise_equal(a.logits, b.logits);
    for (int l = 0; l < cfg.L; ++l) {
      same = same && bitwise_equal(a.H(l), b.H(l));
      for (int h = 0; h < cfg.H; ++h) same = same && bitwise_equal(a.attn[l][h], b.attn[l][h]);
    }
    identity_fail += !same;
  }

  // key scaling against an explicit column-scaled logit oracle
  double worst_col = 0.0;
  Rng rng(33);
  for (int i = 0; i < 6; ++i) {
    const auto& ex = data[static_cast<std::size_t>(i)];
    const int layer = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.L - 1)));
    backbone::KeyScalePlan plan;
    std::vector<double> co(static_cast<std::size_t>(cfg.n));
    for (double& v : co) v = rng.uniform(0.0, 1.5);
    plan.layers[layer] = co;
    backbone::ForwardOptions o = plain;
    o.plan = &plan;
    const auto tr = backbone::forward(bb, ex, o);
    std::vector<double> colscale(static_cast<std::size_t>(tr.T), 1.0);
    for (int j = 0; j < cfg.n; ++j) colscale[static_cast<std::size_t>(tr.spans.vis_begin + j)] = co[static_cast<std::size_t>(j)];
    const auto& w = bb.layers[static_cast<std::size_t>(layer)];
    const Tensor xn = norm_rows(tr.H(layer - 1), cfg.norm_eps);
    for (int h = 0; h < cfg.H; ++h) {
      const Tensor q = head_cols(kernels::matmul_naive(xn, w.wq), h, cfg.head_dim());
      const Tensor k = head_cols(kernels::matmul_naive(xn, w.wk), h, cfg.head_dim());
      Tensor lg = Tensor::matrix(xn.rows(), xn.rows());
      for (std::size_t r = 0; r < xn.rows(); ++r) {
        for (std::size_t s = 0; s < xn.rows(); ++s) {
          double dot = 0;
          for (int d = 0; d < cfg.head_dim(); ++d) dot += q.at(r, d) * k.at(s, d);
          lg.at(r, s) = dot / std::sqrt(static_cast<double>(cfg.head_dim())) * colscale[s];
        }
      }
      worst_col = std::max(worst_col, max_abs_diff(ops::causal_softmax_rows(lg), tr.attn[layer][static_cast<std::size_t>(h)]));
    }
  }

  // d logit_j / d c_j by finite differences of log A[q, j] - log A[q, BOS]
  const backbone::Backbone tiny = backbone::build_backbone(fixtures::tiny_config(), 5);
  double worst_fd = 0.0;
  for (int trial = 0; trial < 12; ++trial) {
    const auto ex = fixtures::tiny_example(static_cast<std::uint64_t>(trial));
    const int layer = trial % 3, head = trial % 2, j = trial % 8;
    const double c0 = 0.3 + 0.1 * trial, step = 1e-5;
    auto run = [&](double cj) {
      backbone::KeyScalePlan plan;
      plan.layers[layer] = std::vector<double>(8, 0.7);
      plan.layers[layer][static_cast<std::size_t>(j)] = cj;
      backbone::ForwardOptions o = plain;
      o.plan = &plan;
      return backbone::forward(tiny, ex, o);
    };
    auto gap = [&](double cj) {
      const auto tr = run(cj);
      const Tensor& a = tr.attn[layer][static_cast<std::size_t>(head)];
      const std::size_t qi = static_cast<std::size_t>(tr.T - 1);
      return std::log(a.at(qi, static_cast<std::size_t>(tr.spans.vis_begin + j))) - std::log(a.at(qi, 0));
    };
    const double fd = (gap(c0 + step) - gap(c0 - step)) / (2 * step);
    const auto tr = run(c0);
    const Tensor xn = norm_rows(tr.H(layer - 1), tiny.config.norm_eps);
    const int dh = tiny.config.head_dim();
    const Tensor q = head_cols(kernels::matmul_naive(xn, tiny.layers[static_cast<std::size_t>(layer)].wq), head, dh);
    const Tensor k = head_cols(kernels::matmul_naive(xn, tiny.layers[static_cast<std::size_t>(layer)].wk), head, dh);
    double dot = 0;
    const std::size_t qi = static_cast<std::size_t>(tr.T - 1), kj = static_cast<std::size_t>(tr.spans.vis_begin + j);
    for (int d = 0; d < dh; ++d) dot += q.at(qi, d) * k.at(kj, d);
    worst_fd = std::max(worst_fd, testutil::rel_err(fd, dot / std::sqrt(static_cast<double>(dh))));
  }
  c.info << "identity " << data.size() - static_cast<std::size_t>(identity_fail) << "/" << data.size()
         << " bitwise, column-scaling max diff " << worst_col << ", d logit/dc max rel err " << worst_fd;
  c.expect(identity_fail == 0, "all-ones plan bitwise");
  c.expect(worst_col <= 1e-6, "column-wise scaling to 1e-6");
  c.expect(worst_fd <= 1e-4, "finite differences to 1e-4");
  return c.done();
}

// ---- 4: untrained gate vs explicit 0.5 scaling ----

Outcome c4() {
  Checks c;
  const backbone::Backbone tiny = backbone::build_backbone(fixtures::tiny_config(), 3);
  int cases = 0, fails = 0;
  for (const backbone::Backbone* bb : {&tiny, &fixtures::trained()}) {
    const int n = bb->config.n;
    for (int i = 0; i < 3; ++i) {
      const auto ex = bb == &tiny ? fixtures::tiny_example(40 + static_cast<std::uint64_t>(i)) : dataset(401, 3)[static_cast<std::size_t>(i)];
      for (int layer = -1; layer <= bb->config.L - 2; ++layer) {
        lsg::StackConfig s;
        s.add(lsg::init_gate(bb->config.D, layer, {}, 9 + static_cast<std::uint64_t>(i)));
        lsg::GatedOptions go;
        go.capture = true;
        const auto a = lsg::gated_forward(*bb, s, ex, go);
        backbone::KeyScalePlan plan;
        plan.layers[layer + 1] = std::vector<double>(static_cast<std::size_t>(n), 0.5);
        backbone::ForwardOptions f;
        f.capture = true;
        f.plan = &plan;
        const auto b = backbone::forward(*bb, ex, f);
        bool same = bitwise_equal(a.logits, b.logits);
        for (int l = 0; l < bb->config.L; ++l) {
          same = same && bitwise_equal(a.H(l), b.H(l));
          for (int h = 0; h < bb->config.H; ++h) same = same && bitwise_equal(a.attn[l][h], b.attn[l][h]);
        }
        ++cases;
        fails += !same;
      }
    }
  }
  c.info << cases - fails << "/" << cases << " (model, example, gate layer) cases bitwise equal";
  c.expect(fails == 0, "bitwise trace equality");
  return c.done();
}

// ---- 5: gate gradients by finite differences ----

lsg::GateModule random_gate(int D, int layer, lsg::GateSpec spec, std::uint64_t seed) {
  lsg::GateModule g = lsg::init_gate(D, layer, spec, seed);
  Rng rng(seed * 31 + 7);
  for (Tensor* t : g.params()) {
    for (double& v : t->data()) v += 0.5 * rng.normal();
  }
  return g;
}

double fd_worst(const backbone::Backbone& bb, lsg::StackConfig& s, const scenes::Example& ex, int& n) {
  const auto lg = lsg::loss_and_grad(bb, s, ex);
  double worst = 0.0;
  std::size_t slot = 0;
  for (auto& [l, g] : s.gates) {
    for (Tensor* t : g.params()) {
      for (std::size_t i = 0; i < t->size(); ++i) {
        const double keep = (*t)[i], h = 1e-4;
        const auto at = [&](double x) {
          (*t)[i] = x;
          return lsg::loss_and_grad(bb, s, ex).loss;
        };
        const double fd = (-at(keep + 2 * h) + 8 * at(keep + h) - 8 * at(keep - h) + at(keep - 2 * h)) / (12 * h);
        (*t)[i] = keep;
        worst = std::max(worst, testutil::rel_err(fd, lg.grads[slot][i]));
        ++n;
      }
      ++slot;
    }
  }
  return worst;
}

Outcome c5() {
  Checks c;
  const backbone::Backbone bb = backbone::build_backbone(fixtures::tiny_config(), 3);
  const auto ex0 = fixtures::tiny_example(11);
  c.expect(bb.config.D == 16 && bb.config.L == 3 && ex0.prompt.size() == 12, "instance size (T = prompt length)");
  int n = 0;
  double single = 0.0;
  for (int layer : {-1, 0, 1}) {
    lsg::StackConfig s;
    s.add(random_gate(16, layer, {}, 21 + static_cast<std::uint64_t>(layer + 1)));
    single = std::max(single, fd_worst(bb, s, ex0, n));
  }
  lsg::StackConfig joint;
  lsg::GateSpec a, b, d;
  b.group_mode = lsg::GroupMode::three_group;
  d.signal = lsg::SignalKind::mean_pool_visual;
  joint.add(random_gate(16, -1, a, 1));
  joint.add(random_gate(16, 0, b, 2));
  joint.add(random_gate(16, 1, d, 3));
  const double j = fd_worst(bb, joint, fixtures::tiny_example(12), n);
  c.info << n << " parameters checked, max rel err single " << single << ", joint 3-gate " << j;
  c.expect(single <= 1e-4, "single gate");
  c.expect(j <= 1e-4, "joint gates");
  return c.done();
}

// ---- 6: backbone stays frozen ----

Outcome c6() {
  Checks c;
  const auto& bb = fixtures::trained();
  const std::string before = backbone::serialize(bb);
  const auto& train = dataset(601, 64);
  lsg::TrainHyper h;
  h.epochs = 1;
  const auto single = lsg::train_gate(bb, lsg::init_gate(bb.config.D, kL0, {}, 3), train, {}, h);
  const bool after_single = backbone::serialize(bb) == before;
  lsg::StackConfig s;
  for (int l : {-1, 1, 4}) s.add(lsg::init_gate(bb.config.D, l, {}, 4));
  const auto joint = lsg::train_joint(bb, s, train, {}, h);
  const bool after_joint = backbone::serialize(bb) == before;
  c.info << "serialization " << before.size() << " bytes, identical after single-gate (" << single.loss.size()
         << " steps) and joint 3-gate training";
  c.expect(after_single && single.backbone_unchanged, "single gate");
  c.expect(after_joint && joint.backbone_unchanged, "joint gates");
  return c.done();
}

// ---- 7 and 12: the full per-layer sweep ----

struct FullSweep {
  intervene::SweepResult result;
  double seconds = 0.0;
};

const FullSweep& full_sweep() {
  static const FullSweep fs = [] {
    const auto& bb = fixtures::trained();
    const auto& data = dataset(701, 500);
    const auto t0 = std::chrono::steady_clock::now();
    const intervene::SweepContext ctx(bb, data);
    std::vector<int> layers;
    for (int l = 0; l < bb.config.L; ++l) layers.push_back(l);
    FullSweep out;
    out.result = intervene::sweep_layers(ctx, layers);
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
  }();
  return fs;
}

Outcome c7() {
  Checks c;
  const auto& fs = full_sweep();
  const auto& r = fs.result;
  const int layer = kL0 + 1;
  const auto& row = r.cells.at(layer);
  const auto& g = r.grid[r.best_index(layer, Task::global_count)];
  const auto& l = r.grid[r.best_index(layer, Task::local_attribute)];
  // disfavored extremes: (0, 1) for the global task, (1, 0) for the local one
  const double g_gain = r.best(layer, Task::global_count) - row.front().at(Task::global_count);
  const double l_gain = r.best(layer, Task::local_attribute) - row.back().at(Task::local_attribute);
  c.info << "layer " << layer << ": global best (" << g.vsink << ", " << g.ordinary << ") +" << fmt(100 * g_gain, 1)
         << " pp, local best (" << l.vsink << ", " << l.ordinary << ") +" << fmt(100 * l_gain, 1) << " pp; "
         << r.cells.size() << " layers x " << r.grid.size() << " points on 500 examples in " << fmt(fs.seconds, 1)
         << " s";
  c.expect(g.vsink > g.ordinary, "global best favours V-sinks");
  c.expect(l.vsink < l.ordinary, "local best favours the rest");
  c.expect(g_gain >= 0.05, "global gain over (0, 1) >= 5 pp");
  c.expect(l_gain >= 0.05, "local gain over (1, 0) >= 5 pp");
  c.expect(static_cast<int>(r.cells.size()) == fixtures::trained().config.L && r.grid.size() == 11, "full 11 x L grid");
  c.expect(fs.seconds < 600.0, "runtime < 10 min");
  return c.done();
}

// ---- 8: stage 2 with lsink == ordinary is stage 1 ----

Outcome c8() {
  Checks c;
  const auto& bb = fixtures::trained();
  const auto& data = dataset(801, 100);
  const intervene::SweepContext ctx(bb, data);
  const int layer = kL0 + 1;
  const auto s1 = intervene::sweep_layer(ctx, layer);
  int compared = 0, mismatched = 0;
  std::set<double> vs{s1.grid[s1.best_index(layer, Task::global_count)].vsink, 0.3};
  for (double v : vs) {
    const auto s2 = intervene::sweep_stage2(ctx, layer, v);
    const auto& cells = s2.cells.at(layer);
    for (std::size_t k = 0; k < s2.grid.size(); ++k) {
      const auto& g = s2.grid[k];
      if (g.lsink != g.ordinary) continue;
      ++compared;
      mismatched += cells[k] != ctx.evaluate(layer, intervene::GateCoefficients::two_group(v, g.lsink)).accuracy;
      // the stage-1 grid point with the same pair, when it exists
      for (std::size_t k1 = 0; k1 < s1.grid.size(); ++k1) {
        if (s1.grid[k1] == g) {
          ++compared;
          mismatched += cells[k] != s1.cells.at(layer)[k1];
        }
      }
    }
  }
  c.info << compared << " diagonal comparisons at vsink in {";
  for (double v : vs) c.info << (v == *vs.begin() ? "" : ", ") << v;
  c.info << "}, " << mismatched << " mismatches";
  c.expect(compared >= 22 && mismatched == 0, "exact equality");
  return c.done();
}

// ---- 9: greedy stacking ----

Outcome c9() {
  Checks c;
  const auto& bb = fixtures::trained();
  const auto& train = dataset(901, 96);
  const auto& eval = dataset(902, 90);
  const auto dir = fs::temp_directory_path() / "sinkgate_acceptance_stack";
  fs::remove_all(dir);
  lsg::TrainHyper h;
  h.epochs = 1;
  std::map<int, std::uint64_t> saved_hash;
  std::map<int, lsg::GateModule> loaded;
  for (int l : {1, 2, 3, 4}) {
    const auto r = lsg::train_gate(bb, lsg::init_gate(bb.config.D, l, {}, 5), train, {}, h);
    lsg::save_gate(r.gates.gates.at(l), dir / ("gate_L" + std::to_string(l)));
    saved_hash[l] = lsg::gate_hash(r.gates.gates.at(l));
  }
  for (int l : {1, 2, 3, 4}) loaded.emplace(l, lsg::load_gate(dir / ("gate_L" + std::to_string(l))));
  const auto rep = lsg::greedy_stack(bb, loaded, eval, 4);
  fs::remove_all(dir);

  // independent single-layer evaluation and best-layer choice
  double best_mean = -1e9;
  int best_layer = -1;
  std::map<Task, double> best_acc;
  for (const auto& [l, g] : loaded) {
    lsg::StackConfig one;
    one.add(g);
    const auto acc = lsg::evaluate_gates(bb, one, eval).accuracy;
    double m = 0.0;
    for (const auto& [t, a] : acc) m += (a - rep.baseline.at(t)) / static_cast<double>(acc.size());
    if (m > best_mean) {
      best_mean = m;
      best_layer = l;
      best_acc = acc;
    }
  }
  c.expect(!rep.steps.empty() && rep.steps[0].added == best_layer, "step 1 adds the best single layer");
  c.expect(!rep.steps.empty() && rep.steps[0].accuracy == best_acc, "step 1 accuracy equals the single-layer result");
  bool grows = true;
  std::vector<int> active;
  for (const auto& s : rep.steps) {
    active.push_back(s.added);
    std::sort(active.begin(), active.end());
    auto a = s.active;
    std::sort(a.begin(), a.end());
    grows = grows && a == active;
  }
  c.expect(grows, "Active grows by Added each step");
  const std::string csv = lsg::stack_csv(rep);
  c.expect(csv.rfind("step,added,active,delta_pp_", 0) == 0, "Added/Active/delta columns");
  bool hashes = rep.final.gates.size() == saved_hash.size();
  for (const auto& [l, g] : rep.final.gates) hashes = hashes && lsg::gate_hash(g) == saved_hash.at(l);
  c.expect(hashes, "stacked gates hash-equal to the checkpoints");
  c.info << rep.steps.size() << " steps, order";
  for (const auto& s : rep.steps) c.info << " L" << s.added << " (" << fmt(100 * s.mean_delta, 1) << " pp)";
  c.info << ", checkpoint hashes " << (hashes ? "equal" : "differ");
  return c.done();
}

// ---- 10: probe separation ----

Outcome c10() {
  Checks c;
  const auto& bb = fixtures::planted();
  const auto& data = dataset(1001, 600);
  probes::CurveSpec spec;
  spec.tasks = {probes::ProbeTask::count};
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = probes::probe_curves(data, bb, spec);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::map<std::pair<probes::PoolGroup, int>, probes::ProbeResult> real;
  double min_sink = 1.0, min_gap = 1.0, max_z = 0.0, max_z_majority = 0.0;
  int perm = 0, outside = 0;
  for (const auto& r : rows) {
    if (!r.permuted) {
      real[{r.group, r.layer}] = r.result;
      continue;
    }
    ++perm;
    const double z = std::fabs(r.result.accuracy - r.result.null_rate) / r.result.null_sigma;
    max_z = std::max(max_z, z);
    max_z_majority = std::max(max_z_majority, std::fabs(r.result.accuracy - r.result.chance) / r.result.chance_sigma);
    outside += z > 3.0;
  }
  for (int l = kL0; l < bb.config.L; ++l) {
    const auto s = real.find({probes::PoolGroup::vsink, l});
    const auto o = real.find({probes::PoolGroup::ordinary5, l});
    if (s == real.end() || o == real.end()) {
      c.expect(false, "missing probe at layer " + std::to_string(l));
      continue;
    }
    min_sink = std::min(min_sink, s->second.accuracy);
    min_gap = std::min(min_gap, s->second.accuracy - o->second.accuracy);
  }
  c.info << "layers " << kL0 << ".." << bb.config.L - 1 << ": min V-sink acc " << fmt(min_sink) << ", min gap "
         << fmt(min_gap) << "; " << perm << " permuted probes, max |z| " << fmt(max_z, 2)
         << " vs independence null (" << fmt(max_z_majority, 2) << " vs majority chance); " << fmt(secs, 1) << " s";
  c.expect(min_sink >= 0.95, "sink accuracy >= 0.95");
  c.expect(min_gap >= 0.2, "gap >= 0.2");
  c.expect(perm > 0 && outside == 0, "permuted within 3 sigma");
  c.expect(secs < 300.0, "runtime < 5 min");
  return c.done();
}

// ---- 11: gate ratio regimes ----

Outcome c11() {
  Checks c;
  const auto& bb = fixtures::trained();
  const auto& train = dataset(1101, 400);
  const auto& eval = dataset(1102, 120);
  // gate layer l0 reads H^{l0} and scales the keys of layer l0 + 1
  const auto r = lsg::train_gate(bb, lsg::init_gate(bb.config.D, kL0, {}, 3), train, eval, lsg::TrainHyper{});
  const auto& last = r.trajectories.at(0).points.back().rho;
  const auto& g = last.at(Task::global_count);
  const auto& l = last.at(Task::local_attribute);
  c.info << "keys of layer " << kL0 + 1 << ": rho_vit global " << fmt(g.mean) << " +- " << fmt(g.std) << " (n=" << g.n
         << "), local " << fmt(l.mean) << " +- " << fmt(l.std) << " (n=" << l.n << ")";
  if (last.count(Task::relation)) c.info << ", relation " << fmt(last.at(Task::relation).mean);
  c.expect(g.mean - l.mean >= 0.1, "local below global by >= 0.1");
  c.expect(g.n > 0 && l.n > 0 && std::isfinite(g.std) && std::isfinite(l.std), "std reported");
  return c.done();
}

// ---- 12: broad-optimum statistic ----

Outcome c12() {
  Checks c;
  intervene::SweepResult r;
  for (int k = 0; k < 3; ++k) r.grid.push_back(intervene::GateCoefficients::two_group(k / 10.0, 1 - k / 10.0));
  // top-1 minus top-2 in pp: 2.0, 0.0, 0.1, 0.3, 0.6, 12.5
  const std::vector<std::vector<double>> acc{{0.50, 0.48, 0.40}, {0.61, 0.61, 0.2},    {0.300, 0.299, 0.0},
                                             {0.700, 0.697, 0.5}, {0.100, 0.094, 0.0}, {0.900, 0.775, 0.0}};
  for (std::size_t l = 0; l < acc.size(); ++l) {
    for (double a : acc[l]) r.cells[static_cast<int>(l)].push_back({{Task::global_count, a}});
  }
  r.baseline = {{Task::global_count, 0.5}};
  const auto g = intervene::broad_optimum_stats(r);
  const std::vector<double> want{2.0, 0.0, 0.1, 0.3, 0.6, 12.5};
  bool gaps = g.gaps_pp.size() == want.size();
  for (std::size_t i = 0; gaps && i < want.size(); ++i) gaps = std::fabs(g.gaps_pp[i] - want[i]) < 1e-9;
  c.expect(gaps, "hand gaps");
  c.expect(g.frac_below_05pp == 3.0 / 6.0, "fraction below 0.5 pp = 3/6");
  c.expect(g.frac_below_02pp == 2.0 / 6.0, "fraction below 0.2 pp = 2/6");
  const auto real = intervene::broad_optimum_stats(full_sweep().result);
  int total = 0;
  for (int h : real.histogram) total += h;
  c.expect(total > 0 && total == real.cells, "real sweep histogram non-empty and complete");
  c.info << "fixture fractions " << fmt(g.frac_below_05pp) << " / " << fmt(g.frac_below_02pp) << "; real sweep "
         << real.cells << " cells, " << fmt(100 * real.frac_below_05pp, 1) << "% below 0.5 pp";
  return c.done();
}

// ---- 13: end-to-end determinism ----

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

Outcome c13() {
  Checks c;
  auto cfg = cli::load_config(fs::path(SINKGATE_SOURCE_DIR) / "configs" / "smoke.json");
  c.expect(cfg.pipeline == cli::Pipeline::full && cfg.precision == "f64", "smoke config is a full f64 run");
  std::vector<fs::path> dirs;
  std::vector<cli::RunManifest> ms;
  for (int k = 0; k < 2; ++k) {
    dirs.push_back(fs::temp_directory_path() / ("sinkgate_acceptance_e2e_" + std::to_string(k)));
    fs::remove_all(dirs.back());
    cfg.output = dirs.back().string();
    ms.push_back(cli::run(cfg));
  }
  std::set<std::string> stages;
  int differing = 0;
  for (const auto& a : ms[0].artifacts) {
    stages.insert(a.path.substr(0, a.path.find('/')));
    differing += slurp(dirs[0] / a.path) != slurp(dirs[1] / a.path);
  }
  auto strip = [](nlohmann::json j) {
    j.erase("started");
    j.erase("finished");
    return j;
  };
  const bool manifests = strip(cli::to_json(ms[0])) == strip(cli::to_json(ms[1]));
  for (const char* s : {"data", "backbone", "analyze", "sweep", "gates", "stack", "report"}) {
    c.expect(stages.count(s) == 1, std::string("stage ") + s + " present");
  }
  c.info << ms[0].artifacts.size() << " artifacts, " << differing << " differ byte-wise, manifests "
         << (manifests ? "equal" : "differ") << " modulo timestamps";
  c.expect(differing == 0, "byte-identical artifacts");
  c.expect(manifests, "manifests");
  for (const auto& d : dirs) fs::remove_all(d);
  return c.done();
}

struct Criterion {
  int id;
  const char* name;
  Outcome (*fn)();
};

const Criterion kCriteria[] = {
    {1, "sink identification equals a naive re-scan", c1},
    {2, "partition invariants", c2},
    {3, "key-scaling identity and algebra", c3},
    {4, "untrained gate equals uniform 0.5 key scaling", c4},
    {5, "gate gradients match finite differences", c5},
    {6, "backbone frozen during gate training", c6},
    {7, "planted sweep direction", c7},
    {8, "stage-2 collapse to stage 1", c8},
    {9, "greedy stacking contract", c9},
    {10, "probe separation", c10},
    {11, "gate ratio regime separation", c11},
    {12, "broad-optimum statistic", c12},
    {13, "end-to-end determinism", c13},
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& cr : kCriteria) {
    if (!only.empty() && !only.count(cr.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = cr.fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("%s %2d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", cr.id, cr.name, o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
