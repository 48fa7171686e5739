#include "sinkgate/intervene/intervene.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "sinkgate/common/json_util.hpp"
#include "sinkgate/common/parallel.hpp"
#include "sinkgate/scenes/dataset.hpp"

namespace sinkgate::intervene {

using nlohmann::json;

double GateCoefficients::of(sinkid::Group g) const {
  switch (g) {
    case sinkid::kVSink: return vsink;
    case sinkid::kLSink: return lsink;
    default: return ordinary;
  }
}

void GateCoefficients::validate() const {
  for (double v : {vsink, lsink, ordinary}) {
    if (!std::isfinite(v) || v < 0) throw ConfigError("gate coefficients must be finite and >= 0");
  }
}

std::vector<GateCoefficients> stage1_grid() {
  std::vector<GateCoefficients> g;
  for (int k = 0; k <= 10; ++k) g.push_back(GateCoefficients::two_group(k / 10.0, (10 - k) / 10.0));
  return g;
}

std::vector<GateCoefficients> stage2_grid(double fixed_vsink) {
  std::vector<GateCoefficients> g;
  for (int a = 0; a <= 10; ++a) {
    for (int b = 0; b <= 10; ++b) g.push_back({fixed_vsink, a / 10.0, b / 10.0});
  }
  return g;
}

backbone::KeyScalePlan apply_coefficients(const sinkid::TokenPartition& p, const GateCoefficients& c, int layer) {
  c.validate();
  if (layer < 0 || layer > p.layers()) throw ConfigError("apply_coefficients: layer out of range");
  std::vector<double> s(static_cast<std::size_t>(p.n), c.ordinary);
  if (layer > 0) {
    for (int j : p.lsink.at(static_cast<std::size_t>(layer - 1))) s[static_cast<std::size_t>(j)] = c.lsink;
  }
  for (int j : p.vsink) s[static_cast<std::size_t>(j)] = c.vsink;
  backbone::KeyScalePlan plan;
  plan.layers[layer] = std::move(s);
  return plan;
}

SweepContext::SweepContext(const backbone::Backbone& bb, const std::vector<scenes::Example>& data,
                           PartitionFn partition, int workers)
    : bb_(bb), data_(data), workers_(std::max(1, workers)) {
  if (!partition) {
    partition = [&bb](const backbone::RunTrace& tr) { return sinkid::partition_tokens(tr, bb.config); };
  }
  hidden_.resize(data.size());
  partitions_.resize(data.size());
  std::vector<int> correct(data.size());
  parallel_for(data.size(), workers_, [&](std::size_t i) {
    backbone::ForwardOptions o;
    o.capture = true;
    backbone::RunTrace tr = backbone::forward(bb, data[i], o);
    partitions_[i] = partition(tr);
    partitions_[i].check();
    correct[i] = backbone::argmax(tr.logits.data()) == data[i].answer.at(0);
    hidden_[i] = std::move(tr.hidden);
  });
  baseline_ = backbone::tally(data, correct);
}

backbone::EvalResult SweepContext::evaluate(int layer, const GateCoefficients& coeffs) const {
  if (layer < 0 || layer >= bb_.config.L) throw ConfigError("sweep layer outside [0, L)");
  std::vector<int> correct(data_.size());
  parallel_for(data_.size(), workers_, [&](std::size_t i) {
    const backbone::KeyScalePlan plan = apply_coefficients(partitions_[i], coeffs, layer);
    backbone::ForwardOptions o;
    o.plan = &plan;
    o.start_layer = layer;
    o.start_hidden = &hidden_[i][static_cast<std::size_t>(layer)];
    const auto tr = backbone::forward(bb_, data_[i].patches, data_[i].prompt, o);
    correct[i] = backbone::argmax(tr.logits.data()) == data_[i].answer.at(0);
  });
  return backbone::tally(data_, correct);
}

std::vector<Task> SweepResult::tasks() const {
  std::vector<Task> t;
  for (const auto& [task, acc] : baseline) t.push_back(task);
  return t;
}

std::size_t SweepResult::best_index(int layer, Task task) const {
  const auto& row = cells.at(layer);
  std::size_t best = 0;
  for (std::size_t k = 1; k < row.size(); ++k) {
    if (row[k].at(task) > row[best].at(task)) best = k;
  }
  return best;
}

double SweepResult::best(int layer, Task task) const { return cells.at(layer).at(best_index(layer, task)).at(task); }

void SweepResult::check() const {
  if (grid.empty()) throw InvariantError("sweep: empty grid");
  for (const auto& [layer, row] : cells) {
    if (row.size() != grid.size()) throw InvariantError("sweep: incomplete grid at layer " + std::to_string(layer));
    for (const auto& acc : row) {
      if (acc.size() != baseline.size()) throw InvariantError("sweep: task set differs from baseline");
      for (const auto& [t, a] : acc) {
        if (!baseline.count(t)) throw InvariantError("sweep: task set differs from baseline");
        if (!(a >= 0.0 && a <= 1.0)) throw NumericError("sweep: accuracy outside [0, 1]");
      }
    }
  }
}

namespace {

std::string dataset_id_of(const std::vector<scenes::Example>& data) {
  json ids = json::array();
  for (const auto& ex : data) ids.push_back({ex.id, ex.prompt, ex.answer, scenes::scene_to_json(ex.scene)});
  return jsonu::hex64(jsonu::hash(ids));
}

SweepResult run_grid(const SweepContext& ctx, const std::vector<int>& layers, std::vector<GateCoefficients> grid) {
  SweepResult r;
  r.grid = std::move(grid);
  r.baseline = ctx.baseline().accuracy;
  r.dataset_id = dataset_id_of(ctx.data());
  for (int layer : layers) {
    auto& row = r.cells[layer];
    for (const auto& c : r.grid) row.push_back(ctx.evaluate(layer, c).accuracy);
  }
  r.check();
  return r;
}

}  // namespace

SweepResult sweep_layer(const SweepContext& ctx, int layer) { return sweep_layers(ctx, {layer}); }

SweepResult sweep_layers(const SweepContext& ctx, const std::vector<int>& layers) {
  return run_grid(ctx, layers, stage1_grid());
}

SweepResult sweep_stage2(const SweepContext& ctx, int layer, double fixed_vsink) {
  SweepResult r = run_grid(ctx, {layer}, stage2_grid(fixed_vsink));
  r.mode = "3group";
  r.fixed_vsink = fixed_vsink;
  return r;
}

SweepResult sweep_layer(const backbone::Backbone& bb, const std::vector<scenes::Example>& data,
                        const PartitionFn& partition, int layer) {
  const SweepContext ctx(bb, data, partition);
  return sweep_layer(ctx, layer);
}

TaskAccuracy additional_gain(const SweepResult& stage1, const SweepResult& stage2) {
  if (stage2.cells.size() != 1) throw ConfigError("additional_gain: stage-2 result must cover one layer");
  const int layer = stage2.cells.begin()->first;
  if (!stage1.cells.count(layer)) throw ConfigError("additional_gain: stage-1 result lacks layer " + std::to_string(layer));
  TaskAccuracy g;
  for (Task t : stage2.tasks()) g[t] = stage2.best(layer, t) - stage1.best(layer, t);
  return g;
}

std::vector<BlockBest> report_blocks(const SweepResult& r, int block) {
  if (block < 1) throw ConfigError("report_blocks: block must be >= 1");
  if (r.cells.empty()) return {};
  const int last = r.cells.rbegin()->first;
  std::vector<BlockBest> out;
  for (int b = 0; b * block <= last; ++b) {
    const int lo = b * block, hi = std::min(last, lo + block - 1);
    for (Task t : r.tasks()) {
      BlockBest best;
      bool found = false;
      for (int l = lo; l <= hi; ++l) {
        if (!r.cells.count(l)) continue;
        const std::size_t k = r.best_index(l, t);
        const double a = r.cells.at(l)[k].at(t);
        if (!found || a > best.accuracy) {
          found = true;
          best.layer = l;
          best.coeffs = r.grid[k];
          best.accuracy = a;
        }
      }
      if (!found) continue;
      best.block = b;
      best.first_layer = lo;
      best.last_layer = hi;
      best.task = t;
      best.delta = best.accuracy - r.baseline.at(t);
      out.push_back(best);
    }
  }
  return out;
}

double top_gap(const std::vector<double>& accs) {
  if (accs.size() < 2) throw InvariantError("top_gap: needs at least two grid entries");
  std::vector<double> s = accs;
  std::partial_sort(s.begin(), s.begin() + 2, s.end(), std::greater<>());
  return s[0] - s[1];
}

GapStats broad_optimum_stats(const SweepResult& r) {
  GapStats g;
  g.edges_pp = {0.0, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0};
  g.histogram.assign(g.edges_pp.size() - 1, 0);
  int b05 = 0, b02 = 0;
  for (const auto& [layer, row] : r.cells) {
    for (Task t : r.tasks()) {
      std::vector<double> accs;
      for (const auto& a : row) accs.push_back(a.at(t));
      // Rounded to 1e-9 pp so exact hand fixtures are not blurred by
      // binary fractions (0.50 - 0.48 is not exactly 0.02).
      const double gap = std::round(top_gap(accs) * 100.0 * 1e9) / 1e9;
      g.gaps_pp.push_back(gap);
      b05 += gap < 0.5;
      b02 += gap < 0.2;
      for (std::size_t i = 0; i + 1 < g.edges_pp.size(); ++i) {
        if (gap >= g.edges_pp[i] && (gap < g.edges_pp[i + 1] || i + 2 == g.edges_pp.size())) {
          ++g.histogram[i];
          break;
        }
      }
    }
  }
  g.cells = static_cast<int>(g.gaps_pp.size());
  if (g.cells > 0) {
    g.frac_below_05pp = static_cast<double>(b05) / g.cells;
    g.frac_below_02pp = static_cast<double>(b02) / g.cells;
  }
  return g;
}

json to_json(const GateCoefficients& c) { return {{"vsink", c.vsink}, {"lsink", c.lsink}, {"ordinary", c.ordinary}}; }

GateCoefficients coefficients_from_json(const json& j) {
  jsonu::require_object(j, "coefficients");
  jsonu::require_only(j, {"vsink", "lsink", "ordinary"}, "coefficients");
  GateCoefficients c;
  try {
    c = {j.at("vsink").get<double>(), j.at("lsink").get<double>(), j.at("ordinary").get<double>()};
  } catch (const json::exception& e) {
    throw ConfigError(std::string("coefficients: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

json task_map(const TaskAccuracy& m) {
  json j = json::object();
  for (const auto& [t, a] : m) j[scenes::task_name(t)] = a;
  return j;
}

TaskAccuracy task_map_from(const json& j) {
  jsonu::require_object(j, "accuracy");
  TaskAccuracy m;
  for (const auto& [k, v] : j.items()) m[scenes::parse_task(k)] = v.get<double>();
  return m;
}

}  // namespace

json to_json(const SweepResult& r) {
  json grid = json::array();
  for (const auto& c : r.grid) grid.push_back(to_json(c));
  json layers = json::array();
  for (const auto& [layer, row] : r.cells) {
    json acc = json::array();
    for (const auto& a : row) acc.push_back(task_map(a));
    layers.push_back({{"layer", layer}, {"accuracy", acc}});
  }
  json j = {{"schema_version", kSweepSchema}, {"kind", "sweep"},        {"mode", r.mode},
            {"grid", grid},                   {"layers", layers},       {"baseline", task_map(r.baseline)},
            {"seed", r.seed},                 {"dataset_id", r.dataset_id}};
  if (r.mode == "3group") j["fixed_vsink"] = r.fixed_vsink;
  return j;
}

SweepResult sweep_from_json(const json& j) {
  jsonu::require_object(j, "sweep");
  jsonu::require_only(j, {"schema_version", "kind", "mode", "grid", "layers", "baseline", "seed", "dataset_id",
                          "fixed_vsink"},
                      "sweep");
  if (j.value("schema_version", -1) != kSweepSchema) throw ConfigError("sweep.schema_version: unsupported");
  if (j.value("kind", "") != "sweep") throw ConfigError("sweep.kind: expected \"sweep\"");
  SweepResult r;
  try {
    r.mode = j.at("mode").get<std::string>();
    if (r.mode != "2group" && r.mode != "3group") throw ConfigError("sweep.mode: expected 2group or 3group");
    if (r.mode == "3group") r.fixed_vsink = j.at("fixed_vsink").get<double>();
    for (const auto& c : j.at("grid")) r.grid.push_back(coefficients_from_json(c));
    for (const auto& l : j.at("layers")) {
      auto& row = r.cells[l.at("layer").get<int>()];
      for (const auto& a : l.at("accuracy")) row.push_back(task_map_from(a));
    }
    r.baseline = task_map_from(j.at("baseline"));
    r.seed = j.at("seed").get<std::uint64_t>();
    r.dataset_id = j.at("dataset_id").get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("sweep: ") + e.what());
  }
  r.check();
  return r;
}

json to_json(const std::vector<BlockBest>& blocks) {
  json out = json::array();
  for (const auto& b : blocks) {
    out.push_back({{"block", b.block},
                   {"first_layer", b.first_layer},
                   {"last_layer", b.last_layer},
                   {"task", scenes::task_name(b.task)},
                   {"layer", b.layer},
                   {"coefficients", to_json(b.coeffs)},
                   {"accuracy", b.accuracy},
                   {"delta_pp", b.delta * 100.0}});
  }
  return out;
}

json to_json(const GapStats& g) {
  return {{"cells", g.cells},       {"frac_below_0.5pp", g.frac_below_05pp}, {"frac_below_0.2pp", g.frac_below_02pp},
          {"gaps_pp", g.gaps_pp},   {"edges_pp", g.edges_pp},                {"histogram", g.histogram}};
}

std::string heatmap_csv(const SweepResult& r) {
  std::ostringstream os;
  os << "layer,vsink,lsink,ordinary,task,accuracy,delta_pp\n";
  for (const auto& [layer, row] : r.cells) {
    for (std::size_t k = 0; k < row.size(); ++k) {
      for (const auto& [t, a] : row[k]) {
        const auto& c = r.grid[k];
        os << layer << ',' << jsonu::num(c.vsink) << ',' << jsonu::num(c.lsink) << ',' << jsonu::num(c.ordinary) << ','
           << scenes::task_name(t) << ',' << jsonu::num(a) << ',' << jsonu::num((a - r.baseline.at(t)) * 100.0) << '\n';
      }
    }
  }
  return os.str();
}

std::string best_csv(const SweepResult& r) {
  std::ostringstream os;
  os << "layer,task,vsink,lsink,ordinary,accuracy,delta_pp\n";
  for (const auto& [layer, row] : r.cells) {
    for (Task t : r.tasks()) {
      const std::size_t k = r.best_index(layer, t);
      const auto& c = r.grid[k];
      os << layer << ',' << scenes::task_name(t) << ',' << jsonu::num(c.vsink) << ',' << jsonu::num(c.lsink) << ','
         << jsonu::num(c.ordinary) << ',' << jsonu::num(row[k].at(t)) << ',' << jsonu::num((row[k].at(t) - r.baseline.at(t)) * 100.0)
         << '\n';
    }
  }
  return os.str();
}

std::string blocks_csv(const std::vector<BlockBest>& blocks) {
  std::ostringstream os;
  os << "block,first_layer,last_layer,task,layer,vsink,lsink,ordinary,accuracy,delta_pp\n";
  for (const auto& b : blocks) {
    os << b.block << ',' << b.first_layer << ',' << b.last_layer << ',' << scenes::task_name(b.task) << ','
       << b.layer << ',' << jsonu::num(b.coeffs.vsink) << ',' << jsonu::num(b.coeffs.lsink) << ',' << jsonu::num(b.coeffs.ordinary)
       << ',' << jsonu::num(b.accuracy) << ',' << jsonu::num(b.delta * 100.0) << '\n';
  }
  return os.str();
}

}  // namespace sinkgate::intervene
