#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <set>
#include <sstream>

#include "sinkgate/backbone/trace_io.hpp"
#include "sinkgate/backbone/train.hpp"
#include "sinkgate/cli/experiment.hpp"
#include "sinkgate/common/json_util.hpp"
#include "sinkgate/common/parallel.hpp"
#include "sinkgate/intervene/intervene.hpp"
#include "sinkgate/lsg/lsg.hpp"
#include "sinkgate/probes/probes.hpp"
#include "sinkgate/scenes/dataset.hpp"
#include "sinkgate/sinkid/sinkid.hpp"

namespace sinkgate::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using scenes::Example;
using scenes::Task;

namespace {

std::string now_utc() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string file_hash(const fs::path& p) { return jsonu::hex64(fnv1a64(slurp(p))); }

json read_json(const fs::path& p) {
  try {
    return json::parse(slurp(p));
  } catch (const json::exception& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

// nlohmann writes NaN as null, so a bad metric would otherwise slip through.
void check_finite(const json& j, const std::string& where) {
  if (j.is_number_float() && !std::isfinite(j.get<double>())) throw NumericError("non-finite metric in " + where);
  if (j.is_structured()) {
    for (const auto& v : j) check_finite(v, where);
  }
}

// Every file a run writes goes through here so the manifest lists it once.
class Outputs {
 public:
  explicit Outputs(fs::path root) : root_(std::move(root)) {}

  const fs::path& root() const { return root_; }

  void text(const std::string& rel, const std::string& kind, int schema, const std::string& content) {
    const fs::path p = root_ / rel;
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + p.string());
    out << content;
    out.close();
    add(rel, kind, schema);
  }
  void put(const std::string& rel, const std::string& kind, int schema, const json& j) {
    check_finite(j, rel);
    text(rel, kind, schema, jsonu::dump(j));
  }
  // A file or directory tree written by a library call.
  void adopt(const std::string& rel, const std::string& kind, int schema) {
    const fs::path p = root_ / rel;
    if (fs::is_directory(p)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::recursive_directory_iterator(p)) {
        if (e.is_regular_file()) files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      for (const auto& f : files) add(fs::relative(f, root_).generic_string(), kind, schema);
    } else {
      add(rel, kind, schema);
    }
  }
  std::vector<Artifact> artifacts() const {
    std::vector<Artifact> v;
    for (const auto& [path, a] : items_) v.push_back(a);
    return v;
  }

 private:
  void add(const std::string& rel, const std::string& kind, int schema) {
    if (items_.count(rel)) throw InvariantError("artifact written twice: " + rel);
    items_[rel] = Artifact{rel, kind, schema, file_hash(root_ / rel)};
  }

  fs::path root_;
  std::map<std::string, Artifact> items_;
};

std::map<std::string, int> schemas_of(const std::vector<Artifact>& a) {
  std::map<std::string, int> s;
  for (const auto& x : a) s[x.kind] = x.schema_version;
  return s;
}

json task_json(const std::map<Task, double>& m, double scale = 1.0) {
  json j = json::object();
  for (const auto& [t, v] : m) j[scenes::task_name(t)] = v * scale;
  return j;
}

// Removes what a previous run in the same directory wrote; anything else in
// a non-empty directory is refused rather than mixed into the new run.
void prepare_output(const fs::path& out) {
  if (!fs::exists(out)) {
    fs::create_directories(out);
    return;
  }
  if (!fs::is_directory(out)) throw ConfigError("output: " + out.string() + " is not a directory");
  if (fs::is_empty(out)) return;
  const fs::path m = out / "manifest.json";
  if (!fs::exists(m)) throw ConfigError("output: " + out.string() + " is not empty and holds no run manifest");
  const RunManifest old = manifest_from_json(read_json(m));
  for (const auto& a : old.artifacts) fs::remove(out / a.path);
  fs::remove(m);
  // drop directories the old run left empty
  std::vector<fs::path> dirs;
  for (const auto& e : fs::recursive_directory_iterator(out)) {
    if (e.is_directory()) dirs.push_back(e.path());
  }
  std::sort(dirs.rbegin(), dirs.rend());
  for (const auto& d : dirs) {
    if (fs::is_empty(d)) fs::remove(d);
  }
  if (!fs::is_empty(out)) throw ConfigError("output: " + out.string() + " holds files not listed in its manifest");
}

// ---- report tables, shared by `report` and the full pipeline ----

struct RunInput {
  RunManifest manifest;
  fs::path root;
};

std::string counters_header() { return "run,source,row,n_nonneg,n_neg\n"; }

void counter_row(std::ostringstream& os, int run, const std::string& source, const std::string& row,
                 const json& deltas) {
  std::vector<double> d;
  for (const auto& [k, v] : deltas.items()) d.push_back(v.get<double>());
  const auto c = count_deltas(d);
  os << run << ',' << source << ',' << row << ',' << c.nonneg << ',' << c.neg << '\n';
}

void check_schema_mix(const std::vector<RunInput>& runs) {
  std::map<std::string, int> seen;
  for (const auto& r : runs) {
    for (const auto& a : r.manifest.artifacts) {
      const auto [it, fresh] = seen.emplace(a.kind, a.schema_version);
      if (!fresh && it->second != a.schema_version) {
        throw ConfigError("report: mixed schema versions for '" + a.kind + "' (" + std::to_string(it->second) +
                          " and " + std::to_string(a.schema_version) + ")");
      }
    }
  }
}

void write_report(const std::vector<RunInput>& runs, Outputs& out, const std::string& dir) {
  check_schema_mix(runs);
  std::ostringstream counters, traj;
  counters << counters_header();
  traj << "run,layer,checkpoint,step,task,mean_rho,std_rho,n\n";
  json inputs = json::array();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const int k = static_cast<int>(i) + 1;
    const auto& run = runs[i];
    const std::string pre = dir + "run" + std::to_string(k) + "_";
    inputs.push_back({{"run", k}, {"pipeline", run.manifest.pipeline}, {"config_hash", run.manifest.config_hash}});
    for (const auto& a : run.manifest.artifacts) {
      const fs::path p = run.root / a.path;
      const std::string stem = fs::path(a.path).stem().string();
      if (a.kind == "sweep" || a.kind == "sweep_stage2") {
        const auto r = intervene::sweep_from_json(read_json(p));
        out.text(pre + stem + "_heatmap.csv", "heatmap_csv", 1, intervene::heatmap_csv(r));
        out.text(pre + stem + "_blocks.csv", "blocks_csv", 1, intervene::blocks_csv(intervene::report_blocks(r, 4)));
        const auto g = intervene::broad_optimum_stats(r);
        out.put(pre + stem + "_broad_optimum.json", "broad_optimum", 1, intervene::to_json(g));
        std::ostringstream h;
        h << "edge_lo_pp,edge_hi_pp,count\n";
        for (std::size_t b = 0; b < g.histogram.size(); ++b) {
          h << (b < g.edges_pp.size() ? jsonu::num(g.edges_pp[b]) : "inf") << ','
            << (b + 1 < g.edges_pp.size() ? jsonu::num(g.edges_pp[b + 1]) : "inf") << ',' << g.histogram[b] << '\n';
        }
        out.text(pre + stem + "_broad_optimum.csv", "broad_optimum_csv", 1, h.str());
        for (const auto& [layer, row] : r.cells) {
          json d = json::object();
          for (Task t : r.tasks()) d[scenes::task_name(t)] = r.best(layer, t) - r.baseline.at(t);
          counter_row(counters, k, a.kind == "sweep" ? "sweep_best" : "stage2_best", "L" + std::to_string(layer), d);
        }
      } else if (a.kind == "stack") {
        const json s = read_json(p);
        std::ostringstream t;
        t << "step,added,active_layers";
        for (const auto& [task, v] : s.at("baseline").items()) t << ",delta_pp_" << task;
        t << ",mean_delta_pp\n";
        for (const auto& st : s.at("steps")) {
          t << st.at("step").get<int>() << ",L" << st.at("added").get<int>() << ',';
          bool first = true;
          for (const auto& l : st.at("active")) {
            t << (first ? "" : " ") << 'L' << l.get<int>();
            first = false;
          }
          for (const auto& [task, v] : st.at("delta_pp").items()) t << ',' << jsonu::num(v.get<double>());
          t << ',' << jsonu::num(st.at("mean_delta_pp").get<double>()) << '\n';
          counter_row(counters, k, "stack", "step" + std::to_string(st.at("step").get<int>()), st.at("delta_pp"));
        }
        out.text(pre + "stack_table.csv", "stack_table", 1, t.str());
      } else if (a.kind == "trajectory") {
        const json j = read_json(p);
        const auto& pts = j.at("points");
        for (std::size_t c = 0; c < pts.size(); ++c) {
          for (const auto& [task, s] : pts[c].at("rho").items()) {
            traj << k << ',' << j.at("layer").get<int>() << ',' << c << ',' << pts[c].at("step").get<int>() << ','
                 << task << ',' << jsonu::num(s.at("mean").get<double>()) << ','
                 << jsonu::num(s.at("std").get<double>()) << ',' << s.at("n").get<int>() << '\n';
          }
        }
      } else if (a.kind == "ablation") {
        for (const auto& row : read_json(p).at("rows")) {
          counter_row(counters, k, "ablation", row.at("variant").get<std::string>(), row.at("delta_pp"));
        }
      } else if (a.kind == "gate_result") {
        const json j = read_json(p);
        counter_row(counters, k, "gate", "L" + std::to_string(j.at("layer").get<int>()), j.at("delta_pp"));
      }
    }
  }
  out.text(dir + "counters.csv", "counters", 1, counters.str());
  out.text(dir + "trajectories.csv", "trajectories_csv", 1, traj.str());
  out.put(dir + "summary.json", "report_summary", 1, {{"schema_version", 1}, {"kind", "report"}, {"inputs", inputs}});
}

// ---- pipelines ----

class Runner {
 public:
  Runner(const ExperimentConfig& c, Outputs& out) : c_(c), out_(out) {}

  void run(Pipeline p) {
    switch (p) {
      case Pipeline::data: write_data(); break;
      case Pipeline::backbone_build: backbone_build(); break;
      case Pipeline::backbone_train: backbone_train(); break;
      case Pipeline::backbone_eval: backbone_eval(); break;
      case Pipeline::analyze: analyze(); break;
      case Pipeline::sweep: sweep(); break;
      case Pipeline::probe: probe(); break;
      case Pipeline::gate_train: gate_train(); break;
      case Pipeline::stack: stack(); break;
      case Pipeline::ablate: ablate(); break;
      case Pipeline::full:
        write_data();
        backbone_train();
        analyze();
        sweep();
        probe();
        gate_train();
        stack();
        write_report({RunInput{RunManifest{"full", c_.seed, {}, {}, out_.artifacts(), {}, {}, {}, kToolVersion, {}},
                               out_.root()}},
                     out_, "report/");
        break;
    }
  }

 private:
  std::uint64_t derive(const char* tag, std::uint64_t i = 0) const { return Rng::derive(c_.seed, tag, i); }

  scenes::DataSpec spec(const char* split, int size) const {
    scenes::DataSpec d;
    const std::uint64_t base = c_.data.seed.value_or(derive("data"));
    d.seed = Rng::derive(base, split, 0);
    d.size = size;
    d.grid_side = c_.data.grid_side;
    d.max_objects = c_.data.max_objects;
    d.encode.noise = c_.data.noise;
    d.encode.sink_eligible_cells = c_.model.plant.vsink_cells;
    d.encode.textured_cells = c_.model.plant.lsink_cells;
    d.tasks = c_.data.tasks;
    return d;
  }

  sgt1::Dtype dtype() const { return c_.precision == "f32" ? sgt1::Dtype::f32 : sgt1::Dtype::f64; }

  std::vector<Example> make(const char* split, int size) const {
    auto v = scenes::generate_dataset(spec(split, size));
    // f32 runs see the same rounded patches they store.
    if (dtype() == sgt1::Dtype::f32) {
      for (auto& ex : v) {
        for (double& x : ex.patches.data()) x = static_cast<double>(static_cast<float>(x));
      }
    }
    return v;
  }

  const std::vector<Example>& eval() {
    if (!eval_) {
      eval_ = c_.data.manifest.empty() ? make("eval", c_.data.eval_size) : scenes::read_manifest(c_.data.manifest);
    }
    return *eval_;
  }
  const std::vector<Example>& gate_data() {
    if (!gate_) gate_ = make("gate_train", c_.data.gate_train_size);
    return *gate_;
  }
  const std::vector<Example>& bb_data() {
    if (!bbtrain_) bbtrain_ = make("backbone_train", c_.data.backbone_train_size);
    return *bbtrain_;
  }

  void write_data() {
    const std::pair<const char*, const std::vector<Example>*> splits[] = {
        {"eval", &eval()}, {"gate_train", &gate_data()}, {"backbone_train", &bb_data()}};
    for (const auto& [name, data] : splits) {
      const std::string dir = std::string("data/") + name;
      scenes::write_manifest(out_.root() / dir / "examples.jsonl", *data, dtype());
      out_.adopt(dir, "dataset", 1);
    }
  }

  backbone::Backbone built() const { return backbone::build_backbone(c_.model, derive("backbone")); }

  backbone::TrainSpec train_spec() const {
    backbone::TrainSpec t;
    t.steps = c_.backbone.train_steps;
    t.batch = c_.backbone.train_batch;
    t.lr = c_.backbone.train_lr;
    return t;
  }

  // The backbone every analysis reads: a checkpoint, or build + readout.
  const backbone::Backbone& model() {
    if (bb_) return *bb_;
    if (!c_.backbone.checkpoint.empty()) {
      bb_ = backbone::load_checkpoint(c_.backbone.checkpoint);
      if (bb_->config.L != c_.model.L || bb_->config.D != c_.model.D) {
        throw ConfigError("backbone.checkpoint: shape disagrees with model (L, D)");
      }
    } else {
      bb_ = built();
      train_report_ = backbone::train_backbone(*bb_, bb_data(), eval(), train_spec());
    }
    return *bb_;
  }

  static json eval_json(const backbone::EvalResult& r) {
    json n = json::object();
    for (const auto& [t, v] : r.count) n[scenes::task_name(t)] = v;
    return {{"accuracy", task_json(r.accuracy)}, {"count", n}, {"overall", r.overall}, {"n", r.n}};
  }

  void backbone_build() {
    const auto bb = built();
    backbone::save_checkpoint(bb, out_.root() / "backbone");
    out_.adopt("backbone", "checkpoint", 1);
  }

  void backbone_train() {
    if (!c_.backbone.checkpoint.empty()) {
      // retrain the readout of a given checkpoint
      bb_ = backbone::load_checkpoint(c_.backbone.checkpoint);
      train_report_ = backbone::train_backbone(*bb_, bb_data(), eval(), train_spec());
    }
    const auto& bb = model();
    backbone::save_checkpoint(bb, out_.root() / "backbone");
    out_.adopt("backbone", "checkpoint", 1);
    std::ostringstream loss;
    loss << "step,loss\n";
    for (std::size_t s = 0; s < train_report_->loss.size(); ++s) loss << s << ',' << jsonu::num(train_report_->loss[s]) << '\n';
    out_.text("backbone_report/loss.csv", "train_loss", 1, loss.str());
    out_.put("backbone_report/train.json", "backbone_train", 1,
             {{"schema_version", 1},
              {"kind", "backbone_train"},
              {"steps", train_report_->loss.size()},
              {"final_loss", train_report_->loss.empty() ? json(nullptr) : json(train_report_->loss.back())},
              {"heldout", eval_json(train_report_->heldout)},
              {"weights_hash", jsonu::hex64(backbone::weights_hash(bb))}});
  }

  void backbone_eval() {
    const auto& bb = model();
    out_.put("eval/eval.json", "backbone_eval", 1,
             {{"schema_version", 1}, {"kind", "backbone_eval"}, {"result", eval_json(backbone::evaluate(bb, eval()))}});
  }

  void analyze() {
    sinkid::SalienceProfile prof;
    if (!c_.analyze.traces.empty()) {
      prof = sinkid::analyze_traces(c_.analyze.traces);
    } else {
      const auto& bb = model();
      const auto& data = eval();
      std::vector<backbone::RunTrace> traces(data.size());
      std::vector<sinkid::TokenPartition> parts(data.size());
      parallel_for(data.size(), c_.workers, [&](std::size_t i) {
        backbone::ForwardOptions o;
        o.capture = true;
        traces[i] = backbone::forward(bb, data[i], o);
        parts[i] = sinkid::partition_tokens(traces[i], bb.config);
        parts[i].check();
      });
      prof = sinkid::salience_profile(traces, parts);
      std::ostringstream lines;
      for (std::size_t i = 0; i < data.size(); ++i) {
        json row = sinkid::to_json(parts[i]);
        row["id"] = data[i].id;
        lines << row.dump() << '\n';
      }
      out_.text("analyze/partitions.jsonl", "partitions", 1, lines.str());
      const int dump = std::min<int>(c_.analyze.dump_traces, static_cast<int>(data.size()));
      for (int i = 0; i < dump; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "analyze/traces/%06d", i);
        backbone::write_trace(out_.root() / name, traces[static_cast<std::size_t>(i)],
                              backbone::SinkConfig::of(bb.config), dtype());
        out_.adopt(name, "trace", 1);
      }
    }
    out_.put("analyze/profile.json", "salience_profile", 1, sinkid::to_json(prof));
    out_.text("analyze/profile.csv", "salience_csv", 1, sinkid::to_csv(prof));
  }

  std::vector<int> sweep_layers() const {
    if (!c_.sweep.layers.empty()) return c_.sweep.layers;
    std::vector<int> all;
    for (int l = 0; l < c_.model.L; ++l) all.push_back(l);
    return all;
  }

  void sweep() {
    const auto& bb = model();
    const intervene::SweepContext ctx(bb, eval(), {}, c_.workers);
    auto r = intervene::sweep_layers(ctx, sweep_layers());
    r.seed = c_.seed;
    out_.put("sweep/sweep.json", "sweep", intervene::kSweepSchema, intervene::to_json(r));
    out_.text("sweep/heatmap.csv", "heatmap_csv", 1, intervene::heatmap_csv(r));
    out_.text("sweep/best.csv", "best_csv", 1, intervene::best_csv(r));
    const auto blocks = intervene::report_blocks(r, c_.sweep.block);
    out_.put("sweep/blocks.json", "blocks", 1, intervene::to_json(blocks));
    out_.text("sweep/blocks.csv", "blocks_csv", 1, intervene::blocks_csv(blocks));
    out_.put("sweep/broad_optimum.json", "broad_optimum", 1, intervene::to_json(intervene::broad_optimum_stats(r)));
    if (c_.sweep.stage2_vsink) {
      json gains = json::object();
      for (int l : sweep_layers()) {
        auto s2 = intervene::sweep_stage2(ctx, l, *c_.sweep.stage2_vsink);
        s2.seed = c_.seed;
        const std::string name = "sweep/stage2_L" + std::to_string(l);
        out_.put(name + ".json", "sweep_stage2", intervene::kSweepSchema, intervene::to_json(s2));
        out_.text(name + "_heatmap.csv", "heatmap_csv", 1, intervene::heatmap_csv(s2));
        gains[std::to_string(l)] = task_json(intervene::additional_gain(r, s2), 100.0);
      }
      out_.put("sweep/stage2_gain.json", "stage2_gain", 1,
               {{"schema_version", 1}, {"kind", "stage2_gain"}, {"fixed_vsink", *c_.sweep.stage2_vsink},
                {"gain_pp", gains}});
    }
  }

  void probe() {
    probes::CurveSpec spec;
    spec.tasks.clear();
    for (const auto& t : c_.probe.tasks) spec.tasks.push_back(probes::parse_probe_task(t));
    spec.hyper.steps = c_.probe.steps;
    spec.hyper.lr = c_.probe.lr;
    spec.hyper.l2 = c_.probe.l2;
    spec.hyper.test_frac = c_.probe.test_frac;
    spec.hyper.seed = derive("probe");
    spec.with_permuted = c_.probe.permuted;
    spec.workers = c_.workers;
    const auto rows = probes::probe_curves(eval(), model(), spec);
    out_.text("probe/curves.csv", "probe_curves_csv", 1, probes::curves_csv(rows));
    out_.put("probe/curves.json", "probe_curves", 1, probes::to_json(rows));
  }

  lsg::GateSpec gate_spec() const {
    lsg::GateSpec s;
    s.group_mode = lsg::parse_group_mode(c_.gate.group_mode);
    s.signal = lsg::parse_signal_kind(c_.gate.signal);
    s.hidden = c_.gate.hidden;
    return s;
  }

  lsg::TrainHyper hyper() const {
    lsg::TrainHyper h;
    h.lr = c_.gate.lr;
    h.batch = c_.gate.batch;
    h.epochs = c_.gate.epochs;
    h.seed = derive("gate");
    h.checkpoints = c_.gate.checkpoints;
    h.workers = c_.workers;
    return h;
  }

  static std::string gate_dir(int layer) { return "gates/gate_L" + std::to_string(layer); }

  const std::map<int, lsg::GateModule>& gates() {
    if (!gates_.empty()) return gates_;
    if (!c_.gate.checkpoints_dir.empty()) {
      for (int l : c_.gate.layers) {
        gates_.emplace(l, lsg::load_gate(fs::path(c_.gate.checkpoints_dir) / ("gate_L" + std::to_string(l))));
      }
      return gates_;
    }
    const auto& bb = model();
    const std::string before = backbone::serialize(bb);
    const auto base = backbone::evaluate(bb, eval());
    for (int l : c_.gate.layers) {
      const auto g0 = lsg::init_gate(bb.config.D, l, gate_spec(), derive("gate-init", static_cast<std::uint64_t>(l + 1)));
      auto r = lsg::train_gate(bb, g0, gate_data(), eval(), hyper());
      if (!r.backbone_unchanged) throw InvariantError("gate training modified the backbone");
      const auto& g = r.gates.gates.at(l);
      lsg::save_gate(g, out_.root() / gate_dir(l));
      out_.adopt(gate_dir(l), "gate", 1);
      const std::string tr = "gates/trajectory_L" + std::to_string(l);
      out_.put(tr + ".json", "trajectory", 1, lsg::to_json(r.trajectories.at(0)));
      out_.text(tr + ".csv", "trajectory_csv", 1, lsg::trajectory_csv(r.trajectories));
      const auto acc = lsg::evaluate_gates(bb, r.gates, eval(), c_.workers);
      std::map<Task, double> delta;
      for (const auto& [t, a] : acc.accuracy) delta[t] = a - base.accuracy.at(t);
      out_.put("gates/result_L" + std::to_string(l) + ".json", "gate_result", 1,
               {{"schema_version", 1},
                {"kind", "gate_result"},
                {"layer", l},
                {"loss", r.loss},
                {"baseline", task_json(base.accuracy)},
                {"accuracy", task_json(acc.accuracy)},
                {"delta_pp", task_json(delta, 100.0)},
                {"gate_hash", jsonu::hex64(lsg::gate_hash(g))},
                {"backbone_unchanged", r.backbone_unchanged}});
      gates_.emplace(l, g);
    }
    if (backbone::serialize(bb) != before) throw InvariantError("backbone changed during gate training");
    return gates_;
  }

  void gate_train() { gates(); }

  void stack() {
    const auto& trained = gates();
    const int steps = c_.gate.stack_steps == 0 ? static_cast<int>(trained.size()) : c_.gate.stack_steps;
    const auto rep = lsg::greedy_stack(model(), trained, eval(), steps, c_.workers);
    for (const auto& [l, g] : rep.final.gates) {
      if (lsg::gate_hash(g) != lsg::gate_hash(trained.at(l))) throw InvariantError("stacked gate differs from checkpoint");
    }
    out_.put("stack/stack.json", "stack", 1, lsg::to_json(rep));
    out_.text("stack/stack.csv", "stack_csv", 1, lsg::stack_csv(rep));
  }

  void ablate() {
    const int layer = c_.gate.ablate_layer == -2 ? c_.gate.layers.front() : c_.gate.ablate_layer;
    auto variants = lsg::ablation_variants();
    for (auto& v : variants) v.hidden = c_.gate.hidden;
    const auto rows = lsg::ablate(model(), layer, variants, gate_data(), eval(), hyper());
    out_.put("ablate/ablation.json", "ablation", 1,
             {{"schema_version", 1}, {"kind", "ablation"}, {"layer", layer}, {"rows", lsg::to_json(rows)}});
    out_.text("ablate/ablation.csv", "ablation_csv", 1, lsg::ablation_csv(rows));
  }

  const ExperimentConfig& c_;
  Outputs& out_;
  std::optional<std::vector<Example>> eval_, gate_, bbtrain_;
  std::optional<backbone::Backbone> bb_;
  std::optional<backbone::TrainReport> train_report_;
  std::map<int, lsg::GateModule> gates_;
};

}  // namespace

json to_json(const RunManifest& m) {
  json arts = json::array();
  for (const auto& a : m.artifacts) {
    arts.push_back({{"path", a.path}, {"kind", a.kind}, {"schema_version", a.schema_version}, {"hash", a.hash}});
  }
  json j = {{"schema_version", kManifestSchema},
            {"kind", "run_manifest"},
            {"pipeline", m.pipeline},
            {"seed", m.seed},
            {"config_hash", m.config_hash},
            {"config", m.config},
            {"artifacts", arts},
            {"schemas", m.schemas},
            {"started", m.started},
            {"finished", m.finished},
            {"tool_version", m.tool_version}};
  if (!m.inputs.empty()) j["inputs"] = m.inputs;
  return j;
}

RunManifest manifest_from_json(const json& j) {
  const std::string w = "manifest";
  jsonu::require_only(j,
                      {"schema_version", "kind", "pipeline", "seed", "config_hash", "config", "artifacts", "schemas",
                       "started", "finished", "tool_version", "inputs"},
                      w);
  if (jsonu::get_or(j, "schema_version", 0, w) != kManifestSchema) {
    throw ConfigError("manifest: unsupported schema_version");
  }
  if (jsonu::get_or<std::string>(j, "kind", "", w) != "run_manifest") throw ConfigError("manifest: kind must be run_manifest");
  RunManifest m;
  m.pipeline = jsonu::get_or<std::string>(j, "pipeline", "", w);
  m.seed = jsonu::get_or<std::uint64_t>(j, "seed", 0, w);
  m.config_hash = jsonu::get_or<std::string>(j, "config_hash", "", w);
  m.config = j.value("config", json::object());
  if (!j.contains("artifacts") || !j.at("artifacts").is_array()) throw ConfigError("manifest: artifacts missing");
  for (const auto& a : j.at("artifacts")) {
    jsonu::require_only(a, {"path", "kind", "schema_version", "hash"}, "manifest.artifacts");
    m.artifacts.push_back({jsonu::get_or<std::string>(a, "path", "", w), jsonu::get_or<std::string>(a, "kind", "", w),
                           jsonu::get_or(a, "schema_version", 0, w), jsonu::get_or<std::string>(a, "hash", "", w)});
  }
  m.schemas = jsonu::get_or(j, "schemas", m.schemas, w);
  m.started = jsonu::get_or<std::string>(j, "started", "", w);
  m.finished = jsonu::get_or<std::string>(j, "finished", "", w);
  m.tool_version = jsonu::get_or<std::string>(j, "tool_version", "", w);
  m.inputs = jsonu::get_or(j, "inputs", m.inputs, w);
  return m;
}

RunManifest read_manifest(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
  if (!fs::exists(file)) throw IoError("no run manifest at " + path.string());
  return manifest_from_json(read_json(file));
}

void check_manifest(const RunManifest& m, const fs::path& run_dir) {
  if (jsonu::hex64(jsonu::hash(m.config)) != m.config_hash) throw InvariantError("manifest: config hash mismatch");
  if (m.pipeline != "report") {
    const ExperimentConfig c = config_from_json(m.config);
    if (to_json(c, false) != m.config) throw InvariantError("manifest: config does not re-serialize to itself");
  }
  std::set<std::string> seen;
  for (const auto& a : m.artifacts) {
    if (!seen.insert(a.path).second) throw InvariantError("manifest: " + a.path + " listed twice");
    const fs::path p = run_dir / a.path;
    if (!fs::exists(p)) throw InvariantError("manifest: missing artifact " + a.path);
    if (file_hash(p) != a.hash) throw InvariantError("manifest: hash mismatch for " + a.path);
    if (m.schemas.count(a.kind) == 0 || m.schemas.at(a.kind) != a.schema_version) {
      throw InvariantError("manifest: schema table disagrees for " + a.kind);
    }
  }
}

RunManifest run(const ExperimentConfig& config) {
  validate(config);
  const fs::path root = config.output;
  prepare_output(root);
  RunManifest m;
  m.started = now_utc();
  m.pipeline = pipeline_name(config.pipeline);
  m.seed = config.seed;
  m.config = to_json(config, false);
  m.config_hash = config_hash(config);
  Outputs out(root);
  Runner(config, out).run(config.pipeline);
  m.artifacts = out.artifacts();
  m.schemas = schemas_of(m.artifacts);
  m.finished = now_utc();
  std::ofstream(root / "manifest.json", std::ios::binary) << jsonu::dump(to_json(m));
  return m;
}

DeltaCounter count_deltas(const std::vector<double>& deltas) {
  DeltaCounter c;
  for (double d : deltas) {
    if (!std::isfinite(d)) throw NumericError("count_deltas: non-finite delta");
    (d >= 0.0 ? c.nonneg : c.neg) += 1;
  }
  return c;
}

RunManifest report(const std::vector<fs::path>& manifests, const fs::path& outdir) {
  if (manifests.empty()) throw ConfigError("report: no input manifests");
  std::vector<RunInput> runs;
  RunManifest m;
  m.started = now_utc();
  m.pipeline = "report";
  json hashes = json::array();
  for (const auto& p : manifests) {
    RunInput r{read_manifest(p), fs::is_directory(p) ? p : p.parent_path()};
    check_manifest(r.manifest, r.root);
    hashes.push_back(r.manifest.config_hash);
    m.inputs.push_back(r.manifest.pipeline + ":" + r.manifest.config_hash);
    runs.push_back(std::move(r));
  }
  check_schema_mix(runs);
  prepare_output(outdir);
  Outputs out(outdir);
  write_report(runs, out, "");
  m.config = {{"report_inputs", hashes}};
  m.config_hash = jsonu::hex64(jsonu::hash(m.config));
  m.artifacts = out.artifacts();
  m.schemas = schemas_of(m.artifacts);
  m.finished = now_utc();
  std::ofstream(outdir / "manifest.json", std::ios::binary) << jsonu::dump(to_json(m));
  return m;
}

}  // namespace sinkgate::cli
