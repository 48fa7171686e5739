#include <cmath>
#include <fstream>
#include <set>

#include "sinkgate/cli/experiment.hpp"
#include "sinkgate/common/json_util.hpp"
#include "sinkgate/lsg/lsg.hpp"
#include "sinkgate/numerics/error.hpp"
#include "sinkgate/probes/probes.hpp"

namespace sinkgate::cli {

using nlohmann::json;
using jsonu::get_or;

namespace {

constexpr std::array<std::pair<Pipeline, const char*>, 11> kPipelines{{
    {Pipeline::data, "data"},
    {Pipeline::backbone_build, "backbone-build"},
    {Pipeline::backbone_train, "backbone-train"},
    {Pipeline::backbone_eval, "backbone-eval"},
    {Pipeline::analyze, "analyze"},
    {Pipeline::sweep, "sweep"},
    {Pipeline::probe, "probe"},
    {Pipeline::gate_train, "gate-train"},
    {Pipeline::stack, "stack"},
    {Pipeline::ablate, "ablate"},
    {Pipeline::full, "full"},
}};

[[noreturn]] void fail(const std::string& field, const std::string& why) { throw ConfigError(field + ": " + why); }

}  // namespace

const char* pipeline_name(Pipeline p) {
  for (const auto& [k, name] : kPipelines) {
    if (k == p) return name;
  }
  return "?";
}

Pipeline parse_pipeline(const std::string& s) {
  for (const auto& [k, name] : kPipelines) {
    if (s == name) return k;
  }
  throw ConfigError("pipeline: unknown value '" + s + "'");
}

void validate(const ExperimentConfig& c) {
  backbone::validate(c.model);
  const auto& d = c.data;
  if (d.eval_size < 1) fail("data.eval_size", "must be >= 1");
  if (d.gate_train_size < 1) fail("data.gate_train_size", "must be >= 1");
  if (d.backbone_train_size < 1) fail("data.backbone_train_size", "must be >= 1");
  if (d.grid_side * d.grid_side != c.model.n) fail("data.grid_side", "grid_side^2 must equal model.n");
  if (d.max_objects < 0 || d.max_objects > c.model.n) fail("data.max_objects", "must be in [0, n]");
  if (!(d.noise >= 0) || !std::isfinite(d.noise)) fail("data.noise", "must be >= 0");
  if (d.tasks.empty()) fail("data.tasks", "must not be empty");
  std::set<scenes::Task> seen(d.tasks.begin(), d.tasks.end());
  if (seen.size() != d.tasks.size()) fail("data.tasks", "duplicate task");

  const auto& b = c.backbone;
  if (b.train_steps < 0) fail("backbone.train_steps", "must be >= 0");
  if (b.train_batch < 1) fail("backbone.train_batch", "must be >= 1");
  if (!(b.train_lr > 0)) fail("backbone.train_lr", "must be > 0");

  if (c.analyze.dump_traces < 0) fail("analyze.dump_traces", "must be >= 0");

  for (int l : c.sweep.layers) {
    if (l < 0 || l >= c.model.L) fail("sweep.layers", "layer " + std::to_string(l) + " outside [0, L)");
  }
  if (c.sweep.block < 1) fail("sweep.block", "must be >= 1");
  if (c.sweep.stage2_vsink && !(*c.sweep.stage2_vsink >= 0 && *c.sweep.stage2_vsink <= 1)) {
    fail("sweep.stage2_vsink", "must be in [0, 1]");
  }

  const auto& p = c.probe;
  if (p.tasks.empty()) fail("probe.tasks", "must not be empty");
  for (const auto& t : p.tasks) {
    try {
      probes::parse_probe_task(t);
    } catch (const ConfigError&) {
      fail("probe.tasks", "unknown task '" + t + "'");
    }
  }
  if (p.steps < 0) fail("probe.steps", "must be >= 0");
  if (!(p.lr > 0)) fail("probe.lr", "must be > 0");
  if (!(p.l2 >= 0)) fail("probe.l2", "must be >= 0");
  if (!(p.test_frac > 0 && p.test_frac < 1)) fail("probe.test_frac", "must be in (0, 1)");

  const auto& g = c.gate;
  if (g.layers.empty()) fail("gate.layers", "must not be empty");
  std::set<int> gl;
  for (int l : g.layers) {
    if (l < -1 || l > c.model.L - 2) fail("gate.layers", "layer " + std::to_string(l) + " outside [-1, L-2]");
    if (!gl.insert(l).second) fail("gate.layers", "duplicate layer " + std::to_string(l));
  }
  try {
    lsg::parse_group_mode(g.group_mode);
  } catch (const ConfigError&) {
    fail("gate.group_mode", "unknown value '" + g.group_mode + "'");
  }
  try {
    lsg::parse_signal_kind(g.signal);
  } catch (const ConfigError&) {
    fail("gate.signal", "unknown value '" + g.signal + "'");
  }
  if (g.hidden < 1) fail("gate.hidden", "must be >= 1");
  if (!(g.lr > 0)) fail("gate.lr", "must be > 0");
  if (g.batch < 1) fail("gate.batch", "must be >= 1");
  if (g.epochs < 0) fail("gate.epochs", "must be >= 0");
  if (g.checkpoints < 1) fail("gate.checkpoints", "must be >= 1");
  if (g.stack_steps < 0 || g.stack_steps > static_cast<int>(g.layers.size())) {
    fail("gate.stack_steps", "must be in [0, number of gate layers]");
  }
  if (g.ablate_layer != -2 && (g.ablate_layer < -1 || g.ablate_layer > c.model.L - 2)) {
    fail("gate.ablate_layer", "outside [-1, L-2]");
  }

  if (c.output.empty()) fail("output", "must not be empty");
  if (c.workers < 1) fail("workers", "must be >= 1");
  if (c.precision != "f64" && c.precision != "f32") fail("precision", "must be f32 or f64");
}

json to_json(const ExperimentConfig& c, bool runtime) {
  json tasks = json::array();
  for (auto t : c.data.tasks) tasks.push_back(scenes::task_name(t));
  json data = {{"eval_size", c.data.eval_size},
               {"gate_train_size", c.data.gate_train_size},
               {"backbone_train_size", c.data.backbone_train_size},
               {"grid_side", c.data.grid_side},
               {"max_objects", c.data.max_objects},
               {"noise", c.data.noise},
               {"tasks", tasks}};
  if (c.data.seed) data["seed"] = *c.data.seed;
  if (!c.data.manifest.empty()) data["manifest"] = c.data.manifest;
  json bb = {{"train_steps", c.backbone.train_steps},
             {"train_batch", c.backbone.train_batch},
             {"train_lr", c.backbone.train_lr}};
  if (!c.backbone.checkpoint.empty()) bb["checkpoint"] = c.backbone.checkpoint;
  json analyze = {{"dump_traces", c.analyze.dump_traces}};
  if (!c.analyze.traces.empty()) analyze["traces"] = c.analyze.traces;
  json sweep = {{"layers", c.sweep.layers}, {"block", c.sweep.block}};
  if (c.sweep.stage2_vsink) sweep["stage2_vsink"] = *c.sweep.stage2_vsink;
  json probe = {{"tasks", c.probe.tasks},         {"steps", c.probe.steps},
                {"lr", c.probe.lr},               {"l2", c.probe.l2},
                {"test_frac", c.probe.test_frac}, {"permuted", c.probe.permuted}};
  json gate = {{"layers", c.gate.layers},       {"group_mode", c.gate.group_mode},
               {"signal", c.gate.signal},       {"hidden", c.gate.hidden},
               {"lr", c.gate.lr},               {"batch", c.gate.batch},
               {"epochs", c.gate.epochs},       {"checkpoints", c.gate.checkpoints},
               {"stack_steps", c.gate.stack_steps}, {"ablate_layer", c.gate.ablate_layer}};
  if (!c.gate.checkpoints_dir.empty()) gate["checkpoints_dir"] = c.gate.checkpoints_dir;
  json j = {{"schema_version", kConfigSchema},
            {"seed", c.seed},
            {"pipeline", pipeline_name(c.pipeline)},
            {"model", backbone::to_json(c.model)},
            {"data", data},
            {"backbone", bb},
            {"analyze", analyze},
            {"sweep", sweep},
            {"probe", probe},
            {"gate", gate},
            {"precision", c.precision}};
  if (runtime) {
    j["output"] = c.output;
    j["workers"] = c.workers;
  }
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  jsonu::require_only(j,
                      {"schema_version", "seed", "pipeline", "model", "data", "backbone", "analyze", "sweep", "probe",
                       "gate", "output", "workers", "precision"},
                      "config");
  if (!j.contains("schema_version")) fail("schema_version", "required");
  if (!j.at("schema_version").is_number_integer() || j.at("schema_version").get<int>() != kConfigSchema) {
    fail("schema_version", "unsupported (expected " + std::to_string(kConfigSchema) + ")");
  }
  ExperimentConfig c;
  c.seed = get_or(j, "seed", c.seed, "config");
  if (j.contains("pipeline")) c.pipeline = parse_pipeline(get_or<std::string>(j, "pipeline", "", "config"));
  if (j.contains("model")) {
    try {
      c.model = backbone::model_config_from_json(j.at("model"));
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      throw ConfigError(msg.rfind("model", 0) == 0 ? msg : "model." + msg);
    }
  }
  if (j.contains("data")) {
    const json& d = j.at("data");
    const std::string w = "data";
    jsonu::require_only(d,
                        {"seed", "eval_size", "gate_train_size", "backbone_train_size", "grid_side", "max_objects",
                         "noise", "tasks", "manifest"},
                        w);
    if (d.contains("seed")) c.data.seed = get_or<std::uint64_t>(d, "seed", 0, w);
    c.data.eval_size = get_or(d, "eval_size", c.data.eval_size, w);
    c.data.gate_train_size = get_or(d, "gate_train_size", c.data.gate_train_size, w);
    c.data.backbone_train_size = get_or(d, "backbone_train_size", c.data.backbone_train_size, w);
    c.data.grid_side = get_or(d, "grid_side", c.data.grid_side, w);
    c.data.max_objects = get_or(d, "max_objects", c.data.max_objects, w);
    c.data.noise = get_or(d, "noise", c.data.noise, w);
    c.data.manifest = get_or(d, "manifest", c.data.manifest, w);
    if (d.contains("tasks")) {
      c.data.tasks.clear();
      for (const auto& t : get_or<std::vector<std::string>>(d, "tasks", {}, w)) {
        try {
          c.data.tasks.push_back(scenes::parse_task(t));
        } catch (const ConfigError&) {
          fail("data.tasks", "unknown task '" + t + "'");
        }
      }
    }
  }
  if (j.contains("backbone")) {
    const json& b = j.at("backbone");
    const std::string w = "backbone";
    jsonu::require_only(b, {"checkpoint", "train_steps", "train_batch", "train_lr"}, w);
    c.backbone.checkpoint = get_or(b, "checkpoint", c.backbone.checkpoint, w);
    c.backbone.train_steps = get_or(b, "train_steps", c.backbone.train_steps, w);
    c.backbone.train_batch = get_or(b, "train_batch", c.backbone.train_batch, w);
    c.backbone.train_lr = get_or(b, "train_lr", c.backbone.train_lr, w);
  }
  if (j.contains("analyze")) {
    const json& a = j.at("analyze");
    jsonu::require_only(a, {"dump_traces", "traces"}, "analyze");
    c.analyze.dump_traces = get_or(a, "dump_traces", c.analyze.dump_traces, "analyze");
    c.analyze.traces = get_or(a, "traces", c.analyze.traces, "analyze");
  }
  if (j.contains("sweep")) {
    const json& s = j.at("sweep");
    jsonu::require_only(s, {"layers", "block", "stage2_vsink"}, "sweep");
    c.sweep.layers = get_or(s, "layers", c.sweep.layers, "sweep");
    c.sweep.block = get_or(s, "block", c.sweep.block, "sweep");
    if (s.contains("stage2_vsink")) c.sweep.stage2_vsink = get_or(s, "stage2_vsink", 0.0, "sweep");
  }
  if (j.contains("probe")) {
    const json& p = j.at("probe");
    const std::string w = "probe";
    jsonu::require_only(p, {"tasks", "steps", "lr", "l2", "test_frac", "permuted"}, w);
    c.probe.tasks = get_or(p, "tasks", c.probe.tasks, w);
    c.probe.steps = get_or(p, "steps", c.probe.steps, w);
    c.probe.lr = get_or(p, "lr", c.probe.lr, w);
    c.probe.l2 = get_or(p, "l2", c.probe.l2, w);
    c.probe.test_frac = get_or(p, "test_frac", c.probe.test_frac, w);
    c.probe.permuted = get_or(p, "permuted", c.probe.permuted, w);
  }
  if (j.contains("gate")) {
    const json& g = j.at("gate");
    const std::string w = "gate";
    jsonu::require_only(g,
                        {"layers", "group_mode", "signal", "hidden", "lr", "batch", "epochs", "checkpoints",
                         "stack_steps", "ablate_layer", "checkpoints_dir"},
                        w);
    c.gate.layers = get_or(g, "layers", c.gate.layers, w);
    c.gate.group_mode = get_or(g, "group_mode", c.gate.group_mode, w);
    c.gate.signal = get_or(g, "signal", c.gate.signal, w);
    c.gate.hidden = get_or(g, "hidden", c.gate.hidden, w);
    c.gate.lr = get_or(g, "lr", c.gate.lr, w);
    c.gate.batch = get_or(g, "batch", c.gate.batch, w);
    c.gate.epochs = get_or(g, "epochs", c.gate.epochs, w);
    c.gate.checkpoints = get_or(g, "checkpoints", c.gate.checkpoints, w);
    c.gate.stack_steps = get_or(g, "stack_steps", c.gate.stack_steps, w);
    c.gate.ablate_layer = get_or(g, "ablate_layer", c.gate.ablate_layer, w);
    c.gate.checkpoints_dir = get_or(g, "checkpoints_dir", c.gate.checkpoints_dir, w);
  }
  c.output = get_or(j, "output", c.output, "config");
  c.workers = get_or(j, "workers", c.workers, "config");
  c.precision = get_or(j, "precision", c.precision, "config");
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const ExperimentConfig& c) { return jsonu::hex64(jsonu::hash(to_json(c, false))); }

}  // namespace sinkgate::cli
