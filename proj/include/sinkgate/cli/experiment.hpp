#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sinkgate/backbone/config.hpp"
#include "sinkgate/scenes/scene.hpp"

namespace sinkgate::cli {

inline constexpr int kConfigSchema = 1;
inline constexpr int kManifestSchema = 1;
inline constexpr const char* kToolVersion = "0.1.0";

enum class Pipeline {
  data,
  backbone_build,
  backbone_train,
  backbone_eval,
  analyze,
  sweep,
  probe,
  gate_train,
  stack,
  ablate,
  full,
};
const char* pipeline_name(Pipeline p);
Pipeline parse_pipeline(const std::string& s);

struct DataConfig {
  std::optional<std::uint64_t> seed;  // unset: derived from the run seed
  int eval_size = 300;
  int gate_train_size = 400;
  int backbone_train_size = 600;
  int grid_side = 4;
  int max_objects = 6;
  double noise = 0.05;
  std::vector<scenes::Task> tasks{scenes::kAllTasks.begin(), scenes::kAllTasks.end()};
  std::string manifest;  // eval split read from here instead of generated
};

struct BackboneConfig {
  std::string checkpoint;  // load instead of build + readout training
  int train_steps = 600;
  int train_batch = 64;
  double train_lr = 0.02;
};

struct AnalyzeConfig {
  int dump_traces = 0;  // first k eval traces written under traces/
  std::string traces;   // analyze these trace directories instead of running the model
};

struct SweepConfig {
  std::vector<int> layers;  // empty: every layer
  int block = 4;
  std::optional<double> stage2_vsink;  // run the 3-group stage at each layer too
};

struct ProbeConfig {
  std::vector<std::string> tasks{"count", "size", "color", "shape"};
  int steps = 500;
  double lr = 0.1;
  double l2 = 1e-4;
  double test_frac = 0.3;
  bool permuted = true;
};

struct GateConfig {
  std::vector<int> layers{2};
  std::string group_mode = "vsink_vs_rest";
  std::string signal = "last_token";
  int hidden = 16;
  double lr = 1e-3;
  int batch = 16;
  int epochs = 2;
  int checkpoints = 10;
  int stack_steps = 0;       // 0: every trained layer
  int ablate_layer = -2;     // -2: first entry of `layers`
  std::string checkpoints_dir;  // stack: load gate_L<l> from here instead of training
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  Pipeline pipeline = Pipeline::full;
  backbone::ModelConfig model;
  DataConfig data;
  BackboneConfig backbone;
  AnalyzeConfig analyze;
  SweepConfig sweep;
  ProbeConfig probe;
  GateConfig gate;
  std::string output = "runs/default";
  int workers = 1;
  std::string precision = "f64";
};

// Throws ConfigError naming the offending field.
void validate(const ExperimentConfig& c);
// `runtime` adds output and workers, which never change numeric results and
// are left out of the config hash.
nlohmann::json to_json(const ExperimentConfig& c, bool runtime = true);
// Strict: schema_version is required and unknown keys are rejected at every
// level. Missing keys keep their defaults.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_hash(const ExperimentConfig& c);

struct Artifact {
  std::string path;  // relative to the run directory
  std::string kind;
  int schema_version = 1;
  std::string hash;  // FNV-1a of the file bytes
  bool operator==(const Artifact&) const = default;
};

struct RunManifest {
  std::string pipeline;
  std::uint64_t seed = 0;
  std::string config_hash;
  nlohmann::json config;  // without runtime fields
  std::vector<Artifact> artifacts;  // sorted by path
  std::map<std::string, int> schemas;
  std::string started, finished;  // UTC, ISO 8601
  std::string tool_version = kToolVersion;
  std::vector<std::string> inputs;  // report: source manifests
};

nlohmann::json to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);
// Accepts a manifest file or a run directory holding manifest.json.
RunManifest read_manifest(const std::filesystem::path& path);
// Config hash matches the embedded config, every listed file exists with its
// recorded hash, and no artifact is listed twice. InvariantError otherwise.
void check_manifest(const RunManifest& m, const std::filesystem::path& run_dir);

// Executes config.pipeline and writes <output>/manifest.json.
RunManifest run(const ExperimentConfig& config);

// Sub-tasks with non-negative / negative delta.
struct DeltaCounter {
  int nonneg = 0;
  int neg = 0;
};
DeltaCounter count_deltas(const std::vector<double>& deltas);

// Consolidated tables from finished runs: heatmaps, block tables,
// broad-optimum histograms, stack tables, trajectories and delta counters.
// Throws ConfigError when the inputs disagree on a schema version.
RunManifest report(const std::vector<std::filesystem::path>& manifests, const std::filesystem::path& out);

}  // namespace sinkgate::cli
