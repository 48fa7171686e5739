#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "sinkgate/backbone/train.hpp"
#include "sinkgate/sinkid/sinkid.hpp"

namespace sinkgate::intervene {

using scenes::Task;
using TaskAccuracy = std::map<Task, double>;

// Per-group key coefficients. Two-group plans set lsink == ordinary.
struct GateCoefficients {
  double vsink = 1.0;
  double lsink = 1.0;
  double ordinary = 1.0;

  static GateCoefficients two_group(double vsink, double rest) { return {vsink, rest, rest}; }
  double of(sinkid::Group g) const;
  void validate() const;  // finite and >= 0, ConfigError otherwise
  bool operator==(const GateCoefficients&) const = default;
};

// (k/10, 1 - k/10) for k = 0..10. Unit scaling is not a grid point; the
// baseline is always evaluated on its own.
std::vector<GateCoefficients> stage1_grid();
// lsink-major 11 x 11 grid over (lsink, ordinary) with vsink pinned.
std::vector<GateCoefficients> stage2_grid(double fixed_vsink);

// Key plan touching `layer` only. Keys at a layer come from its input state,
// so the L-sink set is the one found on H^{layer-1}; layer 0 reads the
// embeddings, where no L-sink set is tracked.
backbone::KeyScalePlan apply_coefficients(const sinkid::TokenPartition& partition, const GateCoefficients& coeffs,
                                          int layer);

using PartitionFn = std::function<sinkid::TokenPartition(const backbone::RunTrace&)>;

// Baseline pass shared by every sweep cell: per-example hidden states (so a
// cell at layer l resumes from H^{l-1}), partitions and baseline accuracy.
class SweepContext {
 public:
  SweepContext(const backbone::Backbone& bb, const std::vector<scenes::Example>& data, PartitionFn partition = {},
               int workers = 1);

  backbone::EvalResult evaluate(int layer, const GateCoefficients& coeffs) const;
  const backbone::EvalResult& baseline() const { return baseline_; }
  const std::vector<sinkid::TokenPartition>& partitions() const { return partitions_; }
  const std::vector<scenes::Example>& data() const { return data_; }
  const backbone::Backbone& backbone() const { return bb_; }
  int workers() const { return workers_; }

 private:
  const backbone::Backbone& bb_;
  const std::vector<scenes::Example>& data_;
  std::vector<std::vector<Tensor>> hidden_;
  std::vector<sinkid::TokenPartition> partitions_;
  backbone::EvalResult baseline_;
  int workers_;
};

struct SweepResult {
  std::string mode = "2group";  // or "3group"
  double fixed_vsink = 0.0;     // 3group only
  std::vector<GateCoefficients> grid;
  // layer -> one per-task accuracy map per grid point
  std::map<int, std::vector<TaskAccuracy>> cells;
  TaskAccuracy baseline;
  std::uint64_t seed = 0;
  std::string dataset_id;

  std::vector<Task> tasks() const;
  // Best grid index for (layer, task); ties go to the lowest index, i.e. the
  // lowest vsink coefficient in stage 1.
  std::size_t best_index(int layer, Task task) const;
  double best(int layer, Task task) const;
  void check() const;  // grid complete, accuracies in [0, 1]
};

SweepResult sweep_layer(const SweepContext& ctx, int layer);
SweepResult sweep_layers(const SweepContext& ctx, const std::vector<int>& layers);
SweepResult sweep_stage2(const SweepContext& ctx, int layer, double fixed_vsink);
// Convenience form building its own context.
SweepResult sweep_layer(const backbone::Backbone& bb, const std::vector<scenes::Example>& data,
                        const PartitionFn& partition, int layer);

// best(stage2) - best(stage1) per task at the stage-2 layer.
TaskAccuracy additional_gain(const SweepResult& stage1, const SweepResult& stage2);

struct BlockBest {
  int block = 0;
  int first_layer = 0, last_layer = 0;
  Task task = Task::global_count;
  int layer = 0;
  GateCoefficients coeffs;
  double accuracy = 0.0;
  double delta = 0.0;  // vs baseline, as a fraction
};

// One entry per (block, task). Ties: lowest layer, then lowest grid index.
// A trailing partial block is reported as its own block.
std::vector<BlockBest> report_blocks(const SweepResult& r, int block = 4);

struct GapStats {
  int cells = 0;
  double frac_below_05pp = 0.0;
  double frac_below_02pp = 0.0;
  std::vector<double> gaps_pp;       // one per (layer, task), layer-major
  std::vector<double> edges_pp;      // histogram bin edges
  std::vector<int> histogram;        // counts per [edge_i, edge_{i+1})
};

// Top-1 minus top-2 accuracy, with duplicates counted separately.
double top_gap(const std::vector<double>& accs);
GapStats broad_optimum_stats(const SweepResult& r);

nlohmann::json to_json(const GateCoefficients& c);
GateCoefficients coefficients_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SweepResult& r);
SweepResult sweep_from_json(const nlohmann::json& j);
nlohmann::json to_json(const std::vector<BlockBest>& b);
nlohmann::json to_json(const GapStats& g);
// One row per (layer, grid point, task): coefficients, accuracy, delta_pp.
std::string heatmap_csv(const SweepResult& r);
// layer x task of the best delta (pp) and the pair that reached it.
std::string best_csv(const SweepResult& r);
std::string blocks_csv(const std::vector<BlockBest>& b);

inline constexpr int kSweepSchema = 1;

}  // namespace sinkgate::intervene
