#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "sinkgate/backbone/forward.hpp"
#include "sinkgate/sinkid/sinkid.hpp"

namespace sinkgate::probes {

enum class ProbeTask { count, size, color, shape };
inline constexpr std::array<ProbeTask, 4> kAllProbeTasks{ProbeTask::count, ProbeTask::size, ProbeTask::color,
                                                         ProbeTask::shape};
const char* probe_task_name(ProbeTask t);
ProbeTask parse_probe_task(const std::string& s);
bool is_multilabel(ProbeTask t);

// Pools probed per layer: the two sink groups and five fixed ordinary tokens.
enum class PoolGroup { vsink, lsink, ordinary5 };
inline constexpr std::array<PoolGroup, 3> kAllPools{PoolGroup::vsink, PoolGroup::lsink, PoolGroup::ordinary5};
const char* pool_name(PoolGroup g);

// Visual indices that are never a sink at any layer, sampled without
// replacement from the (seed, image) stream. Fewer than k when the pool is
// smaller.
std::vector<int> sample_ordinary(const sinkid::TokenPartition& p, std::uint64_t seed, std::uint64_t image, int k = 5);

// Mean hidden row (at H^layer) over the group's members; nullopt when the
// group is empty at that layer.
std::optional<Tensor> pool_group(const backbone::RunTrace& trace, const sinkid::TokenPartition& p, PoolGroup g,
                                 int layer, std::span<const int> ordinary5);

struct ProbeSet {
  Tensor x;                     // N x D
  std::vector<int> y;           // multi-class ids
  Tensor y_multi;               // N x C multi-hot
  std::vector<std::string> scene_key;  // split key
  std::size_t size() const { return x.rows(); }
};

struct ProbeHyper {
  int steps = 500;
  double lr = 0.1;
  double l2 = 1e-4;
  double test_frac = 0.3;
  std::uint64_t seed = 1;
};

struct LinearProbe {
  Tensor w;  // D x C
  Tensor b;  // C
  bool multilabel = false;
  // Train-split standardisation applied before w.
  std::vector<double> mean, scale;
};

struct ProbeResult {
  LinearProbe probe;
  double accuracy = 0.0;   // exact match, or mean per-bit accuracy
  double exact_all = 0.0;  // multi-label: all bits right
  double chance = 0.0;     // best constant predictor fitted on train, scored on test
  double chance_sigma = 0.0;
  // Expected accuracy if the probe's test predictions were independent of the
  // labels (its own prediction marginals against the test label marginals).
  // This is the null a label-permuted probe is checked against.
  double null_rate = 0.0;
  double null_sigma = 0.0;
  int n_train = 0, n_test = 0;
  bool degenerate = false;  // single class in the training labels
};

// Full-batch gradient descent on softmax (multi-class) or per-bit sigmoid
// (multi-label) cross-entropy with L2 on w.
ProbeResult train_probe(const ProbeSet& train, const ProbeSet& test, int classes, bool multilabel,
                        const ProbeHyper& hyper);

// Scene-disjoint split: every scene key lands wholly on one side.
void split_by_scene(const ProbeSet& all, double test_frac, std::uint64_t seed, ProbeSet& train, ProbeSet& test);

struct CurveRow {
  ProbeTask task;
  PoolGroup group;
  int layer = 0;
  ProbeResult result;
  bool permuted = false;
};

struct CurveSpec {
  std::vector<ProbeTask> tasks{kAllProbeTasks.begin(), kAllProbeTasks.end()};
  ProbeHyper hyper;
  bool with_permuted = true;  // label-permuted control per cell
  int workers = 1;
  std::function<sinkid::TokenPartition(const backbone::RunTrace&)> partition;  // default: model config
};

// One probe per (task, group, layer). Cells where fewer than four samples
// have the group, or where the split leaves a side empty, are skipped.
std::vector<CurveRow> probe_curves(const std::vector<scenes::Example>& data, const backbone::Backbone& bb,
                                   const CurveSpec& spec);

std::string curves_csv(const std::vector<CurveRow>& rows);
nlohmann::json to_json(const std::vector<CurveRow>& rows);

}  // namespace sinkgate::probes
