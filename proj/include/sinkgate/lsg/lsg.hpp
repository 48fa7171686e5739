#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "sinkgate/backbone/train.hpp"
#include "sinkgate/sinkid/sinkid.hpp"

namespace sinkgate::lsg {

using scenes::Task;

enum class GroupMode { vsink_vs_rest, lsink_vs_rest, three_group };
enum class SignalKind { last_token, mean_pool_all, mean_pool_visual };

const char* group_mode_name(GroupMode m);
GroupMode parse_group_mode(const std::string& s);
const char* signal_kind_name(SignalKind k);
SignalKind parse_signal_kind(const std::string& s);

struct GateSpec {
  GroupMode group_mode = GroupMode::vsink_vs_rest;
  SignalKind signal = SignalKind::last_token;
  int hidden = 16;
  double ln_eps = 1e-5;
};

// g_l: LayerNorm -> W1 -> GELU -> W2 -> softmax. Reads H^layer and scales the
// keys of layer + 1; layer -1 reads the embeddings.
struct GateModule {
  int layer = 0;
  GateSpec spec;
  Tensor ln_gamma, ln_beta;  // D
  Tensor w1, b1;             // D x h, h
  Tensor w2, b2;             // h x G, G

  int groups() const { return spec.group_mode == GroupMode::three_group ? 3 : 2; }
  std::vector<Tensor*> params();
  std::vector<const Tensor*> params() const;
  std::size_t num_params() const;
};

// W1 ~ N(0, 1/D) from the (seed, layer) stream; W2 and b2 start at zero so
// the first output is exactly uniform.
GateModule init_gate(int D, int layer, const GateSpec& spec, std::uint64_t seed);

std::vector<double> gate_forward(const GateModule& gate, std::span<const double> signal);

// Group id per visual token under the gate's mode: vsink_vs_rest puts
// V-sinks in group 0, lsink_vs_rest puts the L-sinks of H^layer in group 0,
// three_group uses (vsink, lsink, ordinary).
std::vector<int> visual_groups(GroupMode mode, int n, std::span<const int> vsink, std::span<const int> lsink);

// Gates active in one pass, keyed by gate layer.
struct StackConfig {
  std::map<int, GateModule> gates;
  void add(GateModule g);  // InvariantError if the layer is taken
  std::vector<int> layers() const;
};

// Ratios each gate produced in a pass (the first entry is rho_vit in
// vsink_vs_rest mode).
using GateLog = std::map<int, std::vector<double>>;

struct GatedOptions {
  bool capture = false;
  GateLog* log = nullptr;
  // Resume from cached H^{start_layer-1}; must not skip a gated layer.
  int start_layer = 0;
  const Tensor* start_hidden = nullptr;
};

backbone::RunTrace gated_forward(const backbone::Backbone& bb, const StackConfig& gates, const scenes::Example& ex,
                                 const GatedOptions& opts = {});
// Ratios are fixed at prefill from the final prompt token and then held as a
// plain key plan for the remaining decode steps.
std::vector<int> gated_generate(const backbone::Backbone& bb, const StackConfig& gates, const scenes::Example& ex,
                                int max_new);

// Next-token loss of the answer and gradients for every gate parameter, in
// StackConfig order then GateModule::params() order.
struct LossGrad {
  double loss = 0.0;
  std::vector<Tensor> grads;
};
LossGrad loss_and_grad(const backbone::Backbone& bb, const StackConfig& gates, const scenes::Example& ex,
                       const GatedOptions& opts = {});

struct TrainHyper {
  double lr = 1e-3;
  int batch = 16;
  int epochs = 2;
  std::uint64_t seed = 1;
  int checkpoints = 10;  // trajectory points besides step 0
  int workers = 1;
};

struct RhoStat {
  double mean = 0.0, std = 0.0;
  int n = 0;
};

// Per checkpoint: the step and, per task, the spread of gate ratio 0 over
// the evaluation samples.
struct TrajectoryPoint {
  int step = 0;
  std::map<Task, RhoStat> rho;
};

struct Trajectory {
  int layer = 0;
  std::vector<TrajectoryPoint> points;
};

struct TrainResult {
  StackConfig gates;
  std::vector<double> loss;  // per step
  std::vector<Trajectory> trajectories;
  bool backbone_unchanged = true;
};

// One Adam step per batch of `batch` shuffled examples; `eval` feeds the
// trajectory. The backbone is only read.
TrainResult train_gate(const backbone::Backbone& bb, const GateModule& gate, const std::vector<scenes::Example>& data,
                       const std::vector<scenes::Example>& eval, const TrainHyper& hyper);
TrainResult train_joint(const backbone::Backbone& bb, const StackConfig& gates,
                        const std::vector<scenes::Example>& data, const std::vector<scenes::Example>& eval,
                        const TrainHyper& hyper);

// Gate-ratio statistics on a set, from one gated pass per example.
std::map<Task, RhoStat> rho_stats(const backbone::Backbone& bb, const StackConfig& gates, int layer,
                                  const std::vector<scenes::Example>& data, int workers = 1);

backbone::EvalResult evaluate_gates(const backbone::Backbone& bb, const StackConfig& gates,
                                    const std::vector<scenes::Example>& data, int workers = 1);

struct StackStep {
  int step = 0;
  int added = 0;
  std::vector<int> active;
  std::map<Task, double> accuracy;
  std::map<Task, double> delta;  // vs baseline
  double mean_delta = 0.0;
};

struct StackReport {
  std::map<Task, double> baseline;
  // Single-layer results used for the ordering, by gate layer.
  std::map<int, std::map<Task, double>> single;
  std::vector<StackStep> steps;
  StackConfig final;
};

// Orders layers by descending single-layer mean delta (ties: lower layer)
// and adds one existing checkpoint per step, evaluating the joint set.
StackReport greedy_stack(const backbone::Backbone& bb, const std::map<int, GateModule>& trained,
                         const std::vector<scenes::Example>& eval, int steps, int workers = 1);

struct AblationRow {
  std::string name;
  GateSpec spec;
  std::map<Task, double> accuracy;
  std::map<Task, double> delta;
  double mean_delta = 0.0;
};

// Signal kinds under vsink_vs_rest, then group modes under last_token. The
// first row is the default configuration.
std::vector<GateSpec> ablation_variants();
std::vector<AblationRow> ablate(const backbone::Backbone& bb, int layer, const std::vector<GateSpec>& variants,
                                const std::vector<scenes::Example>& train, const std::vector<scenes::Example>& eval,
                                const TrainHyper& hyper);

void save_gate(const GateModule& g, const std::filesystem::path& dir);
GateModule load_gate(const std::filesystem::path& dir);
std::uint64_t gate_hash(const GateModule& g);

nlohmann::json to_json(const Trajectory& t);
std::string trajectory_csv(const std::vector<Trajectory>& t);
nlohmann::json to_json(const StackReport& r);
std::string stack_csv(const StackReport& r);
nlohmann::json to_json(const std::vector<AblationRow>& rows);
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace sinkgate::lsg
