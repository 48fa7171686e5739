#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sinkgate/backbone/trace_io.hpp"

namespace sinkgate::sinkid {

using backbone::SinkConfig;

// Rows j with max_{d in dims} |hidden[j, d]| >= tau, ascending.
std::vector<int> identify_sinks(const Tensor& hidden, std::span<const int> dims, double tau);

enum Group { kVSink = 0, kLSink = 1, kOrdinary = 2 };
inline constexpr std::array<const char*, 3> kGroupNames{"vsink", "lsink", "ordinary"};

// Indices are positions within I_vis (0..n-1). Layer l refers to H^l, the
// output of layer l.
struct TokenPartition {
  int n = 0;
  std::vector<int> vsink;
  std::vector<std::vector<int>> lsink;
  std::vector<std::vector<int>> ordinary;

  int layers() const { return static_cast<int>(lsink.size()); }
  Group group_of(int layer, int j) const;
  // Throws InvariantError unless every layer is a disjoint cover of I_vis.
  void check() const;
};

TokenPartition partition_tokens(const backbone::RunTrace& trace, const SinkConfig& sink);
TokenPartition partition_tokens(const backbone::RunTrace& trace, const backbone::ModelConfig& config);

// L-sinks of one hidden state restricted to I_vis, V-sinks removed.
std::vector<int> lsinks_at(const Tensor& hidden, const scenes::Spans& spans, const SinkConfig& sink,
                           std::span<const int> vsink);

struct SalienceProfile {
  int layers = 0;
  int samples = 0;
  // [layer][group]; empty optional = the group had no members in any sample.
  std::vector<std::array<std::optional<double>, 3>> norm;
  // Mean per-token attention from the final prompt token (heads, then samples).
  std::vector<std::array<std::optional<double>, 3>> attention;
  // Summed attention mass of the group from the final prompt token.
  std::vector<std::array<std::optional<double>, 3>> attention_mass;
  // Mean group sizes; the three sum to n.
  std::vector<std::array<double, 3>> count;
};

SalienceProfile salience_profile(std::span<const backbone::RunTrace> traces,
                                 std::span<const TokenPartition> partitions);

nlohmann::json to_json(const TokenPartition& p);
nlohmann::json to_json(const SalienceProfile& p);
// Long format: layer,group,mean_norm,mean_attention,attention_mass,mean_count
std::string to_csv(const SalienceProfile& p);

// Reads every trace under `root` and profiles it with the thresholds stored
// alongside each trace.
SalienceProfile analyze_traces(const std::filesystem::path& root);

}  // namespace sinkgate::sinkid
