#pragma once

#include <filesystem>
#include <vector>

#include "json.hpp"
#include "sinkgate/backbone/forward.hpp"
#include "sinkgate/numerics/sgt1.hpp"

namespace sinkgate::backbone {

// Sink thresholds travel with dumped traces so they can be analyzed without
// the model.
struct SinkConfig {
  std::vector<int> dims_llm;
  int dim_vit = 0;
  double tau_vit = 1.0;
  double tau_llm = 1.0;

  static SinkConfig of(const ModelConfig& c) { return {c.sink_dims_llm, c.sink_dim_vit, c.tau_vit, c.tau_llm}; }
};

// One directory per trace: index.json plus SGT1 files (encoder output,
// H^{-1}..H^{L-1}, attention [H x T x T] per layer, logits).
void write_trace(const std::filesystem::path& dir, const RunTrace& tr, const SinkConfig& sink,
                 sgt1::Dtype dtype = sgt1::Dtype::f64);
RunTrace read_trace(const std::filesystem::path& dir, SinkConfig* sink = nullptr);

// Trace directories directly under `root`, sorted by name.
std::vector<std::filesystem::path> list_traces(const std::filesystem::path& root);

}  // namespace sinkgate::backbone
