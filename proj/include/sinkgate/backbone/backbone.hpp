#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "sinkgate/backbone/config.hpp"
#include "sinkgate/numerics/rng.hpp"
#include "sinkgate/numerics/tensor.hpp"

namespace sinkgate::backbone {

struct LayerWeights {
  Tensor norm1;  // RMSNorm gain before attention
  Tensor wq, wk, wv, wo;  // D x D; head h owns columns [h*dh, (h+1)*dh)
  Tensor norm2;
  Tensor w_up, b_up;      // D x F, F
  Tensor w_down, b_down;  // F x D, D
};

// What the planted circuit settled on during calibration. Kept for reports
// and for the build tests; the forward pass only reads the weights.
struct PlantReport {
  int attempts = 0;
  double vsink_norm = 0.0;          // ||P(v-sink)||
  double ordinary_norm_median = 0.0;
  double lsink_threshold = 0.0;     // on the normalized trigger dim
  double lsink_slope = 0.0;
  double trigger_min_textured = 0.0;
  double trigger_max_other = 0.0;
};

struct Backbone {
  ModelConfig config;
  // Vision encoder: e = x W_enc + b_enc plus the planted sink pathway.
  Tensor enc_w, enc_b;
  // Projector: P(e) = gelu(e W1 + b1) W2 + b2, no residual.
  Tensor proj_w1, proj_b1, proj_w2, proj_b2;
  Tensor tok_emb;  // vocab x D
  Tensor pos_emb;  // max_seq x D
  std::vector<LayerWeights> layers;
  Tensor final_norm;
  Tensor unembed;  // D x vocab
  PlantReport plant_report;

  // Every tensor under a stable name, in a fixed order.
  void visit(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  void visit_mut(const std::function<void(const std::string&, Tensor&)>& fn);
};

// Random weights (std config.init_std) plus, when config.plant.enabled, the
// planted encoder/projector/FFN sink pathways and the routing heads. The
// planted build is verified; a failed verification retries with a derived
// seed up to 8 times before throwing InvariantError.
Backbone build_backbone(const ModelConfig& config, std::uint64_t seed);

// Encoder output for one image (n x D_v).
Tensor encode(const Backbone& bb, const Tensor& patches);
Tensor project(const Backbone& bb, const Tensor& encoded);

// Checkpoint: directory with config.json and one SGT1 file per tensor.
void save_checkpoint(const Backbone& bb, const std::filesystem::path& dir);
Backbone load_checkpoint(const std::filesystem::path& dir);
// Concatenated SGT1 bytes of every tensor; used by the freeze checks.
std::string serialize(const Backbone& bb);
std::uint64_t weights_hash(const Backbone& bb);

}  // namespace sinkgate::backbone
