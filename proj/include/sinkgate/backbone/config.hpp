#pragma once

#include <vector>

#include "json.hpp"

namespace sinkgate::backbone {

// Where sinks are planted and how strong the planted routing circuit is.
struct PlantSpec {
  bool enabled = true;
  std::vector<int> vsink_cells{0, 3, 12, 15};  // become V-sinks while background
  std::vector<int> lsink_cells{5, 10};         // textured cells: the layer-l0 trigger
  double magnitude_vit = 60.0;
  double magnitude_llm = 40.0;
  int emergence_layer = 2;

  double count_amplitude = 3.0;  // tent count code written into V-sinks
  double sink_norm = 12.0;       // norm of the projector's elevation for V-sinks
  double sink_detector = 8.0;    // V-sink value on the detector dim
  double pos_scale = 3.0;        // row/col position code for visual slots

  // Target attention logits of the planted heads.
  double logit_mover = 12.0;
  double logit_default = 6.0;     // every query -> BOS
  double logit_sink_read = 8.0;   // count query -> V-sinks
  double logit_visual_read = 4.0; // count query -> other visual tokens
  double logit_cell_match = 5.0;  // per matching row / column
  double logit_cell_sink = 5.0;   // local query -> V-sinks
  double logit_colour_match = 10.0;
  double logit_relation_sink = 5.0;

  friend bool operator==(const PlantSpec&, const PlantSpec&) = default;
};

struct ModelConfig {
  int D = 64;
  int D_v = 32;
  int L = 8;
  int H = 4;
  int vocab = 64;
  int n = 16;  // visual tokens per image
  int ffn_hidden = 128;
  int proj_hidden = 64;  // projector MLP width
  int max_seq = 32;
  std::vector<int> sink_dims_llm{62, 63};
  int sink_dim_vit = 31;
  double tau_vit = 30.0;
  double tau_llm = 20.0;
  double init_std = 0.02;
  double norm_eps = 1e-6;
  PlantSpec plant;

  int head_dim() const { return D / H; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Throws ConfigError naming the offending field.
void validate(const ModelConfig& c);

nlohmann::json to_json(const ModelConfig& c);
// Strict: unknown keys are rejected. Missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

// Residual-stream layout used by the planted circuit (requires D = 64).
namespace dims {
inline constexpr int content = 0;        // 0..19, projector output
inline constexpr int textured = 18;
inline constexpr int detector = 19;
inline constexpr int count_code = 8;     // V-sink count code lands on 8..17
inline constexpr int pos_row = 20;       // 20..23
inline constexpr int pos_col = 24;       // 24..27
inline constexpr int qcell_row = 28;     // 28..31
inline constexpr int qcell_col = 32;     // 32..35
inline constexpr int qcolour_a = 36;     // 36..43
inline constexpr int qcolour_b = 44;     // 44..51
inline constexpr int kind = 52;          // 52..56: Q_COUNT .. Q_LEFT_OF
inline constexpr int slot1 = 57;
inline constexpr int slot2 = 58;
inline constexpr int bos = 59;
inline constexpr int constant = 60;
inline constexpr int relation_a = 16;    // relation outputs on the final token
inline constexpr int relation_b = 17;
}  // namespace dims

}  // namespace sinkgate::backbone
