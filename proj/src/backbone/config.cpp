#include "sinkgate/backbone/config.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "sinkgate/common/json_util.hpp"
#include "sinkgate/scenes/vocab.hpp"

namespace sinkgate::backbone {

using nlohmann::json;

namespace {

void fail(const std::string& field, const std::string& why) { throw ConfigError("model." + field + ": " + why); }

}  // namespace

void validate(const ModelConfig& c) {
  if (c.D < 1) fail("D", "must be >= 1");
  if (c.H < 1) fail("H", "must be >= 1");
  if (c.D % c.H != 0) fail("H", "D must be divisible by H");
  if (c.D_v < 1) fail("D_v", "must be >= 1");
  if (c.L < 1) fail("L", "must be >= 1");
  if (c.n < 1) fail("n", "must be >= 1");
  if (c.vocab < vocab::kUsed) fail("vocab", "must cover the fixed token ids (>= 59)");
  if (c.ffn_hidden < 2) fail("ffn_hidden", "must be >= 2");
  if (c.proj_hidden < 1) fail("proj_hidden", "must be >= 1");
  if (c.max_seq < c.n + 4) fail("max_seq", "must fit BOS, the visual tokens and a 3-token question");
  if (c.sink_dims_llm.empty()) fail("sink_dims_llm", "must not be empty");
  for (int d : c.sink_dims_llm) {
    if (d < 0 || d >= c.D) fail("sink_dims_llm", "dim " + std::to_string(d) + " outside [0, D)");
  }
  if (c.sink_dim_vit < 0 || c.sink_dim_vit >= c.D_v) fail("sink_dim_vit", "outside [0, D_v)");
  if (!(c.tau_vit > 0) || !std::isfinite(c.tau_vit)) fail("tau_vit", "must be > 0");
  if (!(c.tau_llm > 0) || !std::isfinite(c.tau_llm)) fail("tau_llm", "must be > 0");
  if (!(c.init_std >= 0)) fail("init_std", "must be >= 0");
  if (!(c.norm_eps > 0)) fail("norm_eps", "must be > 0");

  const PlantSpec& p = c.plant;
  if (!p.enabled) return;
  if (!(p.magnitude_vit > c.tau_vit)) fail("plant.magnitude_vit", "must exceed tau_vit");
  if (!(p.magnitude_llm > c.tau_llm)) fail("plant.magnitude_llm", "must exceed tau_llm");
  // The planted circuit is laid out for one geometry.
  if (c.D != 64 || c.D_v != 32 || c.n != 16 || c.H != 4) {
    fail("plant", "planted layout needs D=64, D_v=32, n=16, H=4 (disable plant for other shapes)");
  }
  if (c.sink_dims_llm != std::vector<int>{62, 63}) fail("sink_dims_llm", "planted layout reserves dims {62, 63}");
  if (c.sink_dim_vit != 31) fail("sink_dim_vit", "planted layout reserves dim 31");
  if (p.emergence_layer < 1 || p.emergence_layer + 1 >= c.L) {
    fail("plant.emergence_layer", "needs a mover layer before it and a reader layer after it");
  }
  std::set<int> v(p.vsink_cells.begin(), p.vsink_cells.end());
  for (int cell : p.vsink_cells) {
    if (cell < 0 || cell >= c.n) fail("plant.vsink_cells", "cell outside the grid");
  }
  for (int cell : p.lsink_cells) {
    if (cell < 0 || cell >= c.n) fail("plant.lsink_cells", "cell outside the grid");
    if (v.count(cell)) fail("plant.lsink_cells", "planted sets must be disjoint");
  }
  if (c.ffn_hidden < 4) fail("ffn_hidden", "planted FFN pathway needs two hidden units");
  if (c.proj_hidden != 64) fail("proj_hidden", "planted projector uses 64 hidden units");
}

json to_json(const ModelConfig& c) {
  const PlantSpec& p = c.plant;
  json plant = {{"enabled", p.enabled},
                {"vsink_cells", p.vsink_cells},
                {"lsink_cells", p.lsink_cells},
                {"magnitude_vit", p.magnitude_vit},
                {"magnitude_llm", p.magnitude_llm},
                {"emergence_layer", p.emergence_layer},
                {"count_amplitude", p.count_amplitude},
                {"sink_norm", p.sink_norm},
                {"sink_detector", p.sink_detector},
                {"pos_scale", p.pos_scale},
                {"logit_mover", p.logit_mover},
                {"logit_default", p.logit_default},
                {"logit_sink_read", p.logit_sink_read},
                {"logit_visual_read", p.logit_visual_read},
                {"logit_cell_match", p.logit_cell_match},
                {"logit_cell_sink", p.logit_cell_sink},
                {"logit_colour_match", p.logit_colour_match},
                {"logit_relation_sink", p.logit_relation_sink}};
  return {{"D", c.D},
          {"D_v", c.D_v},
          {"L", c.L},
          {"H", c.H},
          {"vocab", c.vocab},
          {"n", c.n},
          {"ffn_hidden", c.ffn_hidden},
          {"proj_hidden", c.proj_hidden},
          {"max_seq", c.max_seq},
          {"sink_dims_llm", c.sink_dims_llm},
          {"sink_dim_vit", c.sink_dim_vit},
          {"tau_vit", c.tau_vit},
          {"tau_llm", c.tau_llm},
          {"init_std", c.init_std},
          {"norm_eps", c.norm_eps},
          {"plant", plant}};
}

ModelConfig model_config_from_json(const json& j) {
  using jsonu::get_or;
  jsonu::require_only(j,
                      {"D", "D_v", "L", "H", "vocab", "n", "ffn_hidden", "proj_hidden", "max_seq", "sink_dims_llm", "sink_dim_vit",
                       "tau_vit", "tau_llm", "init_std", "norm_eps", "plant"},
                      "model");
  ModelConfig c;
  const std::string w = "model";
  c.D = get_or(j, "D", c.D, w);
  c.D_v = get_or(j, "D_v", c.D_v, w);
  c.L = get_or(j, "L", c.L, w);
  c.H = get_or(j, "H", c.H, w);
  c.vocab = get_or(j, "vocab", c.vocab, w);
  c.n = get_or(j, "n", c.n, w);
  c.ffn_hidden = get_or(j, "ffn_hidden", c.ffn_hidden, w);
  c.proj_hidden = get_or(j, "proj_hidden", c.proj_hidden, w);
  c.max_seq = get_or(j, "max_seq", c.max_seq, w);
  c.sink_dims_llm = get_or(j, "sink_dims_llm", c.sink_dims_llm, w);
  c.sink_dim_vit = get_or(j, "sink_dim_vit", c.sink_dim_vit, w);
  c.tau_vit = get_or(j, "tau_vit", c.tau_vit, w);
  c.tau_llm = get_or(j, "tau_llm", c.tau_llm, w);
  c.init_std = get_or(j, "init_std", c.init_std, w);
  c.norm_eps = get_or(j, "norm_eps", c.norm_eps, w);
  if (j.contains("plant")) {
    const json& pj = j.at("plant");
    const std::string pw = "model.plant";
    jsonu::require_only(pj,
                        {"enabled", "vsink_cells", "lsink_cells", "magnitude_vit", "magnitude_llm", "emergence_layer",
                         "count_amplitude", "sink_norm", "sink_detector", "pos_scale", "logit_mover", "logit_default",
                         "logit_sink_read", "logit_visual_read", "logit_cell_match", "logit_cell_sink",
                         "logit_colour_match", "logit_relation_sink"},
                        pw);
    PlantSpec& p = c.plant;
    p.enabled = get_or(pj, "enabled", p.enabled, pw);
    p.vsink_cells = get_or(pj, "vsink_cells", p.vsink_cells, pw);
    p.lsink_cells = get_or(pj, "lsink_cells", p.lsink_cells, pw);
    p.magnitude_vit = get_or(pj, "magnitude_vit", p.magnitude_vit, pw);
    p.magnitude_llm = get_or(pj, "magnitude_llm", p.magnitude_llm, pw);
    p.emergence_layer = get_or(pj, "emergence_layer", p.emergence_layer, pw);
    p.count_amplitude = get_or(pj, "count_amplitude", p.count_amplitude, pw);
    p.sink_norm = get_or(pj, "sink_norm", p.sink_norm, pw);
    p.sink_detector = get_or(pj, "sink_detector", p.sink_detector, pw);
    p.pos_scale = get_or(pj, "pos_scale", p.pos_scale, pw);
    p.logit_mover = get_or(pj, "logit_mover", p.logit_mover, pw);
    p.logit_default = get_or(pj, "logit_default", p.logit_default, pw);
    p.logit_sink_read = get_or(pj, "logit_sink_read", p.logit_sink_read, pw);
    p.logit_visual_read = get_or(pj, "logit_visual_read", p.logit_visual_read, pw);
    p.logit_cell_match = get_or(pj, "logit_cell_match", p.logit_cell_match, pw);
    p.logit_cell_sink = get_or(pj, "logit_cell_sink", p.logit_cell_sink, pw);
    p.logit_colour_match = get_or(pj, "logit_colour_match", p.logit_colour_match, pw);
    p.logit_relation_sink = get_or(pj, "logit_relation_sink", p.logit_relation_sink, pw);
  }
  validate(c);
  return c;
}

}  // namespace sinkgate::backbone
