#pragma once

// Shared models and data for the module tests and the acceptance binary.

#include "sinkgate/backbone/train.hpp"
#include "test_util.hpp"
#include "sinkgate/scenes/dataset.hpp"
#include "sinkgate/scenes/vocab.hpp"

namespace fixtures {

using namespace sinkgate;

// D=16, L=3, T=12 (BOS + 8 visual + 3 text), random weights.
inline backbone::ModelConfig tiny_config() {
  backbone::ModelConfig c;
  c.D = 16;
  c.H = 2;
  c.L = 3;
  c.n = 8;
  c.ffn_hidden = 24;
  c.proj_hidden = 12;
  c.max_seq = 16;
  c.sink_dims_llm = {14, 15};
  c.tau_vit = 3.0;
  c.tau_llm = 2.0;
  c.init_std = 0.35;
  c.plant.enabled = false;
  return c;
}

// Patches with a spike on the ViT sink dim for rows 0 and 5, so the tiny
// model has a V-sink group to gate.
inline scenes::Example tiny_example(std::uint64_t seed) {
  Rng rng(seed);
  scenes::Example ex;
  ex.patches = Tensor::matrix(8, 32);
  for (double& v : ex.patches.data()) v = 0.5 * rng.normal();
  ex.patches.at(0, 31) = 6.0;
  ex.patches.at(5, 31) = -7.0;
  ex.prompt = {vocab::BOS};
  for (int i = 0; i < 8; ++i) ex.prompt.push_back(vocab::VIS);
  ex.prompt.push_back(vocab::cell_token(static_cast<int>(rng.below(16))));
  ex.prompt.push_back(vocab::NONE);
  ex.prompt.push_back(vocab::Q_COLOR);
  ex.answer = {vocab::color_token(static_cast<int>(rng.below(8)))};
  ex.task = scenes::Task::local_attribute;
  return ex;
}

inline scenes::DataSpec planted_data(std::uint64_t seed, int size) {
  scenes::DataSpec d;
  d.seed = seed;
  d.size = size;
  const backbone::PlantSpec p;
  d.encode.sink_eligible_cells = p.vsink_cells;
  d.encode.textured_cells = p.lsink_cells;
  return d;
}

inline const backbone::Backbone& planted() {
  static const backbone::Backbone bb = backbone::build_backbone(backbone::ModelConfig{}, 7);
  return bb;
}

inline const backbone::Backbone& trained() {
  static const backbone::Backbone bb = [] {
    backbone::Backbone b = planted();
    backbone::train_backbone(b, scenes::generate_dataset(planted_data(11, 600)), {}, backbone::TrainSpec{});
    return b;
  }();
  return bb;
}

}  // namespace fixtures
