#pragma once

#include <map>
#include <vector>

#include "sinkgate/backbone/forward.hpp"

namespace sinkgate::backbone {

struct TrainSpec {
  int steps = 600;
  int batch = 64;
  double lr = 0.02;
};

struct EvalResult {
  std::map<scenes::Task, double> accuracy;  // per task present in the set
  std::map<scenes::Task, int> count;
  double overall = 0.0;
  int n = 0;
};

struct TrainReport {
  std::vector<double> loss;  // per step, mean over its batch
  EvalResult heldout;
};

// Next-token training of the readout (unembedding) on the answer token.
// Everything else, including every planted pathway, stays fixed, so the
// final hidden states are computed once and cached.
TrainReport train_backbone(Backbone& bb, const std::vector<scenes::Example>& train,
                           const std::vector<scenes::Example>& heldout, const TrainSpec& spec);

EvalResult evaluate(const Backbone& bb, const std::vector<scenes::Example>& data, const KeyScalePlan* plan = nullptr);
// Accumulates per-task accuracy from per-example hits.
EvalResult tally(const std::vector<scenes::Example>& data, const std::vector<int>& correct);

}  // namespace sinkgate::backbone
