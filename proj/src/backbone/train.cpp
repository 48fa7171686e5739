#include "sinkgate/backbone/train.hpp"

#include <cmath>

#include "sinkgate/numerics/adam.hpp"
#include "sinkgate/numerics/kernels.hpp"

namespace sinkgate::backbone {

EvalResult tally(const std::vector<scenes::Example>& data, const std::vector<int>& correct) {
  EvalResult r;
  std::map<scenes::Task, int> hits;
  int total = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    ++r.count[data[i].task];
    hits[data[i].task] += correct[i];
    total += correct[i];
  }
  for (const auto& [t, n] : r.count) r.accuracy[t] = static_cast<double>(hits[t]) / n;
  r.n = static_cast<int>(data.size());
  r.overall = data.empty() ? 0.0 : static_cast<double>(total) / static_cast<double>(data.size());
  return r;
}

EvalResult evaluate(const Backbone& bb, const std::vector<scenes::Example>& data, const KeyScalePlan* plan) {
  std::vector<int> correct(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) correct[i] = predict(bb, data[i], plan) == data[i].answer.at(0);
  return tally(data, correct);
}

TrainReport train_backbone(Backbone& bb, const std::vector<scenes::Example>& train,
                           const std::vector<scenes::Example>& heldout, const TrainSpec& spec) {
  if (spec.steps < 0 || spec.batch < 1 || !(spec.lr > 0)) throw ConfigError("train: steps >= 0, batch >= 1, lr > 0");
  TrainReport rep;
  if (spec.steps > 0) {
    if (train.empty()) throw ConfigError("train: empty training set");
    const std::size_t D = static_cast<std::size_t>(bb.config.D);
    const std::size_t V = static_cast<std::size_t>(bb.config.vocab);
    Tensor feats = Tensor::matrix(train.size(), D);
    for (std::size_t i = 0; i < train.size(); ++i) {
      const Tensor h = forward(bb, train[i]).final_hidden;
      std::copy(h.data().begin(), h.data().end(), feats.row(i).begin());
    }
    AdamConfig ac;
    ac.lr = spec.lr;
    Adam opt({&bb.unembed}, ac);
    const std::size_t B = std::min<std::size_t>(static_cast<std::size_t>(spec.batch), train.size());
    std::size_t cursor = 0;
    for (int step = 0; step < spec.steps; ++step) {
      Tensor xb = Tensor::matrix(B, D);
      std::vector<int> yb(B);
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t i = (cursor + b) % train.size();
        std::copy(feats.row(i).begin(), feats.row(i).end(), xb.row(b).begin());
        yb[b] = train[i].answer.at(0);
      }
      cursor = (cursor + B) % train.size();
      Tensor logits = kernels::matmul(xb, bb.unembed);
      double loss = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        auto row = logits.row(b);
        double mx = row[0];
        for (double v : row) mx = std::max(mx, v);
        double z = 0.0;
        for (double& v : row) {
          v = std::exp(v - mx);
          z += v;
        }
        for (double& v : row) v /= z;
        loss -= std::log(row[static_cast<std::size_t>(yb[b])]);
        row[static_cast<std::size_t>(yb[b])] -= 1.0;
        for (double& v : row) v /= static_cast<double>(B);
      }
      rep.loss.push_back(loss / static_cast<double>(B));
      Tensor grad = kernels::matmul_at(xb, logits);  // D x V
      (void)V;
      opt.step({grad});
    }
  }
  rep.heldout = evaluate(bb, heldout);
  return rep;
}

}  // namespace sinkgate::backbone
