#pragma once

#include <vector>

#include "sinkgate/numerics/tensor.hpp"

namespace sinkgate {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a fixed list of parameter tensors (held by pointer).
class Adam {
 public:
  Adam(std::vector<Tensor*> params, AdamConfig cfg = {});

  // grads[i] matches params[i] in shape.
  void step(const std::vector<Tensor>& grads);
  long steps() const { return t_; }

 private:
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_, v_;
  AdamConfig cfg_;
  long t_ = 0;
};

}  // namespace sinkgate
