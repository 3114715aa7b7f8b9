#pragma once

#include <cstdint>
#include <vector>

#include "edh/tensor.hpp"

namespace edh {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed set of parameter tensors. Moment arrays
/// live here, one pair per parameter, shapes matching the parameters.
class Adam {
 public:
  Adam(std::vector<Tensor> params, const AdamConfig& cfg);

  /// One update step in place from each parameter's current gradient.
  void step();
  void zero_grad();
  std::int64_t step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::int64_t t_ = 0;
  AdamConfig cfg_;
};

}  // namespace edh
