#pragma once

#include <map>
#include <string>
#include <vector>

#include "cart/tensor.hpp"

namespace cart::ad {

// Named leaf tensors of a model, ordered by name. Names are unique paths
// like "encoder.conv1.weight".
class ParamStore {
 public:
  Tensor create(const std::string& name, Tensor init);
  Tensor get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  void zero_grads();
  std::int64_t total_params() const;

  const std::map<std::string, Tensor>& entries() const { return params_; }
  std::map<std::string, Tensor>& entries() { return params_; }

 private:
  std::map<std::string, Tensor> params_;
};

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

// Adam with bias correction. Parameters without an accumulated gradient are
// treated as having zero gradient (their moments still decay).
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  void step(ParamStore& params);
  std::int64_t step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::int64_t step_ = 0;
  std::map<std::string, std::vector<float>> m_;
  std::map<std::string, std::vector<float>> v_;
};

}  // namespace cart::ad
