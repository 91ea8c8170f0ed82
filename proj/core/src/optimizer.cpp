#include "cart/optimizer.hpp"

#include <cmath>

#include "cart/errors.hpp"

namespace cart::ad {

Tensor ParamStore::create(const std::string& name, Tensor init) {
  if (params_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  init.node()->requires_grad = true;
  init.node()->name = name;
  params_.emplace(name, init);
  return init;
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

void ParamStore::zero_grads() {
  for (auto& [name, t] : params_) {
    auto& g = t.node()->grad;
    std::fill(g.begin(), g.end(), 0.0f);
  }
}

std::int64_t ParamStore::total_params() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void Adam::step(ParamStore& params) {
  ++step_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (auto& [name, t] : params.entries()) {
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(t.value().size(), 0.0f);
      v.assign(t.value().size(), 0.0f);
    }
    const auto& grad = t.node()->grad;
    auto& val = t.node()->value;
    for (size_t i = 0; i < val.size(); ++i) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
      const double mi = b1 * m[i] + (1.0 - b1) * g;
      const double vi = b2 * v[i] + (1.0 - b2) * g * g;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double mhat = mi / bc1;
      const double vhat = vi / bc2;
      val[i] = static_cast<float>(val[i] - cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }
}

}  // namespace cart::ad
