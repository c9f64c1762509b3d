#include "xnet/optim.hpp"

#include <cmath>

#include "xnet/errors.hpp"

namespace xnet {

std::string to_string(OptimizerKind kind) {
  return kind == OptimizerKind::adamw ? "adamw" : "sgd";
}

OptimizerKind optimizer_kind_from_string(const std::string& name) {
  if (name == "adamw") return OptimizerKind::adamw;
  if (name == "sgd" || name == "sgd-momentum") return OptimizerKind::sgd_momentum;
  throw ConfigError("unknown optimizer '" + name + "' (expected adamw|sgd)");
}

void optimizer_step(std::span<float> param, std::span<const float> grad, ParamState& state,
                    const OptimizerConfig& cfg, double lr) {
  if (!grad.empty() && grad.size() != param.size()) {
    throw ValidationError("optimizer_step: gradient of " + std::to_string(grad.size()) +
                          " elements for parameter of " + std::to_string(param.size()));
  }
  const std::size_t n = param.size();
  auto g_at = [&](std::size_t i) { return grad.empty() ? 0.0f : grad[i]; };
  ++state.step;

  if (cfg.kind == OptimizerKind::sgd_momentum) {
    if (state.m.size() != n) state.m.assign(n, 0.0f);
    const float mu = static_cast<float>(cfg.momentum);
    const float wd = static_cast<float>(cfg.weight_decay);
    const float step = static_cast<float>(lr);
    for (std::size_t i = 0; i < n; ++i) {
      const float g = g_at(i) + wd * param[i];
      state.m[i] = mu * state.m[i] + g;
      param[i] -= step * state.m[i];
    }
    return;
  }

  if (state.m.size() != n) state.m.assign(n, 0.0f);
  if (state.v.size() != n) state.v.assign(n, 0.0f);
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const float decay = static_cast<float>(1.0 - lr * cfg.weight_decay);
  const float step_size = static_cast<float>(lr / c1);
  const float inv_sqrt_c2 = static_cast<float>(1.0 / std::sqrt(c2));
  const float eps = static_cast<float>(cfg.eps);
  const float fb1 = static_cast<float>(b1), fb2 = static_cast<float>(b2);
  for (std::size_t i = 0; i < n; ++i) {
    const float g = g_at(i);
    state.m[i] = fb1 * state.m[i] + (1.0f - fb1) * g;
    state.v[i] = fb2 * state.v[i] + (1.0f - fb2) * g * g;
    param[i] *= decay;
    param[i] -= step_size * state.m[i] / (std::sqrt(state.v[i]) * inv_sqrt_c2 + eps);
  }
}

Optimizer::Optimizer(std::vector<Tensor> params, OptimizerConfig cfg)
    : params_(std::move(params)), states_(params_.size()), cfg_(cfg) {
  if (!(cfg_.lr > 0.0)) throw ConfigError("optimizer learning rate must be > 0");
}

void Optimizer::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    optimizer_step(p.data(), p.grad(), states_[i], cfg_, lr);
  }
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double warmup_lr(double base_lr, long step, long total_steps, double warmup_fraction) {
  const long warm = static_cast<long>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
  if (warm <= 0 || step >= warm) return base_lr;
  return base_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
}

}  // namespace xnet
