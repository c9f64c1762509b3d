#pragma once

#include <span>
#include <string>
#include <vector>

#include "xnet/tensor.hpp"

namespace xnet {

enum class OptimizerKind { sgd_momentum, adamw };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double lr = 1e-3;
  double momentum = 0.9;  // sgd only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Per-parameter optimizer memory: momentum buffer (sgd) or first/second moments (adamw).
struct ParamState {
  std::vector<float> m;
  std::vector<float> v;
  long step = 0;
};

/// One in-place update of `param`. `lr` overrides cfg.lr so schedules can
/// vary it per step. SGD folds weight decay into the gradient; AdamW applies
/// it decoupled, directly on the parameter.
void optimizer_step(std::span<float> param, std::span<const float> grad, ParamState& state,
                    const OptimizerConfig& cfg, double lr);

class Optimizer {
 public:
  Optimizer(std::vector<Tensor> params, OptimizerConfig cfg);

  /// Updates every parameter from its accumulated gradient (absent = zero).
  void step(double lr);
  void step() { step(cfg_.lr); }
  void zero_grad();

  const OptimizerConfig& config() const noexcept { return cfg_; }

 private:
  std::vector<Tensor> params_;
  std::vector<ParamState> states_;
  OptimizerConfig cfg_;
};

/// Linear warmup over the first `warmup_fraction` of steps, constant after.
double warmup_lr(double base_lr, long step, long total_steps, double warmup_fraction);

}  // namespace xnet
