#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "xnet/errors.hpp"
#include "xnet/rng.hpp"
#include "xnet/tensor.hpp"

namespace xnet {

struct GradCheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-4;
  double low = -1.0;  // inputs drawn uniformly from [low, high)
  double high = 1.0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;  // number of scalar input coordinates compared
};

/// Compares the tape gradient of a scalar-valued closure against central
/// finite differences, both in double precision.
///
/// `fn` receives the inputs as std::span<const Tensor64> and must return a
/// one-element Tensor64. The relative error of each coordinate is
/// |a - n| / max(|a|, |n|, 1e-8).
template <typename Fn>
GradCheckResult grad_check(Fn&& fn, const std::vector<Shape>& input_shapes, const GradCheckOptions& opts = {}) {
  Rng rng(opts.seed);
  std::vector<Tensor64> inputs;
  inputs.reserve(input_shapes.size());
  for (const auto& s : input_shapes) {
    auto t = Tensor64::zeros(s);
    for (auto& v : t.data()) v = rng.uniform(opts.low, opts.high);
    t.set_requires_grad(true);
    inputs.push_back(t);
  }

  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor64 loss = fn(std::span<const Tensor64>(inputs));
    if (loss.numel() != 1) throw UsageError("grad_check: closure must return a scalar");
    tape.backward(loss);
  }

  auto eval = [&]() {
    Tensor64 out = fn(std::span<const Tensor64>(inputs));
    return out.data()[0];
  };

  GradCheckResult res;
  for (auto& t : inputs) {
    std::vector<double> analytic(t.data().size(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto x = t.data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + opts.step;
      const double fp = eval();
      x[i] = orig - opts.step;
      const double fm = eval();
      x[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opts.step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      res.max_rel_error = std::max(res.max_rel_error, std::abs(analytic[i] - numeric) / denom);
      ++res.checked;
    }
  }
  return res;
}

}  // namespace xnet
