#pragma once

#include "dw0/tensor.hpp"

#include <map>
#include <string>

namespace dw0 {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
  /// Global gradient-norm clip; <= 0 disables clipping.
  double clip_norm = 1.0;
};

template <typename Scalar>
struct OptimizerState {
  std::map<std::string, Matrix<Scalar>> first_moment;
  std::map<std::string, Matrix<Scalar>> second_moment;
  std::int64_t step = 0;
  double peak_lr = 2e-4;
  AdamWConfig config;
};

struct StepReport {
  bool applied = false;
  /// Pre-clip global L2 norm of the gradients; NaN/inf when skipped.
  double grad_norm = 0.0;
};

template <typename Scalar>
OptimizerState<Scalar> make_optimizer_state(const ParamSet<Scalar>& params, double peak_lr,
                                            const AdamWConfig& config = {});

/// One AdamW update (decoupled weight decay) using the gradients stored in
/// params. A non-finite gradient skips the update and leaves state intact.
template <typename Scalar>
StepReport optimizer_step(ParamSet<Scalar>& params, OptimizerState<Scalar>& state, double lr_now);

/// Linear warmup to `peak` over warmup_steps, then cosine decay to
/// floor_frac * peak at total_steps.
double cosine_lr(std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps, double peak,
                 double floor_frac);

}  // namespace dw0
