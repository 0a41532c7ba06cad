#include "dw0/optim.hpp"

#include <cmath>
#include <numbers>

namespace dw0 {

template <typename Scalar>
OptimizerState<Scalar> make_optimizer_state(const ParamSet<Scalar>& params, double peak_lr,
                                            const AdamWConfig& config) {
  if (!(peak_lr > 0)) throw std::invalid_argument("peak learning rate must be positive");
  OptimizerState<Scalar> st;
  st.peak_lr = peak_lr;
  st.config = config;
  for (const auto& [name, p] : params) {
    if (!p.trainable) continue;
    st.first_moment[name] = Matrix<Scalar>::Zero(p.value.rows(), p.value.cols());
    st.second_moment[name] = Matrix<Scalar>::Zero(p.value.rows(), p.value.cols());
  }
  return st;
}

template <typename Scalar>
StepReport optimizer_step(ParamSet<Scalar>& params, OptimizerState<Scalar>& state, double lr_now) {
  StepReport report;
  double sq = 0.0;
  std::size_t trainable = 0;
  for (const auto& [name, p] : params) {
    if (!p.trainable) continue;
    ++trainable;
    if (!state.first_moment.count(name)) throw std::invalid_argument("optimizer state missing parameter " + name);
    sq += p.grad.template cast<double>().squaredNorm();
  }
  if (trainable != state.first_moment.size()) throw std::invalid_argument("optimizer state/parameter set mismatch");
  report.grad_norm = std::sqrt(sq);
  if (!std::isfinite(report.grad_norm)) return report;

  const auto& c = state.config;
  const double clip = (c.clip_norm > 0 && report.grad_norm > c.clip_norm) ? c.clip_norm / report.grad_norm : 1.0;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  const auto b1 = static_cast<Scalar>(c.beta1), b2 = static_cast<Scalar>(c.beta2);
  for (auto& [name, p] : params) {
    if (!p.trainable) continue;
    auto& m = state.first_moment.at(name);
    auto& v = state.second_moment.at(name);
    const Matrix<Scalar> g = p.grad * static_cast<Scalar>(clip);
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
    const auto mhat = m.array() / static_cast<Scalar>(bc1);
    const auto vhat = v.array() / static_cast<Scalar>(bc2);
    p.value.array() -= static_cast<Scalar>(lr_now) *
                       (mhat / (vhat.sqrt() + static_cast<Scalar>(c.eps)) +
                        static_cast<Scalar>(c.weight_decay) * p.value.array());
  }
  report.applied = true;
  return report;
}

double cosine_lr(std::int64_t step, std::int64_t warmup_steps, std::int64_t total_steps, double peak,
                 double floor_frac) {
  if (total_steps <= warmup_steps) throw std::invalid_argument("cosine_lr: total_steps must exceed warmup_steps");
  if (step < 0 || step > total_steps) throw std::invalid_argument("cosine_lr: step outside [0, total_steps]");
  if (step < warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  const double floor = floor_frac * peak;
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template OptimizerState<float> make_optimizer_state(const ParamSet<float>&, double, const AdamWConfig&);
template OptimizerState<double> make_optimizer_state(const ParamSet<double>&, double, const AdamWConfig&);
template StepReport optimizer_step(ParamSet<float>&, OptimizerState<float>&, double);
template StepReport optimizer_step(ParamSet<double>&, OptimizerState<double>&, double);

}  // namespace dw0
