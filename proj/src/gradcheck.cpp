#include "dw0/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace dw0 {

namespace {

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

}  // namespace

template <typename Scalar>
GradCheckReport<Scalar> gradient_check(const ScalarFunction<Scalar>& f, const std::vector<Matrix<Scalar>>& inputs,
                                       Scalar h, double tol) {
  std::vector<Matrix<Scalar>> analytic;
  {
    Tape<Scalar> tape;
    std::vector<Tensor<Scalar>> xs;
    for (const auto& m : inputs) xs.push_back(tape.variable(m));
    const auto out = f(tape, xs);
    tape.backward(out);
    for (const auto& x : xs) {
      analytic.push_back(x.grad().size() ? x.grad() : Matrix<Scalar>::Zero(x.rows(), x.cols()));
    }
  }
  auto eval = [&](const std::vector<Matrix<Scalar>>& values) {
    Tape<Scalar> tape;
    tape.set_grad_enabled(false);
    std::vector<Tensor<Scalar>> xs;
    for (const auto& m : values) xs.push_back(tape.constant(m));
    return static_cast<double>(f(tape, xs).item());
  };

  GradCheckReport<Scalar> report;
  std::vector<Matrix<Scalar>> probe = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Eigen::Index j = 0; j < inputs[i].size(); ++j) {
      const Scalar orig = inputs[i].data()[j];
      const Scalar xp = orig + h, xm = orig - h;
      probe[i].data()[j] = xp;
      const double fp = eval(probe);
      probe[i].data()[j] = xm;
      const double fm = eval(probe);
      probe[i].data()[j] = orig;
      const double numeric = (fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm));
      const double err = rel_error(static_cast<double>(analytic[i].data()[j]), numeric);
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_input = i;
        report.worst_index = static_cast<std::size_t>(j);
      }
      ++report.coordinates;
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

template <typename Scalar>
GradCheckReport<Scalar> gradient_check_params(const std::function<Tensor<Scalar>(Tape<Scalar>&)>& f,
                                              ParamSet<Scalar>& params, Scalar h, double tol,
                                              std::size_t max_per_param, Rng& rng) {
  params.zero_grad();
  {
    Tape<Scalar> tape;
    tape.backward(f(tape));
  }
  auto eval = [&] {
    Tape<Scalar> tape;
    tape.set_grad_enabled(false);
    return static_cast<double>(f(tape).item());
  };
  GradCheckReport<Scalar> report;
  std::size_t pi = 0;
  for (auto& [name, p] : params) {
    if (!p.trainable) {
      ++pi;
      continue;
    }
    const Matrix<Scalar> analytic = p.grad;
    const auto n = static_cast<std::size_t>(p.value.size());
    std::vector<std::size_t> coords;
    if (n <= max_per_param) {
      for (std::size_t j = 0; j < n; ++j) coords.push_back(j);
    } else {
      for (std::size_t j = 0; j < max_per_param; ++j) coords.push_back(static_cast<std::size_t>(rng.below(n)));
    }
    for (std::size_t j : coords) {
      Scalar& slot = p.value.data()[j];
      const Scalar orig = slot;
      const Scalar xp = orig + h, xm = orig - h;
      slot = xp;
      const double fp = eval();
      slot = xm;
      const double fm = eval();
      slot = orig;
      const double numeric = (fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm));
      const double err = rel_error(static_cast<double>(analytic.data()[j]), numeric);
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_input = pi;
        report.worst_index = j;
      }
      ++report.coordinates;
    }
    ++pi;
  }
  params.zero_grad();
  report.passed = report.max_rel_error <= tol;
  return report;
}

template GradCheckReport<float> gradient_check(const ScalarFunction<float>&, const std::vector<Matrix<float>>&,
                                               float, double);
template GradCheckReport<double> gradient_check(const ScalarFunction<double>&, const std::vector<Matrix<double>>&,
                                                double, double);
template GradCheckReport<float> gradient_check_params(const std::function<Tensor<float>(Tape<float>&)>&,
                                                      ParamSet<float>&, float, double, std::size_t, Rng&);
template GradCheckReport<double> gradient_check_params(const std::function<Tensor<double>(Tape<double>&)>&,
                                                       ParamSet<double>&, double, double, std::size_t, Rng&);

}  // namespace dw0
