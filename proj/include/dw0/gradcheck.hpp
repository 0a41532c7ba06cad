#pragma once

#include "dw0/tensor.hpp"

#include <functional>
#include <vector>

namespace dw0 {

template <typename Scalar>
struct GradCheckReport {
  /// max over coordinates of |tape - fd| / max(1, |tape|, |fd|)
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  bool passed = false;
};

template <typename Scalar>
using ScalarFunction = std::function<Tensor<Scalar>(Tape<Scalar>&, const std::vector<Tensor<Scalar>>&)>;

/// Compares tape gradients of a scalar-valued f against central differences
/// with step h, coordinate by coordinate over every input.
template <typename Scalar>
GradCheckReport<Scalar> gradient_check(const ScalarFunction<Scalar>& f, const std::vector<Matrix<Scalar>>& inputs,
                                       Scalar h, double tol);

/// Same check against the parameters of a model. At most max_per_param
/// coordinates (chosen by rng) are probed per parameter.
template <typename Scalar>
GradCheckReport<Scalar> gradient_check_params(const std::function<Tensor<Scalar>(Tape<Scalar>&)>& f,
                                              ParamSet<Scalar>& params, Scalar h, double tol,
                                              std::size_t max_per_param, Rng& rng);

}  // namespace dw0
