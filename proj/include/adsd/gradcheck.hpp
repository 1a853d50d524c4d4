#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "adsd/ops.hpp"
#include "adsd/tensor.hpp"

namespace adsd {

struct GradCheckReport {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  std::size_t elements_checked = 0;
  bool passed = false;
};

// Compares the tape gradient of a scalar-valued function against central
// finite differences, element by element, over every tensor in `inputs`.
// Double precision only; callers construct their instances in double.
//
// `make_loss` must be a pure function of the input tensors (re-evaluated
// ~2 per element). `skip(i, j)` may exclude element j of input i, used to
// keep perturbations away from non-smooth points (relu at 0, berHu at beta).
inline GradCheckReport gradcheck(
    const std::string& name, const std::function<Tensor<double>()>& make_loss,
    const std::vector<Tensor<double>*>& inputs, double step = 1e-5, double tolerance = 1e-4,
    const std::function<bool(std::size_t, std::size_t)>& skip = nullptr) {
  GradCheckReport rep;
  rep.name = name;
  rep.tolerance = tolerance;

  for (auto* t : inputs) {
    t->set_requires_grad(true);
    t->zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tensor<double> loss = make_loss();
    backward(loss);
  }
  for (auto* t : inputs) analytic.push_back(t->grad_vec());

  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor<double>& t = *inputs[i];
    t.set_requires_grad(false);
    for (std::size_t j = 0; j < t.numel(); ++j) {
      if (skip && skip(i, j)) continue;
      const double saved = t.data()[j];
      t.data()[j] = saved + step;
      const double lp = make_loss().data()[0];
      t.data()[j] = saved - step;
      const double lm = make_loss().data()[0];
      t.data()[j] = saved;
      const double numeric = (lp - lm) / (2.0 * step);
      const double a = analytic[i][j];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-3});
      const double rel = std::abs(a - numeric) / denom;
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.elements_checked;
    }
    t.set_requires_grad(true);
  }
  for (auto* t : inputs) {
    t->set_requires_grad(false);
    t->zero_grad();
  }
  rep.passed = rep.max_rel_err < tolerance && rep.elements_checked > 0;
  return rep;
}

// Reduces a tensor to a scalar through a fixed random projection so that
// every output element influences the checked loss.
inline Tensor<double> project_to_scalar(const Tensor<double>& out, const Tensor<double>& weights) {
  return ops::sum_all(ops::mul(out, weights));
}

}  // namespace adsd
