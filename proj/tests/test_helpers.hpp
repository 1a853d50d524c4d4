#pragma once

#include <cmath>

#include "adsd/tensor.hpp"

namespace testutil {

// |a-b| <= tol * max(1, |a|, |b|)
inline bool near(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

template <typename T>
double max_abs_diff(const adsd::Tensor<T>& a, const adsd::Tensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return m;
}

template <typename T>
bool bitwise_equal(const adsd::Tensor<T>& a, const adsd::Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

}  // namespace testutil
