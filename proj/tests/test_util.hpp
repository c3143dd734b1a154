#pragma once

#include <cmath>
#include <cstring>
#include <vector>

#include "merlot/tensor.hpp"

namespace merlot::test {

inline bool close(double a, double b, double tol) { return std::fabs(a - b) <= tol; }

inline bool allclose(const Tensor& a, const Tensor& b, double tol) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(std::fabs(a.values()[i] - b.values()[i]) <= tol)) return false;
  return true;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  return std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
}

inline bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// |a - b| relative to max(|a|, |b|, 1); the gradient-check metric.
inline double rel_err(double a, double b) {
  const double scale = std::max({std::fabs(a), std::fabs(b), 1.0});
  return std::fabs(a - b) / scale;
}

}  // namespace merlot::test
