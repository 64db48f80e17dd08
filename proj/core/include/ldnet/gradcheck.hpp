#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ldnet/tensor.hpp"

namespace ldnet {

class NonDeterministicError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Lower bound on the relative-error denominator. Coordinates whose true
  /// gradient is exactly zero (e.g. a conv bias feeding batch norm) would
  /// otherwise score 1.0 from round-off alone.
  double denominator_floor = 1e-6;
  /// 0 checks every coordinate; otherwise a seeded sample per tensor.
  std::size_t max_coordinates_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

/// Compares the tape gradient of the scalar `f` against central differences
/// for every listed tensor. `f` must rebuild its graph from the current
/// tensor values on each call; a function that returns different values on
/// two identical calls is rejected.
template <typename T>
GradCheckResult finite_difference_check(const std::function<Tensor<T>()>& f, const NamedTensors<T>& wrt,
                                        const GradCheckOptions& options = {});

template <typename T>
GradCheckResult finite_difference_check(const std::function<Tensor<T>()>& f, Tensor<T> x,
                                        const GradCheckOptions& options = {}) {
  return finite_difference_check<T>(f, NamedTensors<T>{{"x", std::move(x)}}, options);
}

}  // namespace ldnet
