#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ldnet/gradcheck.hpp"

namespace ldnet {

struct GradientSuiteOptions {
  double op_tolerance = 1e-4;
  double model_tolerance = 1e-3;
  std::size_t model_size = 32;
  std::size_t model_width = 2;
  std::size_t model_classes = 5;
  /// 0 checks every model coordinate.
  std::size_t model_coordinates_per_tensor = 0;
  bool include_model = true;
  std::uint64_t seed = 0;
};

struct GradientSuiteRow {
  std::string name;
  double tolerance = 0.0;
  GradCheckResult result;

  bool passed() const { return result.max_relative_error < tolerance; }
};

/// Central-difference checks in double precision of every primitive op, the
/// composite layers, and (optionally) the full network in train mode with
/// frozen regularizer masks. `on_row` is called as each row completes.
std::vector<GradientSuiteRow> run_gradient_suite(const GradientSuiteOptions& options,
                                                 const std::function<void(const GradientSuiteRow&)>& on_row = {});

}  // namespace ldnet
