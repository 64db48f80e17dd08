#include "ldnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace ldnet {

template <typename T>
GradCheckResult finite_difference_check(const std::function<Tensor<T>()>& f, const NamedTensors<T>& wrt,
                                        const GradCheckOptions& options) {
  {
    NoGradGuard guard;
    const T first = f().item();
    const T second = f().item();
    if (!(first == second) && !(std::isnan(first) && std::isnan(second))) {
      throw NonDeterministicError("finite_difference_check: function is not deterministic (" +
                                  std::to_string(first) + " vs " + std::to_string(second) +
                                  "); freeze stochastic layers first");
    }
  }

  std::vector<bool> previous(wrt.size());
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    auto t = wrt[i].second;
    previous[i] = t.requires_grad();
    t.set_requires_grad(true);
    t.zero_grad();
  }
  f().backward();
  std::vector<std::vector<T>> analytic(wrt.size());
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    const auto& t = wrt[i].second;
    analytic[i] = t.has_grad() ? std::vector<T>(t.grad().begin(), t.grad().end()) : std::vector<T>(t.numel(), T{0});
  }

  GradCheckResult result;
  std::mt19937_64 rng(options.seed);
  NoGradGuard guard;
  for (std::size_t i = 0; i < wrt.size(); ++i) {
    auto t = wrt[i].second;
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coordinates_per_tensor && coords.size() > options.max_coordinates_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coordinates_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    auto values = t.mutable_values();
    for (auto c : coords) {
      const T saved = values[c];
      values[c] = static_cast<T>(saved + options.step);
      const double plus = f().item();
      values[c] = static_cast<T>(saved - options.step);
      const double minus = f().item();
      values[c] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[i][c];
      const double denom = std::max(options.denominator_floor, std::abs(a) + std::abs(numeric));
      const double err = std::abs(a - numeric) / denom;
      ++result.coordinates_checked;
      if (err > result.max_relative_error || std::isnan(err)) {
        result.max_relative_error = std::isnan(err) ? INFINITY : err;
        result.worst_tensor = wrt[i].first;
        result.worst_index = c;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
    t.zero_grad();
    t.set_requires_grad(previous[i]);
  }
  return result;
}

template GradCheckResult finite_difference_check<float>(const std::function<Tensor<float>()>&,
                                                        const NamedTensors<float>&, const GradCheckOptions&);
template GradCheckResult finite_difference_check<double>(const std::function<Tensor<double>()>&,
                                                         const NamedTensors<double>&, const GradCheckOptions&);

}  // namespace ldnet
