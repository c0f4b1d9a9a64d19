#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lmn/tensor.hpp"

namespace lmn {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
using NamedParams = std::vector<std::pair<std::string, BasicTensor<T>>>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of `f` with central differences
/// (f(p + eps) - f(p - eps)) / 2eps on every coordinate of every parameter.
/// Error per coordinate is |a - n| / max(1e-8, |a| + |n|).
template <class T>
GradCheckResult grad_check(const std::function<BasicTensor<T>()>& f, NamedParams<T>& params, double eps) {
  if (!(eps > 0)) throw std::invalid_argument("grad_check: eps must be positive");
  for (auto& [name, p] : params) p.zero_grad();
  const BasicTensor<T> loss = f();
  if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError("grad_check: loss is not finite");
  if (loss.requires_grad()) loss.backward();

  GradCheckResult result;
  for (auto& [name, p] : params) {
    const std::vector<T> analytic = p.has_grad() ? std::vector<T>(p.grad().begin(), p.grad().end())
                                                 : std::vector<T>(p.numel(), T{0});
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(static_cast<double>(analytic[i]))) {
        throw NumericError("grad_check: non-finite analytic gradient in parameter '" + name + "' at index " + std::to_string(i));
      }
      const T saved = values[i];
      double plus = 0, minus = 0;
      {
        NoGradGuard guard;
        values[i] = static_cast<T>(saved + eps);
        plus = static_cast<double>(f().item());
        values[i] = static_cast<T>(saved - eps);
        minus = static_cast<double>(f().item());
      }
      values[i] = saved;
      if (!std::isfinite(plus) || !std::isfinite(minus)) {
        throw NumericError("grad_check: non-finite loss while perturbing parameter '" + name + "' at index " + std::to_string(i));
      }
      // The perturbation actually applied may differ from eps after rounding to T.
      const double step = static_cast<double>(static_cast<T>(saved + eps)) - static_cast<double>(static_cast<T>(saved - eps));
      const double numeric = (plus - minus) / step;
      const double a = static_cast<double>(analytic[i]);
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      ++result.coordinates;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = name;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace lmn
