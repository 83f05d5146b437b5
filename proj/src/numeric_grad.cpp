#include "moa/numeric_grad.hpp"

#include <algorithm>
#include <cmath>

#include "moa/errors.hpp"

namespace moa {

std::map<std::string, Tensor> numeric_grad(const ScalarFn& f, const ParamStore& params,
                                           double step) {
  if (!(step > 0.0)) throw ArgumentError("numeric_grad: step must be positive");
  ParamStore work = params;
  std::map<std::string, Tensor> out;
  auto eval = [&]() {
    const double v = f(work);
    if (!std::isfinite(v)) throw NumericError("numeric_grad: function returned non-finite value");
    return v;
  };
  for (auto& entry : work.entries()) {
    if (entry.frozen) continue;
    Tensor g(entry.value.rows(), entry.value.cols());
    for (std::size_t i = 0; i < entry.value.size(); ++i) {
      const double orig = entry.value[i];
      entry.value[i] = orig + step;
      const double up = eval();
      entry.value[i] = orig - step;
      const double down = eval();
      entry.value[i] = orig;
      g[i] = (up - down) / (2.0 * step);
    }
    out.emplace(entry.name, std::move(g));
  }
  return out;
}

double max_relative_error(const std::map<std::string, Tensor>& numeric,
                          const ParamStore& analytic, double floor) {
  double worst = 0.0;
  for (const auto& [name, num] : numeric) {
    const Tensor& ana = analytic.at(name).grad;
    for (std::size_t i = 0; i < num.size(); ++i) {
      const double err = std::abs(ana[i] - num[i]) /
                         std::max({floor, std::abs(ana[i]), std::abs(num[i])});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace moa
