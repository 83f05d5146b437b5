#pragma once

#include <functional>
#include <map>
#include <string>

#include "moa/param_store.hpp"

namespace moa {

using ScalarFn = std::function<double(const ParamStore&)>;

/// Central-difference gradient (f(p + h e_i) - f(p - h e_i)) / 2h for every
/// scalar of every trainable entry. Frozen entries are skipped. Throws
/// NumericError when f returns a non-finite value.
std::map<std::string, Tensor> numeric_grad(const ScalarFn& f, const ParamStore& params,
                                           double step);

/// Largest |analytic - numeric| / max(floor, |analytic|, |numeric|) over all
/// shared entries. The floor keeps near-zero gradients from dominating.
double max_relative_error(const std::map<std::string, Tensor>& numeric,
                          const ParamStore& analytic, double floor = 1.0);

}  // namespace moa
