#pragma once

#include <functional>

#include "vitscope/tape.hpp"
#include "vitscope/tensor.hpp"

namespace vitscope {

/// A scalar-valued function built from ops on the given tape.
using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

/// Compares the tape gradient of `f` at `x` against central differences with
/// step `h`. Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
///
/// Throws std::invalid_argument for h outside [1e-7, 1e-3] and
/// NonFiniteError when f is not finite at a probe point.
double finite_diff_check(const ScalarFn& f, const Tensor& x, double h);

}  // namespace vitscope
