#pragma once

#include <functional>

#include "headspec/tensor.hpp"

namespace headspec {

/// Central-difference verification of reverse-mode gradients.
///
/// f must map a tensor to a scalar tensor. Returns the worst coordinate's
/// relative error |g_ad - g_fd| / max(1, |g_fd|). Throws if f evaluates to a
/// non-finite value at any probe point, naming the offending coordinate.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-5);

}  // namespace headspec
