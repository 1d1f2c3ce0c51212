#include "headspec/grad_check.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace headspec {

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                               double h) {
    Tensor probe = x.detached();
    probe.set_requires_grad(true);
    Tensor loss = f(probe);
    if (loss.size() != 1)
        throw std::invalid_argument("finite_difference_check: f must return a scalar, got " +
                                    shape_str(loss.shape()));
    if (!std::isfinite(loss.item()))
        throw std::runtime_error("finite_difference_check: f(x) is non-finite");
    backward(loss);
    Eigen::ArrayXd g_ad = probe.has_grad() ? probe.grad() : Eigen::ArrayXd::Zero(probe.size());

    NoGradGuard ng;
    Tensor pt = x.detached();
    double worst = 0.0;
    for (int i = 0; i < pt.size(); i++) {
        const double orig = pt.values()[i];
        pt.values()[i] = orig + h;
        const double fp = f(pt).item();
        pt.values()[i] = orig - h;
        const double fm = f(pt).item();
        pt.values()[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("finite_difference_check: non-finite value at coordinate " +
                                     std::to_string(i));
        const double g_fd = (fp - fm) / (2.0 * h);
        const double err = std::abs(g_ad[i] - g_fd) / std::max(1.0, std::abs(g_fd));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace headspec
