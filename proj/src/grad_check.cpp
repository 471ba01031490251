#include "mdist/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace mdist {

namespace {

double eval_scalar(const ScalarFn& f, const Tensor& point) {
    Tape t;
    Tape::NodeId x = t.leaf(point);
    Tape::NodeId y = f(t, x);
    return t.value(y).scalar_value();
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, const Tensor& point, double eps) {
    GradCheckResult res;

    Tape t;
    Tape::NodeId x = t.leaf(point);
    Tape::NodeId y = f(t, x);
    const Tensor& yv = t.value(y);
    if (!yv.is_scalar()) {
        throw Error("grad_check: function output must be scalar, got shape " +
                    shape_str(yv.shape));
    }
    std::vector<Tensor> grads = t.backward(y);
    const Tensor& analytic = grads[x];

    Tensor probe = point;
    for (std::size_t i = 0; i < point.numel(); ++i) {
        const double keep = probe[i];
        probe[i] = keep + eps;
        const double fp = eval_scalar(f, probe);
        probe[i] = keep - eps;
        const double fm = eval_scalar(f, probe);
        probe[i] = keep;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = analytic[i];
        if (!std::isfinite(a) || !std::isfinite(numeric)) {
            res.finite = false;
            res.worst_coord = i;
            res.max_rel_error = std::numeric_limits<double>::infinity();
            res.message = "non-finite value at coordinate " + std::to_string(i) +
                          " (analytic " + std::to_string(a) + ", numeric " +
                          std::to_string(numeric) + ")";
            return res;
        }
        const double denom = std::max(1e-8, std::fabs(a) + std::fabs(numeric));
        const double rel = std::fabs(a - numeric) / denom;
        if (rel > res.max_rel_error) {
            res.max_rel_error = rel;
            res.worst_coord = i;
        }
    }
    return res;
}

}  // namespace mdist
