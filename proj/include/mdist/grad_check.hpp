#pragma once

#include <functional>
#include <string>

#include "mdist/tape.hpp"

namespace mdist {

// A differentiable scalar-valued function of one tensor, expressed as a
// tape program: given a tape and the input's node id, returns the scalar
// output's node id.
using ScalarFn = std::function<Tape::NodeId(Tape&, Tape::NodeId)>;

struct GradCheckResult {
    double max_rel_error = 0.0;
    bool finite = true;          // false if any analytic/numeric value was non-finite
    std::size_t worst_coord = 0;
    std::string message;

    bool pass(double tol) const { return finite && max_rel_error < tol; }
};

// Compares the analytic gradient of f at `point` against central finite
// differences. Relative error per coordinate is
//   |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
GradCheckResult grad_check(const ScalarFn& f, const Tensor& point, double eps = 1e-5);

}  // namespace mdist
