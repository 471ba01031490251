#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mdist {

struct CheckResult {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    std::size_t trials = 0;
    bool pass = false;
    std::string detail;  // failure diagnostics
};

// Finite-difference verification of every primitive, every loss, and the
// representative network configurations, at `trials` random non-degenerate
// points each. Primitives are held to 1e-5 relative error, losses and
// networks to 1e-4. Deterministic given the seed.
std::vector<CheckResult> run_gradient_battery(std::size_t trials, std::uint64_t seed);

}  // namespace mdist
