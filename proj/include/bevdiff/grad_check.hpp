#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>

#include "bevdiff/autodiff.hpp"

namespace bevdiff {

/// Builds a scalar loss on the given tape from the given parameters.
using LossBuilder = std::function<Var(Tape&, const ParamStore&)>;

struct GradCheckOptions {
    double h = 1e-5;
    /// Denominator floor in |analytic - numeric| / max(|analytic|, |numeric|, floor).
    double floor = 1e-6;
    /// 0 checks every coordinate; otherwise a seeded random subset per parameter.
    std::size_t max_coords_per_param = 0;
    std::uint64_t seed = 0;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    bool finite = true;
    std::string worst;  ///< "param[index]" of the worst coordinate
    std::size_t coords_checked = 0;

    bool passed(double tol) const { return finite && max_rel_error < tol; }
};

/// Compares backward() against central differences (f(p+h) - f(p-h)) / 2h coordinate by
/// coordinate. A NaN anywhere is reported through `finite`, never thrown.
GradCheckResult finite_diff_check(const LossBuilder& f, const ParamStore& params, const GradCheckOptions& opts = {});

}  // namespace bevdiff
