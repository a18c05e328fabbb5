#include "bevdiff/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bevdiff {

namespace {

double evaluate(const LossBuilder& f, const ParamStore& params) {
    Tape tape(false);
    return f(tape, params).value().item();
}

}  // namespace

GradCheckResult finite_diff_check(const LossBuilder& f, const ParamStore& params, const GradCheckOptions& opts) {
    if (!(opts.h > 0)) throw std::invalid_argument("finite_diff_check: h must be positive");
    GradCheckResult result;

    Gradients analytic;
    {
        Tape tape;
        Var loss = f(tape, params);
        if (!std::isfinite(loss.value().item())) {
            result.finite = false;
            result.worst = "loss";
            return result;
        }
        analytic = tape.gradients(loss, params);
    }

    ParamStore probe = params;
    Rng rng(opts.seed, 0x9c);
    for (const auto& [name, value] : params) {
        std::vector<std::size_t> coords(value.size());
        std::iota(coords.begin(), coords.end(), 0);
        if (opts.max_coords_per_param != 0 && coords.size() > opts.max_coords_per_param) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(opts.max_coords_per_param);
        }
        Tensor& p = probe.get(name);
        for (std::size_t i : coords) {
            const double original = p[i];
            p[i] = original + opts.h;
            const double up = evaluate(f, probe);
            p[i] = original - opts.h;
            const double down = evaluate(f, probe);
            p[i] = original;

            const double numeric = (up - down) / (2 * opts.h);
            const double a = analytic.at(name)[i];
            ++result.coords_checked;
            if (!std::isfinite(numeric) || !std::isfinite(a)) {
                result.finite = false;
                result.worst = name + "[" + std::to_string(i) + "]";
                continue;
            }
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opts.floor});
            if (rel > result.max_rel_error) {
                result.max_rel_error = rel;
                result.worst = name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return result;
}

}  // namespace bevdiff
