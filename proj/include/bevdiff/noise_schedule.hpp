#pragma once

#include <span>
#include <string>
#include <vector>

#include "bevdiff/autodiff.hpp"
#include "bevdiff/tensor.hpp"

namespace bevdiff {

enum class ScheduleKind { Linear, Cosine };

ScheduleKind parse_schedule_kind(const std::string& s);
std::string to_string(ScheduleKind k);

/// Variance schedule of the forward process. Index t runs 1..T for beta/alpha (stored at t-1) and
/// 0..T for alpha_bar, with alpha_bar(0) == 1 meaning "clean".
class NoiseSchedule {
public:
    NoiseSchedule(std::vector<double> beta);

    int steps() const noexcept { return static_cast<int>(beta_.size()); }
    double beta(int t) const { return beta_.at(check(t, 1) - 1); }
    double alpha(int t) const { return 1.0 - beta(t); }
    double alpha_bar(int t) const { return alpha_bar_.at(check(t, 0)); }
    /// 1 - alpha_bar(t), accumulated as (1 - ab_{t-1}) + ab_{t-1} * beta_t to avoid cancellation at small t.
    double one_minus_alpha_bar(int t) const { return one_minus_alpha_bar_.at(check(t, 0)); }

    const std::vector<double>& betas() const noexcept { return beta_; }
    const std::vector<double>& alpha_bars() const noexcept { return alpha_bar_; }

private:
    int check(int t, int lo) const;

    std::vector<double> beta_;
    std::vector<double> alpha_bar_;
    std::vector<double> one_minus_alpha_bar_;
};

/// linear: beta evenly spaced in [beta_start, beta_end]. cosine: squared-cosine alpha_bar with
/// offset 0.008 and beta clipped at 0.999 (beta range arguments are validated but unused).
NoiseSchedule make_schedule(int T, ScheduleKind kind, double beta_start = 1e-4, double beta_end = 0.02);

/// sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s);

/// Per-sample noising on the tape; t holds one timestep per batch element.
Var q_sample(Var x0, std::span<const int> t, Var eps, const NoiseSchedule& s);

struct Posterior {
    Tensor mean;
    double variance;
};

/// Gaussian posterior q(x_{t-1} | x_t, x_0), defined for 1 <= t <= T.
Posterior posterior_mean_var(const Tensor& x0, const Tensor& xt, int t, const NoiseSchedule& s);

}  // namespace bevdiff
