#include "bevdiff/noise_schedule.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace bevdiff {

ScheduleKind parse_schedule_kind(const std::string& s) {
    if (s == "linear") return ScheduleKind::Linear;
    if (s == "cosine") return ScheduleKind::Cosine;
    throw std::invalid_argument("unknown schedule kind '" + s + "' (expected linear or cosine)");
}

std::string to_string(ScheduleKind k) { return k == ScheduleKind::Linear ? "linear" : "cosine"; }

NoiseSchedule::NoiseSchedule(std::vector<double> beta) : beta_(std::move(beta)) {
    if (beta_.empty()) throw std::invalid_argument("noise schedule needs T >= 1");
    alpha_bar_.reserve(beta_.size() + 1);
    alpha_bar_.push_back(1.0);
    one_minus_alpha_bar_.reserve(beta_.size() + 1);
    one_minus_alpha_bar_.push_back(0.0);
    for (std::size_t i = 0; i < beta_.size(); ++i) {
        const double b = beta_[i];
        if (!(b > 0.0 && b < 1.0))
            throw std::invalid_argument("beta_" + std::to_string(i + 1) + " = " + std::to_string(b) + " outside (0,1)");
        one_minus_alpha_bar_.push_back(one_minus_alpha_bar_.back() + alpha_bar_.back() * b);
        alpha_bar_.push_back(alpha_bar_.back() * (1.0 - b));
    }
}

int NoiseSchedule::check(int t, int lo) const {
    if (t < lo || t > steps())
        throw std::out_of_range("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                                std::to_string(steps()) + "]");
    return t;
}

NoiseSchedule make_schedule(int T, ScheduleKind kind, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1, got " + std::to_string(T));
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");

    std::vector<double> beta(T);
    if (kind == ScheduleKind::Linear) {
        for (int i = 0; i < T; ++i)
            beta[i] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / static_cast<double>(T - 1);
    } else {
        constexpr double offset = 0.008;
        auto f = [&](int t) {
            const double c = std::cos((t / static_cast<double>(T) + offset) / (1 + offset) * std::numbers::pi / 2);
            return c * c;
        };
        for (int t = 1; t <= T; ++t) beta[t - 1] = std::min(1.0 - f(t) / f(t - 1), 0.999);
    }
    return NoiseSchedule(std::move(beta));
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
    require_same_shape(x0, eps, "q_sample");
    const double a = std::sqrt(s.alpha_bar(t));
    const double b = std::sqrt(s.one_minus_alpha_bar(t));
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

Var q_sample(Var x0, std::span<const int> t, Var eps, const NoiseSchedule& s) {
    require_same_shape(x0.value(), eps.value(), "q_sample");
    std::vector<double> signal(t.size()), noise(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        signal[i] = std::sqrt(s.alpha_bar(t[i]));
        noise[i] = std::sqrt(s.one_minus_alpha_bar(t[i]));
    }
    return add(scale_per_sample(x0, signal), scale_per_sample(eps, noise));
}

Posterior posterior_mean_var(const Tensor& x0, const Tensor& xt, int t, const NoiseSchedule& s) {
    require_same_shape(x0, xt, "posterior_mean_var");
    if (t < 1 || t > s.steps())
        throw std::out_of_range("posterior_mean_var: t = " + std::to_string(t) + " outside [1, T]");
    const double ab_prev = s.alpha_bar(t - 1);
    const double one_minus_t = s.one_minus_alpha_bar(t);
    const double one_minus_prev = s.one_minus_alpha_bar(t - 1);
    const double beta = s.beta(t);
    const double c0 = std::sqrt(ab_prev) * beta / one_minus_t;
    const double ct = std::sqrt(s.alpha(t)) * one_minus_prev / one_minus_t;
    Posterior p{Tensor(x0.shape()), one_minus_prev / one_minus_t * beta};
    for (std::size_t i = 0; i < x0.size(); ++i) p.mean[i] = c0 * x0[i] + ct * xt[i];
    return p;
}

}  // namespace bevdiff
