#include "bevdiff/samplers.hpp"

#include <cmath>
#include <stdexcept>

namespace bevdiff {

SamplerKind parse_sampler_kind(const std::string& s) {
    if (s == "ddim") return SamplerKind::DDIM;
    if (s == "dpmpp") return SamplerKind::DPMpp2M;
    if (s == "deis") return SamplerKind::DEIS;
    throw std::invalid_argument("unknown sampler '" + s + "' (expected ddim, dpmpp or deis)");
}

std::string to_string(SamplerKind k) {
    switch (k) {
        case SamplerKind::DDIM: return "ddim";
        case SamplerKind::DPMpp2M: return "dpmpp";
        case SamplerKind::DEIS: return "deis";
    }
    return "?";
}

NoiseLevel NoiseLevel::from_alpha_bar(double alpha_bar) { return {std::sqrt(alpha_bar), std::sqrt(1.0 - alpha_bar)}; }

double NoiseLevel::log_snr() const { return std::log(signal) - std::log(noise); }

NoiseLevel noise_level(const NoiseSchedule& s, int k) {
    if (k < -1 || k > s.steps() - 1)
        throw std::out_of_range("sampler time " + std::to_string(k) + " outside [-1, " + std::to_string(s.steps() - 1) + "]");
    return {std::sqrt(s.alpha_bar(k + 1)), std::sqrt(s.one_minus_alpha_bar(k + 1))};
}

StepSchedule make_step_schedule(int T, int steps) {
    if (steps < 1 || steps > T)
        throw std::invalid_argument("make_step_schedule: need 1 <= steps <= T, got steps=" + std::to_string(steps) +
                                    ", T=" + std::to_string(T));
    std::vector<int> times(steps + 1);
    for (int i = 0; i <= steps; ++i) times[steps - i] = static_cast<int>(std::lround(-1.0 + i * static_cast<double>(T) / steps));
    StepSchedule out;
    for (int i = 0; i < steps; ++i) out.pairs.emplace_back(times[i], times[i + 1]);
    return out;
}

namespace {

void check_order(int t_now, int t_next) {
    if (t_next >= t_now)
        throw std::invalid_argument("sampler step must decrease time: t_now=" + std::to_string(t_now) +
                                    ", t_next=" + std::to_string(t_next));
}

void require_noisy(NoiseLevel now, int t_now) {
    if (!(now.noise > 0.0))
        throw std::invalid_argument("sampler step from clean state t_now=" + std::to_string(t_now) +
                                    " (1 - alpha_bar = 0)");
}

// First-order data-prediction update: next.signal * x0 + next.noise * (xt - now.signal * x0) / now.noise
Tensor first_order(const Tensor& xt, const Tensor& x0_hat, NoiseLevel now, NoiseLevel next) {
    const double keep = next.noise / now.noise;
    const double c0 = next.signal - keep * now.signal;
    Tensor out(xt.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep * xt[i] + c0 * x0_hat[i];
    return out;
}

}  // namespace

Tensor ddim_update(const Tensor& xt, const Tensor& x0_hat, NoiseLevel now, NoiseLevel next, double eta, Rng& rng) {
    require_same_shape(xt, x0_hat, "ddim_step");
    if (eta < 0) throw std::invalid_argument("ddim_step: eta must be >= 0");
    if (!(now.noise > 0.0)) throw std::invalid_argument("ddim_step: 1 - alpha_bar(t_now) = 0");
    const double ab_now = now.signal * now.signal;
    const double ab_next = next.signal * next.signal;
    const double var_now = now.noise * now.noise;
    const double var_next = next.noise * next.noise;
    const double sigma = eta * std::sqrt(var_next / var_now) * std::sqrt(std::max(0.0, 1.0 - ab_now / ab_next));
    const double dir = std::sqrt(std::max(0.0, var_next - sigma * sigma));

    Tensor out(xt.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double eps_hat = (xt[i] - now.signal * x0_hat[i]) / now.noise;
        out[i] = next.signal * x0_hat[i] + dir * eps_hat;
    }
    if (sigma > 0)
        for (auto& v : out.data()) v += sigma * rng.normal();
    return out;
}

Tensor ddim_step(const Tensor& xt, const Tensor& x0_hat, int t_now, int t_next, double eta, const NoiseSchedule& s,
                 Rng& rng) {
    check_order(t_now, t_next);
    const NoiseLevel now = noise_level(s, t_now);
    require_noisy(now, t_now);
    return ddim_update(xt, x0_hat, now, noise_level(s, t_next), eta, rng);
}

Tensor dpmpp_2m_step(const Tensor& xt, const Tensor& x0_hat, const std::optional<Tensor>& x0_hat_prev, int t_now,
                     std::optional<int> t_prev, int t_next, const NoiseSchedule& s) {
    require_same_shape(xt, x0_hat, "dpmpp_2m_step");
    check_order(t_now, t_next);
    if (x0_hat_prev.has_value() != t_prev.has_value())
        throw std::invalid_argument("dpmpp_2m_step: previous prediction and its time must be given together");
    if (t_prev && *t_prev <= t_now)
        throw std::invalid_argument("dpmpp_2m_step: non-monotone history t_prev=" + std::to_string(*t_prev) +
                                    " <= t_now=" + std::to_string(t_now));
    const NoiseLevel now = noise_level(s, t_now);
    const NoiseLevel next = noise_level(s, t_next);
    require_noisy(now, t_now);
    if (!x0_hat_prev || next.noise == 0.0) return first_order(xt, x0_hat, now, next);

    require_same_shape(x0_hat, *x0_hat_prev, "dpmpp_2m_step");
    const double lam_now = now.log_snr();
    const double h = next.log_snr() - lam_now;
    const double h_prev = lam_now - noise_level(s, *t_prev).log_snr();
    const double r = h_prev / h;
    const double d_now = 1.0 + 1.0 / (2.0 * r);
    const double d_prev = -1.0 / (2.0 * r);
    const double keep = next.noise / now.noise;
    const double c = -next.signal * std::expm1(-h);

    Tensor out(xt.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = keep * xt[i] + c * (d_now * x0_hat[i] + d_prev * (*x0_hat_prev)[i]);
    return out;
}

Tensor deis_step(const Tensor& xt, std::span<const Tensor> x0_history, std::span<const int> t_history, int t_next,
                 int order, const NoiseSchedule& s) {
    if (order != 1 && order != 2) throw std::invalid_argument("deis_step: order must be 1 or 2");
    if (x0_history.empty() || x0_history.size() != t_history.size())
        throw std::invalid_argument("deis_step: history must be non-empty with one time per prediction");
    for (std::size_t i = 1; i < t_history.size(); ++i)
        if (t_history[i] >= t_history[i - 1]) throw std::invalid_argument("deis_step: history times must decrease");

    const int t_now = t_history.back();
    check_order(t_now, t_next);
    const Tensor& x0_now = x0_history.back();
    require_same_shape(xt, x0_now, "deis_step");
    const NoiseLevel now = noise_level(s, t_now);
    const NoiseLevel next = noise_level(s, t_next);
    require_noisy(now, t_now);

    const int effective = (x0_history.size() >= 2 && next.noise > 0.0) ? order : 1;
    if (effective == 1) return first_order(xt, x0_now, now, next);

    const Tensor& x0_prev = x0_history[x0_history.size() - 2];
    require_same_shape(x0_now, x0_prev, "deis_step");
    const double lam_now = now.log_snr();
    const double h = next.log_snr() - lam_now;
    const double h_prev = lam_now - noise_level(s, t_history[t_history.size() - 2]).log_snr();
    // sigma_next * e^{lambda}: at lambda_next this is next.signal, at lambda_now it is next.noise * now.signal / now.noise.
    const double keep = next.noise / now.noise;
    const double w_now = keep * now.signal;
    const double i0 = next.signal - w_now;
    const double i1 = (h - 1.0) * next.signal + w_now;
    const double slope = i1 / h_prev;

    Tensor out(xt.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = keep * xt[i] + i0 * x0_now[i] + slope * (x0_now[i] - x0_prev[i]);
    return out;
}

Tensor sample_loop(const Predictor& predictor, const Tensor& cond, const SamplerConfig& cfg, int steps,
                   const NoiseSchedule& s, Rng& rng) {
    if (steps < 1) throw std::invalid_argument("sample_loop: steps must be >= 1");
    const StepSchedule schedule = make_step_schedule(s.steps(), steps);

    Tensor xt = rng.normal(cond.shape());
    Tensor x0_hat;
    std::vector<Tensor> history;
    std::vector<int> times;
    for (std::size_t i = 0; i < schedule.pairs.size(); ++i) {
        const auto [t_now, t_next] = schedule.pairs[i];
        x0_hat = predictor(xt, t_now + 1, cond);
        if (x0_hat.shape() != xt.shape())
            throw ShapeError("sample_loop: predictor returned " + to_string(x0_hat.shape()) + " for input " +
                             to_string(xt.shape()));
        if (!x0_hat.all_finite())
            throw std::runtime_error("sample_loop: predictor returned non-finite values at step " + std::to_string(i) +
                                     " (t=" + std::to_string(t_now) + ")");
        switch (cfg.kind) {
            case SamplerKind::DDIM: xt = ddim_step(xt, x0_hat, t_now, t_next, cfg.eta, s, rng); break;
            case SamplerKind::DPMpp2M:
                xt = history.empty()
                         ? dpmpp_2m_step(xt, x0_hat, std::nullopt, t_now, std::nullopt, t_next, s)
                         : dpmpp_2m_step(xt, x0_hat, history.back(), t_now, times.back(), t_next, s);
                break;
            case SamplerKind::DEIS: {
                history.push_back(x0_hat);
                times.push_back(t_now);
                xt = deis_step(xt, history, times, t_next, cfg.deis_order, s);
                history.erase(history.begin(), history.end() - std::min<std::ptrdiff_t>(history.size(), 2));
                times.erase(times.begin(), times.end() - std::min<std::ptrdiff_t>(times.size(), 2));
                continue;
            }
        }
        history.assign(1, x0_hat);
        times.assign(1, t_now);
    }
    return x0_hat;
}

}  // namespace bevdiff
