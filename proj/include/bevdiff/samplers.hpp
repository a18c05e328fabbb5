#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bevdiff/noise_schedule.hpp"
#include "bevdiff/rng.hpp"
#include "bevdiff/tensor.hpp"

namespace bevdiff {

// Sampler time indices run over [-1, T-1]; index k corresponds to schedule timestep k + 1, so
// k = -1 is the clean state (alpha_bar = 1) and k = T-1 the noisiest.

enum class SamplerKind { DDIM, DPMpp2M, DEIS };

SamplerKind parse_sampler_kind(const std::string& s);
std::string to_string(SamplerKind k);

struct SamplerConfig {
    SamplerKind kind = SamplerKind::DDIM;
    double eta = 0.0;     ///< DDIM only
    int deis_order = 2;   ///< 1 or 2
};

/// Signal and noise scales sqrt(alpha_bar), sqrt(1 - alpha_bar) at one time index.
struct NoiseLevel {
    double signal;
    double noise;

    static NoiseLevel from_alpha_bar(double alpha_bar);
    double log_snr() const;
};

NoiseLevel noise_level(const NoiseSchedule& s, int k);

using TimePair = std::pair<int, int>;

struct StepSchedule {
    std::vector<TimePair> pairs;
};

/// reverse(linspace(-1, T-1, steps+1)) rounded to integers, zipped into consecutive pairs.
StepSchedule make_step_schedule(int T, int steps);

/// DDIM update from explicit noise levels; sigma = 0 when eta = 0 and no randomness is drawn.
Tensor ddim_update(const Tensor& xt, const Tensor& x0_hat, NoiseLevel now, NoiseLevel next, double eta, Rng& rng);

Tensor ddim_step(const Tensor& xt, const Tensor& x0_hat, int t_now, int t_next, double eta, const NoiseSchedule& s,
                 Rng& rng);

/// DPM-Solver++(2M) in data-prediction form. Without history (or when stepping to the clean
/// state) this is the first-order update, identical to DDIM with eta = 0.
Tensor dpmpp_2m_step(const Tensor& xt, const Tensor& x0_hat, const std::optional<Tensor>& x0_hat_prev, int t_now,
                     std::optional<int> t_prev, int t_next, const NoiseSchedule& s);

/// Exponential-integrator step with the data prediction extrapolated linearly in log-SNR and the
/// exponential weight integrated exactly. History holds the most recent prediction last. Order 2
/// needs two entries; with fewer, or when stepping to the clean state, it falls back to order 1.
Tensor deis_step(const Tensor& xt, std::span<const Tensor> x0_history, std::span<const int> t_history, int t_next,
                 int order, const NoiseSchedule& s);

/// (x_t, schedule timestep in [1, T], condition) -> predicted clean sample.
using Predictor = std::function<Tensor(const Tensor& xt, int t, const Tensor& cond)>;

/// Starts from x_T ~ N(0, I) shaped like cond, steps over make_step_schedule and returns the clean
/// sample predicted by the last predictor call.
Tensor sample_loop(const Predictor& predictor, const Tensor& cond, const SamplerConfig& cfg, int steps,
                   const NoiseSchedule& s, Rng& rng);

}  // namespace bevdiff
