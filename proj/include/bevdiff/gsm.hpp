#pragma once

#include <span>
#include <string>
#include <vector>

#include "bevdiff/autodiff.hpp"
#include "bevdiff/noise_schedule.hpp"

namespace bevdiff {

/// Branch toggles and shape knobs of the gated, self-conditioned modulation block.
struct GsmConfig {
    bool scale = true;        ///< film_alpha branch; off forces film_alpha = 0
    bool shift = true;        ///< film_beta branch; off forces film_beta = 0
    bool gate = true;         ///< sigmoid gate; off forces gamma = 1
    bool per_channel = false; ///< spatially averaged modulation maps instead of per-position ones
    int time_dim = 32;        ///< 0 disables the time embedding
    int kernel = 3;
};

GsmConfig gsm_ablation_config(bool scale, bool shift, bool gate);

/// Sinusoidal embedding: [sin(t w_0), cos(t w_0), sin(t w_1), ...] with w_i = 10000^(-2i/dim).
std::vector<double> time_embedding(int t, int dim);

/// One modulation block. Parameters live in a ParamStore under `prefix`:
///   <prefix>.{gamma,alpha,beta}.{w,b}   3 convs C -> C
///   <prefix>.time.{w,b}                 linear time_dim -> C
///
/// modulate() computes
///   c'    = cond + project(time_embedding(t))
///   gamma = sigmoid(conv_gamma(c')),  film_alpha = conv_alpha(c'),  film_beta = conv_beta(c')
///   out   = gamma * (x_t * (1 + film_alpha) + film_beta)
class GsmBlock {
public:
    GsmBlock(std::string prefix, int channels, GsmConfig cfg = {});

    void init(ParamStore& params, Rng& rng) const;
    /// t holds one schedule timestep per batch element.
    Var modulate(const ParamStore& params, Var x_t, Var cond, std::span<const int> t) const;

    const GsmConfig& config() const noexcept { return cfg_; }
    int channels() const noexcept { return channels_; }
    const std::string& prefix() const noexcept { return prefix_; }

private:
    Var branch(const ParamStore& params, const char* name, Var cond) const;

    std::string prefix_;
    int channels_;
    GsmConfig cfg_;
};

/// Forward noising used during training. With the guard on, x0 enters the noise-injection path
/// through stop_gradient, so gradient reaches x0's producer only via the condition branches.
Var guarded_q_sample(Var x0, std::span<const int> t, Var eps, const NoiseSchedule& s, bool guard);

}  // namespace bevdiff
