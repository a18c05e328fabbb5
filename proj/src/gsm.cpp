#include "bevdiff/gsm.hpp"

#include <cmath>
#include <stdexcept>

namespace bevdiff {

GsmConfig gsm_ablation_config(bool scale, bool shift, bool gate) {
    GsmConfig cfg;
    cfg.scale = scale;
    cfg.shift = shift;
    cfg.gate = gate;
    return cfg;
}

std::vector<double> time_embedding(int t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("time_embedding: dim must be even and >= 2, got " + std::to_string(dim));
    std::vector<double> e(dim);
    for (int i = 0; i < dim / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / dim);
        e[2 * i] = std::sin(t * freq);
        e[2 * i + 1] = std::cos(t * freq);
    }
    return e;
}

GsmBlock::GsmBlock(std::string prefix, int channels, GsmConfig cfg)
    : prefix_(std::move(prefix)), channels_(channels), cfg_(cfg) {
    if (channels_ < 1) throw std::invalid_argument("GsmBlock: channels must be >= 1");
    if (cfg_.kernel < 1 || cfg_.kernel % 2 == 0) throw std::invalid_argument("GsmBlock: kernel must be odd");
    if (cfg_.time_dim != 0 && (cfg_.time_dim < 2 || cfg_.time_dim % 2 != 0))
        throw std::invalid_argument("GsmBlock: time_dim must be 0 or an even number >= 2");
}

void GsmBlock::init(ParamStore& params, Rng& rng) const {
    const int k = cfg_.kernel;
    const int fan_in = channels_ * k * k;
    for (const char* name : {"gamma", "alpha", "beta"}) {
        params.add(prefix_ + "." + name + ".w", init_uniform({channels_, channels_, k, k}, fan_in, rng));
        params.add(prefix_ + "." + name + ".b", init_uniform({channels_}, fan_in, rng));
    }
    if (cfg_.time_dim > 0) {
        params.add(prefix_ + ".time.w", init_uniform({channels_, cfg_.time_dim}, cfg_.time_dim, rng));
        params.add(prefix_ + ".time.b", init_uniform({channels_}, cfg_.time_dim, rng));
    }
}

Var GsmBlock::branch(const ParamStore& params, const char* name, Var cond) const {
    Tape& tape = cond.tape();
    const std::string base = prefix_ + "." + name;
    Var out = conv2d(cond, tape.parameter(params, base + ".w"), tape.parameter(params, base + ".b"), 1, cfg_.kernel / 2);
    return cfg_.per_channel ? spatial_mean_broadcast(out) : out;
}

Var GsmBlock::modulate(const ParamStore& params, Var x_t, Var cond, std::span<const int> t) const {
    require_same_shape(x_t.value(), cond.value(), "gsm_modulate");
    if (x_t.value().rank() != 4 || x_t.value().dim(1) != channels_)
        throw ShapeError("gsm_modulate: expected " + std::to_string(channels_) + " channels, got " + to_string(x_t.shape()));
    if (t.size() != static_cast<std::size_t>(x_t.value().dim(0)))
        throw ShapeError("gsm_modulate: " + std::to_string(t.size()) + " timesteps for batch shape " + to_string(x_t.shape()));
    Tape& tape = cond.tape();

    Var c = cond;
    if (cfg_.time_dim > 0) {
        Tensor emb(Shape{static_cast<int>(t.size()), cfg_.time_dim});
        for (std::size_t n = 0; n < t.size(); ++n) {
            const auto e = time_embedding(t[n], cfg_.time_dim);
            std::copy(e.begin(), e.end(), emb.data().begin() + n * cfg_.time_dim);
        }
        Var proj = linear(tape.constant(std::move(emb)), tape.parameter(params, prefix_ + ".time.w"),
                          tape.parameter(params, prefix_ + ".time.b"));
        c = add_per_channel(cond, proj);
    }

    Var out = x_t;
    if (cfg_.scale) out = mul(out, add_scalar(branch(params, "alpha", c), 1.0));
    if (cfg_.shift) out = add(out, branch(params, "beta", c));
    if (cfg_.gate) out = mul(sigmoid(branch(params, "gamma", c)), out);
    return out;
}

Var guarded_q_sample(Var x0, std::span<const int> t, Var eps, const NoiseSchedule& s, bool guard) {
    return q_sample(guard ? stop_gradient(x0) : x0, t, eps, s);
}

}  // namespace bevdiff
