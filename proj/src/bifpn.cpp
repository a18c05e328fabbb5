#include "bevdiff/bifpn.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

namespace bevdiff {

void validate(const FuserConfig& cfg) {
    if (cfg.scales != 3) throw std::invalid_argument("fuser.scales must be 3, got " + std::to_string(cfg.scales));
    if (cfg.channels < 1 || cfg.in_channels < 1) throw std::invalid_argument("fuser channel counts must be >= 1");
    if (!(cfg.epsilon > 0)) throw std::invalid_argument("fuser.epsilon must be > 0");
}

double unit_fusion_weight_raw() { return std::log(std::expm1(1.0)); }

Var fusion_preactivation(std::span<const Var> inputs, Var weights, double eps) {
    return normalized_fusion(inputs, weights, eps);
}

Var fuse_weighted(std::span<const Var> inputs, Var weights, double eps, Var conv_w, Var conv_b) {
    return conv2d(swish(fusion_preactivation(inputs, weights, eps)), conv_w, conv_b, 1, 1);
}

namespace {

constexpr std::array<std::pair<const char*, int>, 4> kFusionNodes{{{"it2", 2}, {"out1", 2}, {"out2", 3}, {"out3", 2}}};

}  // namespace

Fuser::Fuser(FuserConfig cfg) : cfg_(cfg) {
    validate(cfg_);
    for (int s = 1; s <= 3; ++s) gsm_.emplace_back("fuser.gsm" + std::to_string(s), cfg_.channels, cfg_.gsm);
}

void Fuser::init(ParamStore& params, Rng& rng) const {
    const int C = cfg_.channels;
    for (const char* which : {"x", "cond"}) {
        const std::string base = std::string("fuser.pyr.") + which;
        params.add(base + ".c1.w", init_uniform({C, cfg_.in_channels, 3, 3}, cfg_.in_channels * 9, rng));
        params.add(base + ".c1.b", init_uniform({C}, cfg_.in_channels * 9, rng));
        for (const char* level : {".c2", ".c3"}) {
            params.add(base + level + ".w", init_uniform({C, C, 3, 3}, C * 9, rng));
            params.add(base + level + ".b", init_uniform({C}, C * 9, rng));
        }
    }
    for (const auto& g : gsm_) g.init(params, rng);
    for (const auto& [name, arity] : kFusionNodes) {
        const std::string base = std::string("fuser.") + name;
        params.add(base + ".fw", Tensor(Shape{arity}, unit_fusion_weight_raw()));
        params.add(base + ".conv.w", init_uniform({C, C, 3, 3}, C * 9, rng));
        params.add(base + ".conv.b", init_uniform({C}, C * 9, rng));
    }
}

PyramidFeatures Fuser::build_pyramid(const ParamStore& params, Var x, const std::string& which) const {
    const Tensor& v = x.value();
    if (v.rank() != 4 || v.dim(1) != cfg_.in_channels)
        throw ShapeError("build_pyramid: expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                         to_string(v.shape()));
    if (v.dim(2) % 4 != 0 || v.dim(3) % 4 != 0)
        throw ShapeError("build_pyramid: spatial dims must be divisible by 4, got " + to_string(v.shape()));
    Tape& tape = x.tape();
    const std::string base = "fuser.pyr." + which;
    auto conv = [&](Var in, const char* level, int stride) {
        return conv2d(in, tape.parameter(params, base + level + ".w"), tape.parameter(params, base + level + ".b"), stride, 1);
    };
    PyramidFeatures p;
    p.f1 = conv(x, ".c1", 1);
    p.f2 = conv(p.f1, ".c2", 2);
    p.f3 = conv(p.f2, ".c3", 2);
    return p;
}

Var Fuser::node(const ParamStore& params, const std::string& name, std::span<const Var> inputs) const {
    Tape& tape = inputs.front().tape();
    const std::string base = "fuser." + name;
    Var weights = softplus(tape.parameter(params, base + ".fw"));
    return fuse_weighted(inputs, weights, cfg_.epsilon, tape.parameter(params, base + ".conv.w"),
                         tape.parameter(params, base + ".conv.b"));
}

Var Fuser::forward(const ParamStore& params, Var x_t, Var cond, std::span<const int> t) const {
    require_same_shape(x_t.value(), cond.value(), "fuser_forward");
    const PyramidFeatures noisy = build_pyramid(params, x_t, "x");
    const PyramidFeatures guide = build_pyramid(params, cond, "cond");

    const Var in1 = gsm_[0].modulate(params, noisy.f1, guide.f1, t);
    const Var in2 = gsm_[1].modulate(params, noisy.f2, guide.f2, t);
    const Var in3 = gsm_[2].modulate(params, noisy.f3, guide.f3, t);

    auto resize_like = [](Var v, Var like) { return bilinear_resize(v, like.value().dim(2), like.value().dim(3)); };

    const Var it2 = node(params, "it2", std::array{in2, resize_like(in3, in2)});
    const Var out1 = node(params, "out1", std::array{in1, resize_like(it2, in1)});
    const Var out2 = node(params, "out2", std::array{in2, it2, resize_like(out1, in2)});
    const Var out3 = node(params, "out3", std::array{in3, resize_like(out2, in3)});

    return concat(std::array{out1, resize_like(out2, out1), resize_like(out3, out1)}, 1);
}

}  // namespace bevdiff
