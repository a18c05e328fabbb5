#pragma once

#include <span>
#include <string>

#include "bevdiff/autodiff.hpp"
#include "bevdiff/gsm.hpp"

namespace bevdiff {

struct FuserConfig {
    int in_channels = 12;  ///< concatenated two-modality latent channels
    int channels = 4;      ///< per-scale width C; the fused output has 3C channels
    int scales = 3;        ///< fixed at 3
    double epsilon = 1e-4;
    GsmConfig gsm;
};

void validate(const FuserConfig& cfg);

struct PyramidFeatures {
    Var f1, f2, f3;  ///< strides 1, 2, 4
};

/// Initial raw fusion weight; softplus of it is exactly 1.
double unit_fusion_weight_raw();

/// sum_i w_i x_i / (sum_i w_i + eps), inputs already resized to a common shape.
Var fusion_preactivation(std::span<const Var> inputs, Var weights, double eps);

/// Conv(Swish(fusion_preactivation(...))) with a 3x3 same-size convolution.
Var fuse_weighted(std::span<const Var> inputs, Var weights, double eps, Var conv_w, Var conv_b);

/// Conditional three-scale bidirectional fusion network producing the clean-sample prediction.
///
/// Encoder: the noisy latent and the condition each go through their own conv pyramid, and the
/// noisy pyramid is modulated per scale by a GSM block driven by the condition pyramid, giving
/// F_in^{1,2,3}. Decoder (fast normalized fusion, softplus-positive weights):
///   F_it^2  = Conv(Swish(fuse(F_in^2, Resize(F_in^3))))
///   F_out^1 = Conv(Swish(fuse(F_in^1, Resize(F_it^2))))
///   F_out^2 = Conv(Swish(fuse(F_in^2, F_it^2, Resize(F_out^1))))
///   F_out^3 = Conv(Swish(fuse(F_in^3, Resize(F_out^2))))
/// Output: concat(F_out^1, Up(F_out^2), Up(F_out^3)) at full resolution, 3C channels.
class Fuser {
public:
    explicit Fuser(FuserConfig cfg);

    void init(ParamStore& params, Rng& rng) const;

    /// which = "x" (noisy latent) or "cond".
    PyramidFeatures build_pyramid(const ParamStore& params, Var x, const std::string& which) const;
    Var forward(const ParamStore& params, Var x_t, Var cond, std::span<const int> t) const;

    int out_channels() const noexcept { return 3 * cfg_.channels; }
    const FuserConfig& config() const noexcept { return cfg_; }
    const GsmBlock& gsm(int scale) const { return gsm_.at(scale); }

private:
    Var node(const ParamStore& params, const std::string& name, std::span<const Var> inputs) const;

    FuserConfig cfg_;
    std::vector<GsmBlock> gsm_;
};

}  // namespace bevdiff
