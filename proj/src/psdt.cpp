#include "bevdiff/psdt.hpp"

#include <algorithm>
#include <stdexcept>

namespace bevdiff {

DropTarget parse_drop_target(const std::string& s) {
    if (s == "camera") return DropTarget::Camera;
    if (s == "lidar") return DropTarget::Lidar;
    if (s == "random") return DropTarget::Random;
    throw std::invalid_argument("unknown psdt.target '" + s + "' (expected camera, lidar or random)");
}

Granularity parse_granularity(const std::string& s) {
    if (s == "element") return Granularity::Element;
    if (s == "modality") return Granularity::Modality;
    throw std::invalid_argument("unknown psdt.granularity '" + s + "' (expected element or modality)");
}

std::string to_string(DropTarget t) {
    switch (t) {
        case DropTarget::Camera: return "camera";
        case DropTarget::Lidar: return "lidar";
        case DropTarget::Random: return "random";
    }
    return "?";
}

std::string to_string(Granularity g) { return g == Granularity::Element ? "element" : "modality"; }

void validate(const PsdtConfig& cfg) {
    if (!(cfg.alpha_max >= 0 && cfg.alpha_max <= 100)) throw std::invalid_argument("psdt.alpha_max must be in [0, 100]");
    if (cfg.total_epochs < 1) throw std::invalid_argument("psdt total epochs must be >= 1");
}

double dropout_prob(int epoch, const PsdtConfig& cfg) {
    validate(cfg);
    if (epoch < 0) throw std::invalid_argument("dropout_prob: epoch must be >= 0");
    const int e = std::min(epoch, cfg.total_epochs);
    if (e == cfg.total_epochs) return cfg.alpha_max / 100.0;
    return cfg.alpha_max / 100.0 * (static_cast<double>(e) / cfg.total_epochs);
}

namespace {

std::pair<int, int> block_of(const Tensor& features, Modality which) {
    require_rank(features, 4, "mask_modality");
    if (features.dim(1) % 2 != 0)
        throw ShapeError("mask_modality: channel count must be even (two equal modality blocks), got " +
                         to_string(features.shape()));
    const int half = features.dim(1) / 2;
    return which == Modality::Camera ? std::pair{0, half} : std::pair{half, 2 * half};
}

}  // namespace

MaskResult mask_modality(const Tensor& features, Modality which, double p, Granularity granularity, Rng& rng) {
    if (!(p >= 0 && p <= 1)) throw std::invalid_argument("mask_modality: p must be in [0, 1]");
    const auto [c0, c1] = block_of(features, which);
    const int N = features.dim(0), C = features.dim(1);
    const std::size_t plane = static_cast<std::size_t>(features.dim(2)) * features.dim(3);
    MaskResult r{features, Tensor(features.shape(), 1.0)};
    for (int n = 0; n < N; ++n) {
        const bool keep_block = granularity == Granularity::Element || !rng.bernoulli(p);
        for (int c = c0; c < c1; ++c) {
            const std::size_t off = (static_cast<std::size_t>(n) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const bool keep = granularity == Granularity::Element ? !rng.bernoulli(p) : keep_block;
                if (!keep) {
                    r.mask[off + i] = 0.0;
                    r.masked[off + i] = 0.0;
                }
            }
        }
    }
    return r;
}

Tensor apply_mask(const Tensor& features, const Tensor& mask) {
    require_same_shape(features, mask, "apply_mask");
    Tensor out = features;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    return out;
}

MaskResult psdt_mask(const Tensor& features, double p, const PsdtConfig& cfg, Rng& rng) {
    if (cfg.target != DropTarget::Random)
        return mask_modality(features, cfg.target == DropTarget::Camera ? Modality::Camera : Modality::Lidar, p,
                             cfg.granularity, rng);
    require_rank(features, 4, "psdt_mask");
    MaskResult r{features, Tensor(features.shape(), 1.0)};
    const std::size_t per = features.size() / features.dim(0);
    for (int n = 0; n < features.dim(0); ++n) {
        const Modality which = rng.bernoulli(0.5) ? Modality::Camera : Modality::Lidar;
        MaskResult one = mask_modality(batch_item(features, n), which, p, cfg.granularity, rng);
        std::copy(one.masked.data().begin(), one.masked.data().end(), r.masked.data().begin() + n * per);
        std::copy(one.mask.data().begin(), one.mask.data().end(), r.mask.data().begin() + n * per);
    }
    return r;
}

Tensor drop_modality(const Tensor& features, Modality which) {
    Rng unused(0);
    return mask_modality(features, which, 1.0, Granularity::Modality, unused).masked;
}

}  // namespace bevdiff
