#pragma once

#include <span>
#include <vector>

#include "bevdiff/autodiff.hpp"
#include "bevdiff/losses.hpp"

namespace bevdiff {

struct HeadConfig {
    int in_channels = 12;  ///< fuser output width 3C
    int hidden = 16;
    int seg_classes = 3;
    int det_classes = 2;
    int top_k = 16;
};

void validate(const HeadConfig& cfg);

/// Conv3x3 -> Swish -> Conv3x3; segmentation returns per-class logits, sigmoid gives the SegMap.
class SegHead {
public:
    explicit SegHead(HeadConfig cfg);
    void init(ParamStore& params, Rng& rng) const;
    Var logits(const ParamStore& params, Var fused) const;
    /// Per-class probabilities [N, seg_classes, H, W].
    Tensor predict(const ParamStore& params, const Tensor& fused) const;

private:
    HeadConfig cfg_;
};

/// Dense per-cell detection map: det_classes logits, then offset x, offset y, log w, log h, heading.
class DetHead {
public:
    explicit DetHead(HeadConfig cfg);
    void init(ParamStore& params, Rng& rng) const;
    Var raw(const ParamStore& params, Var fused) const;
    int channels() const noexcept { return cfg_.det_classes + 5; }

private:
    HeadConfig cfg_;
};

using DetectionSet = std::vector<BoxPrediction>;

/// Decodes sample n of a raw map [N, det_classes + 5, H, W] and keeps the min(K, H*W) most confident
/// cells. Equal confidences keep row-major cell order. Cell (i, j) has centre (j + 0.5 + dx, i + 0.5 + dy).
DetectionSet decode_detections(const Tensor& raw, int n, int det_classes, int k);

/// Batch-mean Hungarian-matched detection loss on the top-K cells of each sample, differentiable
/// with respect to the raw map.
Var detection_loss(Var raw, std::span<const std::vector<GtBox>> gts, int det_classes, int k, const LossWeights& w);

/// Per-class focal loss of segmentation logits against a binary class map, mean-reduced.
Var segmentation_loss(Var logits, const Tensor& target, const LossWeights& w);

}  // namespace bevdiff
