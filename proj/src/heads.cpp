#include "bevdiff/heads.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace bevdiff {

void validate(const HeadConfig& cfg) {
    if (cfg.in_channels < 1 || cfg.hidden < 1 || cfg.seg_classes < 1 || cfg.det_classes < 1)
        throw std::invalid_argument("head channel and class counts must be >= 1");
    if (cfg.top_k < 1) throw std::invalid_argument("det.top_k must be >= 1");
}

namespace {

void init_two_convs(ParamStore& params, const std::string& base, int in, int hidden, int out, Rng& rng) {
    params.add(base + ".c1.w", init_uniform({hidden, in, 3, 3}, in * 9, rng));
    params.add(base + ".c1.b", init_uniform({hidden}, in * 9, rng));
    params.add(base + ".c2.w", init_uniform({out, hidden, 3, 3}, hidden * 9, rng));
    params.add(base + ".c2.b", init_uniform({out}, hidden * 9, rng));
}

Var two_convs(const ParamStore& params, const std::string& base, Var x) {
    Tape& t = x.tape();
    Var h = swish(conv2d(x, t.parameter(params, base + ".c1.w"), t.parameter(params, base + ".c1.b"), 1, 1));
    return conv2d(h, t.parameter(params, base + ".c2.w"), t.parameter(params, base + ".c2.b"), 1, 1);
}

void check_fused(const Var& fused, int channels, const char* op) {
    if (fused.value().rank() != 4 || fused.value().dim(1) != channels)
        throw ShapeError(std::string(op) + ": expected " + std::to_string(channels) + " fused channels, got " +
                         to_string(fused.shape()));
}

double sigmoid_of(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

SegHead::SegHead(HeadConfig cfg) : cfg_(cfg) { validate(cfg_); }

void SegHead::init(ParamStore& params, Rng& rng) const {
    init_two_convs(params, "seg", cfg_.in_channels, cfg_.hidden, cfg_.seg_classes, rng);
}

Var SegHead::logits(const ParamStore& params, Var fused) const {
    check_fused(fused, cfg_.in_channels, "seg_head");
    return two_convs(params, "seg", fused);
}

Tensor SegHead::predict(const ParamStore& params, const Tensor& fused) const {
    Tape tape(false);
    return sigmoid(logits(params, tape.constant(fused))).value();
}

DetHead::DetHead(HeadConfig cfg) : cfg_(cfg) { validate(cfg_); }

void DetHead::init(ParamStore& params, Rng& rng) const {
    init_two_convs(params, "det", cfg_.in_channels, cfg_.hidden, channels(), rng);
}

Var DetHead::raw(const ParamStore& params, Var fused) const {
    check_fused(fused, cfg_.in_channels, "det_head");
    return two_convs(params, "det", fused);
}

DetectionSet decode_detections(const Tensor& raw, int n, int det_classes, int k) {
    if (k < 1) throw std::invalid_argument("decode_detections: K must be >= 1");
    require_rank(raw, 4, "decode_detections");
    if (raw.dim(1) != det_classes + 5)
        throw ShapeError("decode_detections: expected " + std::to_string(det_classes + 5) + " channels, got " +
                         to_string(raw.shape()));
    if (n < 0 || n >= raw.dim(0)) throw std::out_of_range("decode_detections: sample index out of range");
    const int H = raw.dim(2), W = raw.dim(3);
    const int cells = H * W;

    std::vector<double> conf(cells);
    for (int c = 0; c < cells; ++c) {
        double best = 0.0;
        for (int cls = 0; cls < det_classes; ++cls) best = std::max(best, sigmoid_of(raw.at(n, cls, c / W, c % W)));
        conf[c] = best;
    }
    std::vector<int> order(cells);
    std::iota(order.begin(), order.end(), 0);
    const int keep = std::min(k, cells);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return conf[a] > conf[b]; });

    DetectionSet out;
    out.reserve(keep);
    for (int r = 0; r < keep; ++r) {
        const int c = order[r];
        const int i = c / W, j = c % W;
        BoxPrediction p;
        p.cell = c;
        p.confidence = conf[c];
        for (int cls = 0; cls < det_classes; ++cls) p.logits.push_back(raw.at(n, cls, i, j));
        p.cx = j + 0.5 + raw.at(n, det_classes, i, j);
        p.cy = i + 0.5 + raw.at(n, det_classes + 1, i, j);
        p.w = std::exp(raw.at(n, det_classes + 2, i, j));
        p.h = std::exp(raw.at(n, det_classes + 3, i, j));
        p.heading = raw.at(n, det_classes + 4, i, j);
        out.push_back(std::move(p));
    }
    return out;
}

Var detection_loss(Var raw, std::span<const std::vector<GtBox>> gts, int det_classes, int k, const LossWeights& w) {
    // Copy: recording nodes below can reallocate tape storage.
    const Tensor r = raw.value();
    require_rank(r, 4, "detection_loss");
    if (gts.size() != static_cast<std::size_t>(r.dim(0)))
        throw ShapeError("detection_loss: " + std::to_string(gts.size()) + " ground-truth lists for batch " +
                         to_string(r.shape()));
    const int C = r.dim(1), H = r.dim(2), W = r.dim(3);
    auto flat = [&](int n, int c, int cell) {
        return ((static_cast<std::size_t>(n) * C + c) * H + cell / W) * W + cell % W;
    };

    Tape& tape = raw.tape();
    Var total = tape.constant(Tensor::scalar(0.0));
    for (int n = 0; n < r.dim(0); ++n) {
        const DetectionSet preds = decode_detections(r, n, det_classes, k);
        const auto& g = gts[n];
        std::vector<int> target_of(preds.size(), -1);
        std::vector<std::pair<int, int>> pairs;
        if (!g.empty()) {
            pairs = hungarian_match(detection_cost(preds, g, w)).pairs;
            for (const auto& [i, j] : pairs) target_of[i] = j;
        }
        const double norm = std::max<double>(1.0, static_cast<double>(pairs.size()));

        std::vector<std::size_t> cls_idx;
        std::vector<double> cls_target;
        for (std::size_t i = 0; i < preds.size(); ++i)
            for (int c = 0; c < det_classes; ++c) {
                cls_idx.push_back(flat(n, c, preds[i].cell));
                cls_target.push_back(target_of[i] >= 0 && g[target_of[i]].cls == c ? 1.0 : 0.0);
            }
        Var cls = sigmoid_focal_loss(gather(raw, cls_idx), Tensor(Shape{static_cast<int>(cls_idx.size())}, cls_target),
                                     w.focal_alpha, w.focal_gamma, Reduction::Sum);
        Var sample = scale(cls, w.lambda_cls / norm);

        if (!pairs.empty()) {
            std::vector<std::size_t> reg_idx;
            std::vector<double> reg_target;
            for (const auto& [i, j] : pairs) {
                const int cell = preds[i].cell;
                const GtBox& b = g[j];
                const double targets[5] = {b.cx - (cell % W + 0.5), b.cy - (cell / W + 0.5), std::log(b.w), std::log(b.h),
                                           b.heading};
                for (int q = 0; q < 5; ++q) {
                    reg_idx.push_back(flat(n, det_classes + q, cell));
                    reg_target.push_back(targets[q]);
                }
            }
            Var resid = sub(gather(raw, reg_idx), tape.constant(Tensor(Shape{static_cast<int>(reg_idx.size())}, reg_target)));
            sample = add(sample, scale(sum(smooth_l1(resid)), w.lambda_reg / norm));
        }
        total = add(total, sample);
    }
    return scale(total, 1.0 / r.dim(0));
}

Var segmentation_loss(Var logits, const Tensor& target, const LossWeights& w) {
    return sigmoid_focal_loss(logits, target, w.focal_alpha, w.focal_gamma, Reduction::Mean);
}

}  // namespace bevdiff
