#include "bevdiff/metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace bevdiff {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

namespace {

Shape class_map_shape(const Tensor& t) {
    if (t.rank() == 3) return t.shape();
    if (t.rank() == 4 && t.dim(0) == 1) return {t.dim(1), t.dim(2), t.dim(3)};
    throw ShapeError("miou: expected [C,H,W] or [1,C,H,W], got " + to_string(t.shape()));
}

}  // namespace

IoUResult miou(const Tensor& prob, const Tensor& gt, double threshold) {
    const Shape ps = class_map_shape(prob), gs = class_map_shape(gt);
    if (ps != gs) throw ShapeError("miou: shape mismatch " + to_string(prob.shape()) + " vs " + to_string(gt.shape()));
    if (!(threshold > 0 && threshold < 1)) throw std::invalid_argument("miou: threshold must be in (0, 1)");
    const int classes = ps[0];
    const std::size_t plane = prob.size() / classes;
    IoUResult r;
    double total = 0.0;
    for (int c = 0; c < classes; ++c) {
        std::size_t inter = 0, uni = 0;
        for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) {
            const bool p = prob[i] > threshold;
            const bool g = gt[i] > 0.5;
            inter += p && g;
            uni += p || g;
        }
        if (uni == 0) {
            r.per_class.push_back(kNaN);
            continue;
        }
        const double iou = static_cast<double>(inter) / static_cast<double>(uni);
        r.per_class.push_back(iou);
        total += iou;
        ++r.count;
    }
    r.mean = r.count > 0 ? total / r.count : kNaN;
    return r;
}

double average_precision(const DetectionSet& dets, const std::vector<GtBox>& gts, double center_dist_threshold) {
    if (!(center_dist_threshold > 0)) throw std::invalid_argument("average_precision: threshold must be > 0");
    for (std::size_t i = 1; i < dets.size(); ++i)
        if (dets[i].confidence > dets[i - 1].confidence)
            throw std::invalid_argument("average_precision: detections must be sorted by descending confidence");
    if (gts.empty()) return kNaN;

    std::vector<char> taken(gts.size(), 0);
    std::vector<double> precision, recall;
    int tp = 0;
    for (std::size_t k = 0; k < dets.size(); ++k) {
        int best = -1;
        double best_d = 0.0;
        for (std::size_t j = 0; j < gts.size(); ++j) {
            if (taken[j]) continue;
            const double d = std::hypot(dets[k].cx - gts[j].cx, dets[k].cy - gts[j].cy);
            if (d <= center_dist_threshold && (best < 0 || d < best_d)) {
                best = static_cast<int>(j);
                best_d = d;
            }
        }
        if (best >= 0) {
            taken[best] = 1;
            ++tp;
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
    }
    // Interpolated precision: running maximum from the right.
    for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t k = 0; k < precision.size(); ++k) {
        ap += (recall[k] - prev_recall) * precision[k];
        prev_recall = recall[k];
    }
    return ap;
}

double mean_average_precision(const DetectionSet& dets, const std::vector<GtBox>& gts, int det_classes,
                              double center_dist_threshold) {
    double total = 0.0;
    int count = 0;
    for (int c = 0; c < det_classes; ++c) {
        DetectionSet dc;
        std::vector<GtBox> gc;
        for (const auto& d : dets)
            if (d.label() == c) dc.push_back(d);
        for (const auto& g : gts)
            if (g.cls == c) gc.push_back(g);
        const double ap = average_precision(dc, gc, center_dist_threshold);
        if (std::isnan(ap)) continue;
        total += ap;
        ++count;
    }
    return count > 0 ? total / count : kNaN;
}

}  // namespace bevdiff
