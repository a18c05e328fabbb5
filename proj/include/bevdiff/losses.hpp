#pragma once

#include <array>
#include <utility>
#include <vector>

#include "bevdiff/autodiff.hpp"
#include "bevdiff/tensor.hpp"

namespace bevdiff {

struct LossWeights {
    double lambda_diff = 1.0;
    double lambda_seg = 1.0;
    double lambda_det = 1.0;
    double lambda_cls = 1.0;
    double lambda_reg = 0.25;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
};

void validate(const LossWeights& w);

/// Mean squared error over all elements.
double diffusion_loss(const Tensor& pred_x0, const Tensor& target_x0);
Var diffusion_loss(Var pred_x0, const Tensor& target_x0);

/// Binary focal loss of one probability; p is clamped to [1e-7, 1 - 1e-7].
double focal_loss(double prob, bool is_positive, double alpha, double gamma);
/// Mean focal loss over a probability map and a same-shape binary target map.
double focal_loss_map(const Tensor& prob, const Tensor& target, double alpha, double gamma);

double smooth_l1(double x);

/// Minimal K x M cost matrix, row-major.
struct CostMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> values;

    CostMatrix() = default;
    CostMatrix(int r, int c, double fill = 0.0) : rows(r), cols(c), values(static_cast<std::size_t>(r) * c, fill) {}
    double& operator()(int i, int j) { return values[static_cast<std::size_t>(i) * cols + j]; }
    double operator()(int i, int j) const { return values[static_cast<std::size_t>(i) * cols + j]; }
};

struct Assignment {
    std::vector<std::pair<int, int>> pairs;  ///< (prediction, ground truth), sorted by prediction
    std::vector<int> unmatched;              ///< prediction indices without a partner, ascending
    double cost = 0.0;
};

/// Minimum-cost one-to-one assignment of min(K, M) pairs. Throws on empty or non-finite input.
Assignment hungarian_match(const CostMatrix& cost);

/// Ground-truth box in grid units; heading in radians.
struct GtBox {
    double cx = 0, cy = 0, w = 1, h = 1, heading = 0;
    int cls = 0;

    friend bool operator==(const GtBox&, const GtBox&) = default;
};

struct BoxPrediction {
    double cx = 0, cy = 0, w = 1, h = 1, heading = 0;
    std::vector<double> logits;  ///< one per detection class
    double confidence = 0;       ///< max class probability
    int cell = -1;               ///< source cell (row-major), -1 if not from a dense head

    int label() const;
};

/// Box parameters used by both the matching cost and the regression loss: cx, cy, log w, log h, heading.
std::array<double, 5> box_params(double cx, double cy, double w, double h, double heading);

/// lambda_cls * (focal(positive) - focal(negative)) of the gt class + lambda_reg * L1 of box parameters.
CostMatrix detection_cost(const std::vector<BoxPrediction>& preds, const std::vector<GtBox>& gts, const LossWeights& w);

/// lambda_cls * sum focal over all predictions and classes / max(1, matches)
///   + lambda_reg * sum smooth-L1 of matched box parameters / max(1, matches).
double detection_loss(const std::vector<BoxPrediction>& preds, const std::vector<GtBox>& gts, const LossWeights& w);

/// l_diff * lambda_diff + lambda_seg * l_seg + lambda_det * l_det.
double total_loss(double l_diff, double l_seg, double l_det, const LossWeights& w);
Var total_loss(Var l_diff, Var l_seg, Var l_det, const LossWeights& w);

}  // namespace bevdiff
