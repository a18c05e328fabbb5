#pragma once

#include <vector>

#include "bevdiff/heads.hpp"
#include "bevdiff/tensor.hpp"

namespace bevdiff {

struct IoUResult {
    std::vector<double> per_class;  ///< NaN where the class is absent from both maps
    double mean = 0.0;              ///< NaN when count == 0
    int count = 0;                  ///< classes entering the mean
};

/// Thresholded per-class IoU. prob and gt are each [C,H,W] or [1,C,H,W]; a cell is predicted when prob > threshold.
IoUResult miou(const Tensor& prob, const Tensor& gt, double threshold = 0.5);

/// Center-distance AP of detections already sorted by descending confidence. Each detection is greedily
/// matched to the nearest unmatched ground truth within the threshold. Returns NaN when gts is empty.
double average_precision(const DetectionSet& dets, const std::vector<GtBox>& gts, double center_dist_threshold = 2.0);

/// AP per class (detections labelled by their argmax logit), averaged over classes that have ground truth.
/// NaN when no class has ground truth.
double mean_average_precision(const DetectionSet& dets, const std::vector<GtBox>& gts, int det_classes,
                              double center_dist_threshold = 2.0);

}  // namespace bevdiff
