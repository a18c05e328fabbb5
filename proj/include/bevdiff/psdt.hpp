#pragma once

#include <string>

#include "bevdiff/rng.hpp"
#include "bevdiff/tensor.hpp"

namespace bevdiff {

/// Channel layout of the concatenated latent: camera block first, then lidar.
enum class Modality { Camera, Lidar };

enum class DropTarget { Camera, Lidar, Random };
enum class Granularity { Element, Modality };

DropTarget parse_drop_target(const std::string& s);
Granularity parse_granularity(const std::string& s);
std::string to_string(DropTarget t);
std::string to_string(Granularity g);

struct PsdtConfig {
    double alpha_max = 25.0;  ///< percent
    int total_epochs = 1;
    DropTarget target = DropTarget::Random;
    Granularity granularity = Granularity::Modality;
};

void validate(const PsdtConfig& cfg);

/// Linear ramp (alpha_max / 100) * (e / E); epochs past E are clamped to E.
double dropout_prob(int epoch, const PsdtConfig& cfg);

struct MaskResult {
    Tensor masked;
    Tensor mask;  ///< 1 = kept; same shape as the features
};

/// Drops the selected modality's channel block of every sample in features [N, 2C, H, W].
/// Element granularity draws a keep bit per element with P(keep) = 1 - p; modality granularity
/// draws one keep bit per sample for the whole block. Kept values are not rescaled.
MaskResult mask_modality(const Tensor& features, Modality which, double p, Granularity granularity, Rng& rng);

/// Applies an existing mask (features * mask).
Tensor apply_mask(const Tensor& features, const Tensor& mask);

/// PSDT masking of a batch: each sample independently picks the dropped modality when the
/// target is Random.
MaskResult psdt_mask(const Tensor& features, double p, const PsdtConfig& cfg, Rng& rng);

/// Zero a whole modality block; models a failed sensor at inference time.
Tensor drop_modality(const Tensor& features, Modality which);

}  // namespace bevdiff
