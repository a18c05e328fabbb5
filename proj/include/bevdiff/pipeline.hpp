#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bevdiff/config.hpp"
#include "bevdiff/metrics.hpp"

namespace bevdiff {

/// Fuser + heads + schedule for one configuration. Parameters live outside so frozen copies can be shared.
class Model {
public:
    explicit Model(const RunConfig& cfg);

    ParamStore init_params() const;

    /// Clean latent of one scene as seen by this model: [1, 2 c_in, H, W], camera block zeroed for a
    /// lidar-only model.
    Tensor latent(const ModalityPair& f) const;

    /// x0 prediction on a tape; t holds schedule timesteps in [1, T].
    Var predict(const ParamStore& params, Var x_t, Var cond, std::span<const int> t) const;
    /// Tape-free prediction for the sampler.
    Tensor predict(const ParamStore& params, const Tensor& x_t, int t, const Tensor& cond) const;

    const RunConfig& config() const noexcept { return cfg_; }
    const NoiseSchedule& schedule() const noexcept { return schedule_; }
    const Fuser& fuser() const noexcept { return fuser_; }
    const SegHead& seg_head() const noexcept { return seg_; }
    const DetHead& det_head() const noexcept { return det_; }
    bool uses_seg() const noexcept { return cfg_.task != TaskMode::Det; }
    bool uses_det() const noexcept { return cfg_.task != TaskMode::Seg; }

private:
    RunConfig cfg_;
    NoiseSchedule schedule_;
    Fuser fuser_;
    SegHead seg_;
    DetHead det_;
};

struct StepLog {
    int step = 0;
    int epoch = 0;  ///< 1-based
    double dropout_p = 0;
    double lr = 0;
    double total = 0;
    double diffusion = 0;
    double seg = 0;
    double det = 0;
};

struct TrainResult {
    ParamStore params;
    std::vector<StepLog> steps;
};

using StepCallback = std::function<void(const StepLog&)>;

/// Training loop: per step, concat both modality latents into x0 (the diffusion target), PSDT-mask a
/// copy into the condition, draw t uniform in [1, T], noise x0 to x_t, predict x0, apply the heads to
/// the prediction and descend the weighted total loss. Throws std::runtime_error on a non-finite loss
/// or parameter, naming the step.
TrainResult train(const RunConfig& cfg, const Dataset& data, const StepCallback& on_step = {});

/// Total steps train() will run for this dataset size.
int planned_steps(const RunConfig& cfg, std::size_t n_scenes);

enum class SensorCondition { Both, CameraDropped, LidarDropped };
std::string to_string(SensorCondition c);

struct InferResult {
    Tensor x0_hat;    ///< [1, 2 c_in, H, W]
    Tensor seg_prob;  ///< [1, 3, H, W]
    DetectionSet detections;
};

/// Conditional sampling: the clean latent (optionally with a failed sensor) conditions sample_loop; the
/// heads run on its final x0 prediction. noise_key selects the x_T draw.
InferResult infer(const Model& model, const ParamStore& params, const ModalityPair& features, SensorCondition condition,
                  SamplerKind solver, int steps, std::uint64_t noise_key);

/// One metrics row. scene_id is a scene index, or "mean" / "std" / "-".
struct MetricsRow {
    std::string experiment;
    std::string scene_id;
    std::string metric;
    std::string cls;
    double value = 0;
};

/// Append-only table; every CSV row carries the config hash and seed it was produced from.
class MetricsReport {
public:
    MetricsReport(std::string config_hash, std::uint64_t seed) : hash_(std::move(config_hash)), seed_(seed) {}

    void add(MetricsRow row) { rows_.push_back(std::move(row)); }
    void append(const MetricsReport& other);
    const std::vector<MetricsRow>& rows() const noexcept { return rows_; }
    /// Rows matching experiment and metric (and class if non-empty) for scene_id == "mean".
    std::optional<double> mean(const std::string& experiment, const std::string& metric, const std::string& cls = "all") const;

    static std::string csv_header();
    std::string to_csv(bool header = true) const;
    void write_csv(const std::string& path, bool append = false) const;

private:
    std::string hash_;
    std::uint64_t seed_;
    std::vector<MetricsRow> rows_;
};

void add_training_rows(MetricsReport& report, const TrainResult& result);

struct EvalSummary {
    double miou_mean = 0;
    double miou_std = 0;
    double ap_mean = 0;  ///< NaN when the task has no detection head
    int scenes = 0;
};

/// Per-scene mIoU (and mAP for det/joint tasks) plus mean/std rows under the given experiment name.
EvalSummary evaluate(const Model& model, const ParamStore& params, const Dataset& data, SensorCondition condition,
                     SamplerKind solver, int steps, const std::string& experiment, MetricsReport& report);

/// Steps used by the solver sweep and the robustness experiment.
inline constexpr int kSweepSteps[] = {1, 2, 4, 8};

/// mIoU for {DDIM, DPM-Solver++, DEIS} x steps {1, 2, 4, 8}.
void solver_sweep(const Model& model, const ParamStore& params, const Dataset& data, MetricsReport& report);

/// mIoU under {both, camera dropped, lidar dropped} x steps {1, 2, 4, 8} for a PSDT-trained and a
/// plain model, using the configured solver.
void robustness_eval(const Model& psdt_model, const ParamStore& psdt_params, const Model& plain_model,
                     const ParamStore& plain_params, const Dataset& data, MetricsReport& report);

std::string experiment_name(const std::string& prefix, SamplerKind solver, int steps, SensorCondition c);

/// Checkpoint = container of kind "checkpoint" with f64 parameter arrays and the architecture keys.
void save_checkpoint(const std::string& path, const ParamStore& params, const RunConfig& cfg);
/// Loads parameters and overwrites the architecture keys of cfg with the stored ones.
ParamStore load_checkpoint(const std::string& path, RunConfig& cfg);

/// Scenes used for evaluation: the first eval.scenes of the dataset (all when 0).
Dataset eval_subset(const Dataset& d, int max_scenes);

}  // namespace bevdiff
