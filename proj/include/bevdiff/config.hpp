#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bevdiff/bifpn.hpp"
#include "bevdiff/heads.hpp"
#include "bevdiff/kv.hpp"
#include "bevdiff/losses.hpp"
#include "bevdiff/noise_schedule.hpp"
#include "bevdiff/psdt.hpp"
#include "bevdiff/samplers.hpp"
#include "bevdiff/synth.hpp"

namespace bevdiff {

enum class TaskMode { Seg, Det, Joint };
enum class ModelInputs { Both, LidarOnly };
enum class OptimizerKind { Sgd, Adam };

struct RunConfig {
    // data and outputs
    std::string data_train;
    std::string data_eval;
    std::string out_dir = "out";
    std::string checkpoint;
    int eval_scenes = 0;  ///< 0 = every scene in the eval file

    // seeds
    std::uint64_t seed_data = 1;
    std::uint64_t seed_init = 1;
    std::uint64_t seed_noise = 1;

    // model
    TaskMode task = TaskMode::Seg;
    ModelInputs inputs = ModelInputs::Both;
    FuserConfig fuser;
    HeadConfig heads;
    bool gsm_guard = true;

    // diffusion and sampling
    int diffusion_T = 100;
    ScheduleKind schedule = ScheduleKind::Linear;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    SamplerConfig sampler;
    int sampler_steps = 4;

    // training
    PsdtConfig psdt;
    LossWeights loss;
    int epochs = 24;
    int batch = 8;
    int max_steps = 0;  ///< 0 = no cap
    OptimizerKind optimizer = OptimizerKind::Adam;
    double lr = 0.003;
    double lr_min = 0.0;
    double grad_clip = 1.0;  ///< global L2 norm; 0 disables
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    int log_every = 0;

    // evaluation
    double seg_threshold = 0.5;
    double ap_threshold = 2.0;

    SynthConfig synth;
};

/// Every key with its current value, sorted by key.
std::map<std::string, std::string> to_kv(const RunConfig& cfg);
/// Overwrites fields named in kv; unknown keys or bad values throw ConfigError.
void apply_kv(RunConfig& cfg, const std::map<std::string, std::string>& kv);
/// Cross-field checks; throws ConfigError naming the offending key.
void validate(const RunConfig& cfg);

/// Parses flat "key = value" text; '#' starts a comment. Throws ConfigError with the line number.
std::map<std::string, std::string> parse_kv_text(const std::string& text);
RunConfig load_config(const std::string& path);

/// Canonical "key = value" lines, sorted by key.
std::string config_snapshot(const RunConfig& cfg);
/// FNV-1a-64 of the snapshot as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

std::string to_string(TaskMode m);
std::string to_string(ModelInputs m);
std::string to_string(OptimizerKind k);

/// The model channel contract derived from the data config: in = 2 c_in, fuser width C = 2 c_in / 3.
void derive_channels(RunConfig& cfg);

}  // namespace bevdiff
