#include "bevdiff/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace bevdiff {

std::string to_string(TaskMode m) {
    switch (m) {
        case TaskMode::Seg: return "seg";
        case TaskMode::Det: return "det";
        case TaskMode::Joint: return "joint";
    }
    return "?";
}

std::string to_string(ModelInputs m) { return m == ModelInputs::Both ? "both" : "lidar"; }
std::string to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

namespace {

struct Field {
    const char* key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
};

template <class M>
Field str_field(const char* key, M member) {
    return {key, [member](const RunConfig& c) { return c.*member; },
            [member](RunConfig& c, const std::string&, const std::string& v) { c.*member = v; }};
}

#define BEVDIFF_FIELD(KEY, EXPR, FORMAT, PARSE)                                                      \
    Field {                                                                                          \
        KEY, [](const RunConfig& c) { return FORMAT(c.EXPR); },                                      \
            [](RunConfig& c, const std::string& k, const std::string& v) { c.EXPR = PARSE(k, v); } \
    }

std::string fmt_int(int v) { return std::to_string(v); }
std::string fmt_u64(std::uint64_t v) { return std::to_string(v); }

TaskMode parse_task(const std::string& k, const std::string& v) {
    if (v == "seg") return TaskMode::Seg;
    if (v == "det") return TaskMode::Det;
    if (v == "joint") return TaskMode::Joint;
    throw ConfigError("config key '" + k + "': expected seg, det or joint, got '" + v + "'");
}

ModelInputs parse_inputs(const std::string& k, const std::string& v) {
    if (v == "both") return ModelInputs::Both;
    if (v == "lidar") return ModelInputs::LidarOnly;
    throw ConfigError("config key '" + k + "': expected both or lidar, got '" + v + "'");
}

OptimizerKind parse_optimizer(const std::string& k, const std::string& v) {
    if (v == "sgd") return OptimizerKind::Sgd;
    if (v == "adam") return OptimizerKind::Adam;
    throw ConfigError("config key '" + k + "': expected sgd or adam, got '" + v + "'");
}

template <class F>
auto rethrow_as_config(const std::string& k, F&& f) {
    try {
        return f();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError("config key '" + k + "': " + e.what());
    }
}

ScheduleKind parse_schedule(const std::string& k, const std::string& v) {
    return rethrow_as_config(k, [&] { return parse_schedule_kind(v); });
}
SamplerKind parse_sampler(const std::string& k, const std::string& v) {
    return rethrow_as_config(k, [&] { return parse_sampler_kind(v); });
}
DropTarget parse_target(const std::string& k, const std::string& v) {
    return rethrow_as_config(k, [&] { return parse_drop_target(v); });
}
Granularity parse_gran(const std::string& k, const std::string& v) {
    return rethrow_as_config(k, [&] { return parse_granularity(v); });
}

std::string fmt_schedule(ScheduleKind k) { return to_string(k); }
std::string fmt_sampler(SamplerKind k) {
    switch (k) {
        case SamplerKind::DDIM: return "ddim";
        case SamplerKind::DPMpp2M: return "dpmpp";
        case SamplerKind::DEIS: return "deis";
    }
    return "?";
}
std::string fmt_target(DropTarget t) { return to_string(t); }
std::string fmt_gran(Granularity g) { return to_string(g); }
std::string fmt_task(TaskMode m) { return to_string(m); }
std::string fmt_inputs(ModelInputs m) { return to_string(m); }
std::string fmt_opt(OptimizerKind k) { return to_string(k); }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        str_field("data.train", &RunConfig::data_train),
        str_field("data.eval", &RunConfig::data_eval),
        str_field("out.dir", &RunConfig::out_dir),
        str_field("model.checkpoint", &RunConfig::checkpoint),
        BEVDIFF_FIELD("eval.scenes", eval_scenes, fmt_int, parse_int),
        BEVDIFF_FIELD("eval.seg_threshold", seg_threshold, format_double, parse_double),
        BEVDIFF_FIELD("eval.ap_threshold", ap_threshold, format_double, parse_double),
        BEVDIFF_FIELD("seed.data", seed_data, fmt_u64, parse_u64),
        BEVDIFF_FIELD("seed.init", seed_init, fmt_u64, parse_u64),
        BEVDIFF_FIELD("seed.noise", seed_noise, fmt_u64, parse_u64),
        BEVDIFF_FIELD("task", task, fmt_task, parse_task),
        BEVDIFF_FIELD("model.inputs", inputs, fmt_inputs, parse_inputs),
        BEVDIFF_FIELD("fuser.channels", fuser.channels, fmt_int, parse_int),
        BEVDIFF_FIELD("fuser.scales", fuser.scales, fmt_int, parse_int),
        BEVDIFF_FIELD("fuser.epsilon", fuser.epsilon, format_double, parse_double),
        BEVDIFF_FIELD("gsm.scale", fuser.gsm.scale, format_bool, parse_bool),
        BEVDIFF_FIELD("gsm.shift", fuser.gsm.shift, format_bool, parse_bool),
        BEVDIFF_FIELD("gsm.gate", fuser.gsm.gate, format_bool, parse_bool),
        BEVDIFF_FIELD("gsm.per_channel", fuser.gsm.per_channel, format_bool, parse_bool),
        BEVDIFF_FIELD("gsm.time_dim", fuser.gsm.time_dim, fmt_int, parse_int),
        BEVDIFF_FIELD("gsm.guard", gsm_guard, format_bool, parse_bool),
        BEVDIFF_FIELD("head.hidden", heads.hidden, fmt_int, parse_int),
        BEVDIFF_FIELD("det.top_k", heads.top_k, fmt_int, parse_int),
        BEVDIFF_FIELD("diffusion.T", diffusion_T, fmt_int, parse_int),
        BEVDIFF_FIELD("diffusion.kind", schedule, fmt_schedule, parse_schedule),
        BEVDIFF_FIELD("diffusion.beta_start", beta_start, format_double, parse_double),
        BEVDIFF_FIELD("diffusion.beta_end", beta_end, format_double, parse_double),
        BEVDIFF_FIELD("sampler.kind", sampler.kind, fmt_sampler, parse_sampler),
        BEVDIFF_FIELD("sampler.steps", sampler_steps, fmt_int, parse_int),
        BEVDIFF_FIELD("sampler.eta", sampler.eta, format_double, parse_double),
        BEVDIFF_FIELD("sampler.deis_order", sampler.deis_order, fmt_int, parse_int),
        BEVDIFF_FIELD("psdt.alpha_max", psdt.alpha_max, format_double, parse_double),
        BEVDIFF_FIELD("psdt.target", psdt.target, fmt_target, parse_target),
        BEVDIFF_FIELD("psdt.granularity", psdt.granularity, fmt_gran, parse_gran),
        BEVDIFF_FIELD("loss.lambda_diff", loss.lambda_diff, format_double, parse_double),
        BEVDIFF_FIELD("loss.lambda_seg", loss.lambda_seg, format_double, parse_double),
        BEVDIFF_FIELD("loss.lambda_det", loss.lambda_det, format_double, parse_double),
        BEVDIFF_FIELD("loss.lambda_cls", loss.lambda_cls, format_double, parse_double),
        BEVDIFF_FIELD("loss.lambda_reg", loss.lambda_reg, format_double, parse_double),
        BEVDIFF_FIELD("loss.focal_alpha", loss.focal_alpha, format_double, parse_double),
        BEVDIFF_FIELD("loss.focal_gamma", loss.focal_gamma, format_double, parse_double),
        BEVDIFF_FIELD("train.epochs", epochs, fmt_int, parse_int),
        BEVDIFF_FIELD("train.batch", batch, fmt_int, parse_int),
        BEVDIFF_FIELD("train.max_steps", max_steps, fmt_int, parse_int),
        BEVDIFF_FIELD("train.optimizer", optimizer, fmt_opt, parse_optimizer),
        BEVDIFF_FIELD("train.lr", lr, format_double, parse_double),
        BEVDIFF_FIELD("train.lr_min", lr_min, format_double, parse_double),
        BEVDIFF_FIELD("train.grad_clip", grad_clip, format_double, parse_double),
        BEVDIFF_FIELD("train.adam_beta1", adam_beta1, format_double, parse_double),
        BEVDIFF_FIELD("train.adam_beta2", adam_beta2, format_double, parse_double),
        BEVDIFF_FIELD("train.log_every", log_every, fmt_int, parse_int),
    };
    return table;
}

#undef BEVDIFF_FIELD

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::map<std::string, std::string> to_kv(const RunConfig& cfg) {
    std::map<std::string, std::string> kv = to_kv(cfg.synth);
    for (const auto& f : fields()) kv[f.key] = f.get(cfg);
    return kv;
}

void apply_kv(RunConfig& cfg, const std::map<std::string, std::string>& kv) {
    std::map<std::string, std::string> synth;
    for (const auto& [k, v] : kv) {
        if (k.rfind("synth.", 0) == 0) {
            synth[k] = v;
            continue;
        }
        bool found = false;
        for (const auto& f : fields())
            if (k == f.key) {
                f.set(cfg, k, v);
                found = true;
                break;
            }
        if (!found) throw ConfigError("unknown config key '" + k + "'");
    }
    apply_kv(cfg.synth, synth);
    derive_channels(cfg);
}

void derive_channels(RunConfig& cfg) {
    cfg.fuser.in_channels = 2 * cfg.synth.c_in;
    cfg.heads.in_channels = 2 * cfg.synth.c_in;
    cfg.heads.seg_classes = SynthConfig::kSegClasses;
    cfg.heads.det_classes = SynthConfig::kDetClasses;
}

void validate(const RunConfig& cfg) {
    auto need = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError(msg);
    };
    validate(cfg.synth);
    need(3 * cfg.fuser.channels == cfg.fuser.in_channels,
         "fuser.channels: the fused output (3 x fuser.channels) must equal the latent width 2 x synth.c_in = " +
             std::to_string(cfg.fuser.in_channels));
    need(cfg.fuser.in_channels == 2 * cfg.synth.c_in, "fuser input width must be 2 x synth.c_in");
    try {
        validate(cfg.fuser);
        validate(cfg.heads);
        validate(cfg.psdt);
        validate(cfg.loss);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    need(cfg.fuser.gsm.time_dim == 0 || (cfg.fuser.gsm.time_dim >= 2 && cfg.fuser.gsm.time_dim % 2 == 0),
         "gsm.time_dim must be 0 or an even number >= 2");
    need(cfg.diffusion_T >= 1, "diffusion.T must be >= 1");
    need(cfg.beta_start > 0 && cfg.beta_end >= cfg.beta_start && cfg.beta_end < 1,
         "diffusion.beta_start/beta_end must satisfy 0 < start <= end < 1");
    need(cfg.sampler_steps >= 1 && cfg.sampler_steps <= cfg.diffusion_T, "sampler.steps must be in [1, diffusion.T]");
    need(cfg.sampler.eta >= 0, "sampler.eta must be >= 0");
    need(cfg.sampler.deis_order == 1 || cfg.sampler.deis_order == 2, "sampler.deis_order must be 1 or 2");
    need(cfg.epochs >= 0, "train.epochs must be >= 0");
    need(cfg.batch >= 1, "train.batch must be >= 1");
    need(cfg.max_steps >= 0, "train.max_steps must be >= 0");
    need(cfg.lr >= 0 && cfg.lr_min >= 0 && cfg.lr_min <= cfg.lr, "train.lr and train.lr_min must satisfy 0 <= lr_min <= lr");
    need(cfg.grad_clip >= 0, "train.grad_clip must be >= 0");
    need(cfg.adam_beta1 >= 0 && cfg.adam_beta1 < 1 && cfg.adam_beta2 >= 0 && cfg.adam_beta2 < 1,
         "train.adam_beta1/adam_beta2 must be in [0, 1)");
    need(cfg.log_every >= 0, "train.log_every must be >= 0");
    need(cfg.eval_scenes >= 0, "eval.scenes must be >= 0");
    need(cfg.seg_threshold > 0 && cfg.seg_threshold < 1, "eval.seg_threshold must be in (0, 1)");
    need(cfg.ap_threshold > 0, "eval.ap_threshold must be > 0");
}

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        if (kv.count(key)) throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
        kv[key] = value;
    }
    return kv;
}

RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    RunConfig cfg;
    apply_kv(cfg, parse_kv_text(ss.str()));
    return cfg;
}

std::string config_snapshot(const RunConfig& cfg) {
    std::string out;
    for (const auto& [k, v] : to_kv(cfg)) out += k + " = " + v + "\n";
    return out;
}

std::string config_hash(const RunConfig& cfg) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : config_snapshot(cfg)) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace bevdiff
