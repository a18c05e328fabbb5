// Command-line front end: gen-data, train, sample, eval, robustness, sweep-solvers, selftest.
#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "bevdiff/pipeline.hpp"
#include "bevdiff/selftest.hpp"

namespace fs = std::filesystem;
using namespace bevdiff;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct CommonOptions {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("-c,--config", o.config_path, "flat key = value config file");
    cmd->add_option("-s,--set", o.overrides, "override a config key (key=value), repeatable");
    cmd->add_option("-o,--out", o.out_dir, "output directory (out.dir)");
}

/// Config file, then --set overrides, then subcommand shortcuts.
RunConfig build_config(const CommonOptions& o, std::map<std::string, std::string> shortcuts) {
    RunConfig cfg;
    std::map<std::string, std::string> kv;
    if (!o.config_path.empty()) {
        std::ifstream f(o.config_path);
        if (!f) throw ConfigError("cannot read config file '" + o.config_path + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        kv = parse_kv_text(ss.str());
    }
    for (const auto& s : o.overrides) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
        kv[s.substr(0, eq)] = s.substr(eq + 1);
    }
    if (!o.out_dir.empty()) kv["out.dir"] = o.out_dir;
    for (auto& [k, v] : shortcuts)
        if (!v.empty()) kv[k] = v;
    apply_kv(cfg, kv);
    return cfg;
}

std::string require_file(const std::string& key, const std::string& path) {
    if (path.empty()) throw ConfigError("config key '" + key + "' is required but not set");
    if (!fs::is_regular_file(path)) throw ConfigError("config key '" + key + "': file '" + path + "' does not exist");
    return path;
}

void prepare_out(const RunConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    std::ofstream snap(fs::path(cfg.out_dir) / "config.snapshot");
    snap << "# config_hash = " << config_hash(cfg) << "\n" << config_snapshot(cfg);
    if (!snap) throw std::runtime_error("cannot write config snapshot to '" + cfg.out_dir + "'");
}

Dataset load_eval_data(const RunConfig& cfg) {
    return eval_subset(load_dataset(require_file("data.eval", cfg.data_eval)), cfg.eval_scenes);
}

SensorCondition parse_condition(const std::string& s) {
    if (s == "none" || s == "both") return SensorCondition::Both;
    if (s == "camera") return SensorCondition::CameraDropped;
    if (s == "lidar") return SensorCondition::LidarDropped;
    throw ConfigError("--drop expects none, camera or lidar, got '" + s + "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conditional diffusion fusion of BEV camera and lidar features on synthetic scenes"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic scene dataset");
    std::uint64_t gen_seed = 0;
    int gen_scenes = 0;
    std::string gen_out, gen_config;
    std::vector<std::string> gen_overrides;
    gen->add_option("--seed", gen_seed, "dataset seed")->required();
    gen->add_option("--scenes", gen_scenes, "number of scenes")->required()->check(CLI::PositiveNumber);
    gen->add_option("--out", gen_out, "output file")->required();
    gen->add_option("-c,--config", gen_config, "config file (synth.* keys are used)");
    gen->add_option("-s,--set", gen_overrides, "override a synth key (key=value)");

    // train
    CommonOptions train_o;
    std::string train_data, train_epochs;
    auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoint.bin, metrics.csv, config.snapshot");
    add_common(train_cmd, train_o);
    train_cmd->add_option("--data", train_data, "training dataset (data.train)");
    train_cmd->add_option("--epochs", train_epochs, "train.epochs");

    // sample
    CommonOptions sample_o;
    std::string sample_ckpt, sample_data, sample_drop = "none", sample_solver, sample_steps;
    int sample_scene = 0;
    auto* sample_cmd = app.add_subcommand("sample", "run conditional sampling on one scene");
    add_common(sample_cmd, sample_o);
    sample_cmd->add_option("--checkpoint", sample_ckpt, "model.checkpoint");
    sample_cmd->add_option("--data", sample_data, "dataset (data.eval)");
    sample_cmd->add_option("--scene", sample_scene, "scene index")->check(CLI::NonNegativeNumber);
    sample_cmd->add_option("--drop", sample_drop, "failed sensor: none, camera or lidar");
    sample_cmd->add_option("--solver", sample_solver, "sampler.kind");
    sample_cmd->add_option("--steps", sample_steps, "sampler.steps");

    // eval
    CommonOptions eval_o;
    std::string eval_ckpt, eval_data, eval_drop = "none";
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint with the configured solver and steps");
    add_common(eval_cmd, eval_o);
    eval_cmd->add_option("--checkpoint", eval_ckpt, "model.checkpoint");
    eval_cmd->add_option("--data", eval_data, "dataset (data.eval)");
    eval_cmd->add_option("--drop", eval_drop, "failed sensor: none, camera or lidar");

    // robustness
    CommonOptions rob_o;
    std::string rob_psdt, rob_plain, rob_data;
    auto* rob_cmd = app.add_subcommand("robustness", "sensor-failure table for a PSDT and a plain checkpoint");
    add_common(rob_cmd, rob_o);
    rob_cmd->add_option("--psdt-checkpoint", rob_psdt, "checkpoint trained with sensor dropout")->required();
    rob_cmd->add_option("--plain-checkpoint", rob_plain, "checkpoint trained without sensor dropout")->required();
    rob_cmd->add_option("--data", rob_data, "dataset (data.eval)");

    // sweep-solvers
    CommonOptions sweep_o;
    std::string sweep_ckpt, sweep_data;
    auto* sweep_cmd = app.add_subcommand("sweep-solvers", "mIoU for every solver at 1, 2, 4 and 8 steps");
    add_common(sweep_cmd, sweep_o);
    sweep_cmd->add_option("--checkpoint", sweep_ckpt, "model.checkpoint");
    sweep_cmd->add_option("--data", sweep_data, "dataset (data.eval)");

    auto* self_cmd = app.add_subcommand("selftest", "run the built-in invariant suites");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*gen) {
            RunConfig cfg = build_config(CommonOptions{gen_config, gen_overrides, ""}, {});
            validate(cfg.synth);
            const Dataset d = generate_dataset(gen_seed, gen_scenes, cfg.synth);
            if (const auto parent = fs::path(gen_out).parent_path(); !parent.empty()) fs::create_directories(parent);
            save_dataset(gen_out, d);
            std::cout << "wrote " << d.size() << " scenes to " << gen_out << "\n";
        } else if (*train_cmd) {
            const RunConfig cfg = build_config(train_o, {{"data.train", train_data}, {"train.epochs", train_epochs}});
            validate(cfg);
            const Dataset data = load_dataset(require_file("data.train", cfg.data_train));
            prepare_out(cfg);
            const int total = planned_steps(cfg, data.size());
            const TrainResult r = train(cfg, data, [&](const StepLog& s) {
                if (cfg.log_every > 0 && (s.step % cfg.log_every == 0 || s.step + 1 == total))
                    std::cout << "step " << s.step << "/" << total << " epoch " << s.epoch << " loss " << s.total
                              << " (diff " << s.diffusion << ", seg " << s.seg << ", det " << s.det << ")\n";
            });
            const fs::path dir(cfg.out_dir);
            save_checkpoint((dir / "checkpoint.bin").string(), r.params, cfg);
            MetricsReport report(config_hash(cfg), cfg.seed_init);
            add_training_rows(report, r);
            report.write_csv((dir / "metrics.csv").string());
            std::cout << "trained " << r.steps.size() << " steps; checkpoint " << (dir / "checkpoint.bin").string() << "\n";
        } else if (*sample_cmd) {
            RunConfig cfg = build_config(sample_o, {{"model.checkpoint", sample_ckpt}, {"data.eval", sample_data},
                                                    {"sampler.kind", sample_solver}, {"sampler.steps", sample_steps}});
            const ParamStore params = load_checkpoint(require_file("model.checkpoint", cfg.checkpoint), cfg);
            validate(cfg);
            const Dataset data = load_dataset(require_file("data.eval", cfg.data_eval));
            if (static_cast<std::size_t>(sample_scene) >= data.size())
                throw ConfigError("--scene " + std::to_string(sample_scene) + " out of range for " +
                                  std::to_string(data.size()) + " scenes");
            prepare_out(cfg);
            const Model model(cfg);
            const InferResult r = infer(model, params, data.features[sample_scene], parse_condition(sample_drop),
                                        cfg.sampler.kind, cfg.sampler_steps,
                                        make_stream(cfg.seed_noise, Stream::Noise).split(sample_scene).key());
            Container out;
            out.kind = "sample";
            out.meta["config_hash"] = config_hash(cfg);
            out.meta["scene"] = std::to_string(sample_scene);
            auto put = [&](const std::string& name, const Tensor& t) {
                Array a{name, DType::F64, {}, t.values()};
                for (int d : t.shape()) a.dims.push_back(d);
                out.arrays.push_back(std::move(a));
            };
            put("x0_hat", r.x0_hat);
            if (model.uses_seg()) put("seg_prob", r.seg_prob);
            if (model.uses_det()) {
                Array dets{"detections", DType::F64, {static_cast<std::int64_t>(r.detections.size()), 7}, {}};
                for (const auto& d : r.detections)
                    dets.values.insert(dets.values.end(), {d.cx, d.cy, d.w, d.h, d.heading, static_cast<double>(d.label()), d.confidence});
                out.arrays.push_back(std::move(dets));
            }
            const fs::path path = fs::path(cfg.out_dir) / "sample.bin";
            write_container(path.string(), out);
            if (model.uses_seg()) {
                const IoUResult iou = miou(r.seg_prob, data.scenes[sample_scene].class_maps, cfg.seg_threshold);
                std::cout << "scene " << sample_scene << " mIoU " << iou.mean << "\n";
            }
            std::cout << "wrote " << path.string() << "\n";
        } else if (*eval_cmd) {
            RunConfig cfg = build_config(eval_o, {{"model.checkpoint", eval_ckpt}, {"data.eval", eval_data}});
            const ParamStore params = load_checkpoint(require_file("model.checkpoint", cfg.checkpoint), cfg);
            validate(cfg);
            const Dataset data = load_eval_data(cfg);
            const SensorCondition cond = parse_condition(eval_drop);
            prepare_out(cfg);
            const Model model(cfg);
            MetricsReport report(config_hash(cfg), cfg.seed_init);
            const EvalSummary s = evaluate(model, params, data, cond, cfg.sampler.kind, cfg.sampler_steps,
                                           experiment_name("eval", cfg.sampler.kind, cfg.sampler_steps, cond), report);
            report.write_csv((fs::path(cfg.out_dir) / "metrics.csv").string());
            std::cout << "scenes " << s.scenes << " mIoU " << s.miou_mean << " +- " << s.miou_std;
            if (!std::isnan(s.ap_mean)) std::cout << " mAP " << s.ap_mean;
            std::cout << "\n";
        } else if (*rob_cmd) {
            RunConfig base = build_config(rob_o, {{"data.eval", rob_data}});
            RunConfig psdt_cfg = base, plain_cfg = base;
            const ParamStore psdt_params = load_checkpoint(require_file("--psdt-checkpoint", rob_psdt), psdt_cfg);
            const ParamStore plain_params = load_checkpoint(require_file("--plain-checkpoint", rob_plain), plain_cfg);
            validate(psdt_cfg);
            validate(plain_cfg);
            const Dataset data = load_eval_data(base);
            prepare_out(base);
            MetricsReport report(config_hash(base), base.seed_init);
            robustness_eval(Model(psdt_cfg), psdt_params, Model(plain_cfg), plain_params, data, report);
            report.write_csv((fs::path(base.out_dir) / "metrics.csv").string());
            for (const char* prefix : {"robust_psdt", "robust_plain"})
                for (SensorCondition c : {SensorCondition::CameraDropped, SensorCondition::LidarDropped})
                    std::cout << prefix << " " << to_string(c) << " degradation at 8 steps: "
                              << report.mean(experiment_name(prefix, base.sampler.kind, 8, c), "degradation").value_or(NAN)
                              << "\n";
        } else if (*sweep_cmd) {
            RunConfig cfg = build_config(sweep_o, {{"model.checkpoint", sweep_ckpt}, {"data.eval", sweep_data}});
            const ParamStore params = load_checkpoint(require_file("model.checkpoint", cfg.checkpoint), cfg);
            validate(cfg);
            const Dataset data = load_eval_data(cfg);
            prepare_out(cfg);
            const Model model(cfg);
            MetricsReport report(config_hash(cfg), cfg.seed_init);
            solver_sweep(model, params, data, report);
            report.write_csv((fs::path(cfg.out_dir) / "metrics.csv").string());
            for (SamplerKind k : {SamplerKind::DDIM, SamplerKind::DPMpp2M, SamplerKind::DEIS}) {
                std::cout << to_string(k);
                for (int steps : kSweepSteps)
                    std::cout << " s" << steps << "="
                              << report.mean(experiment_name("sweep", k, steps, SensorCondition::Both), "miou").value_or(NAN);
                std::cout << "\n";
            }
        } else if (*self_cmd) {
            const SelftestResult r = run_selftest(std::cout);
            std::cout << r.passed << " passed, " << r.failed << " failed\n";
            return r.failed == 0 ? kExitOk : kExitRuntime;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}
