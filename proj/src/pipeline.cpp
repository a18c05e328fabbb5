#include "bevdiff/pipeline.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace bevdiff {

namespace {

constexpr const char* kSegClassNames[SynthConfig::kSegClasses] = {"road", "class_a", "class_b"};

RunConfig checked(const RunConfig& cfg) {
    validate(cfg);
    return cfg;
}

}  // namespace

Model::Model(const RunConfig& cfg)
    : cfg_(checked(cfg)),
      schedule_(make_schedule(cfg.diffusion_T, cfg.schedule, cfg.beta_start, cfg.beta_end)),
      fuser_(cfg.fuser),
      seg_(cfg.heads),
      det_(cfg.heads) {}

ParamStore Model::init_params() const {
    ParamStore p;
    const Rng base = make_stream(cfg_.seed_init, Stream::Init);
    Rng fr = base.split(1), sr = base.split(2), dr = base.split(3);
    fuser_.init(p, fr);
    if (uses_seg()) seg_.init(p, sr);
    if (uses_det()) det_.init(p, dr);
    return p;
}

Tensor Model::latent(const ModalityPair& f) const {
    Tensor x = fused_features(f);
    if (cfg_.inputs == ModelInputs::LidarOnly) x = drop_modality(x, Modality::Camera);
    return x;
}

Var Model::predict(const ParamStore& params, Var x_t, Var cond, std::span<const int> t) const {
    return fuser_.forward(params, x_t, cond, t);
}

Tensor Model::predict(const ParamStore& params, const Tensor& x_t, int t, const Tensor& cond) const {
    Tape tape(false);
    std::vector<int> ts(static_cast<std::size_t>(x_t.dim(0)), t);
    return predict(params, tape.constant(x_t), tape.constant(cond), ts).value();
}

int planned_steps(const RunConfig& cfg, std::size_t n_scenes) {
    const int per_epoch = static_cast<int>((n_scenes + cfg.batch - 1) / cfg.batch);
    const int total = cfg.epochs * per_epoch;
    return cfg.max_steps > 0 ? std::min(total, cfg.max_steps) : total;
}

namespace {

struct Optimizer {
    const RunConfig& cfg;
    int total_steps;
    std::map<std::string, Tensor> m, v;

    double lr_at(int step) const {
        if (total_steps <= 1) return cfg.lr;
        const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
        return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
    }

    void apply(ParamStore& params, Gradients& grads, int step, double lr) {
        if (cfg.grad_clip > 0) {
            double sq = 0.0;
            for (const auto& [_, g] : grads)
                for (double x : g.data()) sq += x * x;
            const double norm = std::sqrt(sq);
            if (norm > cfg.grad_clip)
                for (auto& [_, g] : grads)
                    for (double& x : g.data()) x *= cfg.grad_clip / norm;
        }
        for (auto& [name, p] : params) {
            const Tensor& g = grads.at(name);
            if (cfg.optimizer == OptimizerKind::Sgd) {
                for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
                continue;
            }
            auto [mit, fresh] = m.try_emplace(name, Tensor::zeros_like(p));
            auto vit = v.try_emplace(name, Tensor::zeros_like(p)).first;
            Tensor& mm = mit->second;
            Tensor& vv = vit->second;
            const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
            const double c1 = 1.0 - std::pow(b1, step + 1), c2 = 1.0 - std::pow(b2, step + 1);
            for (std::size_t i = 0; i < p.size(); ++i) {
                mm[i] = b1 * mm[i] + (1 - b1) * g[i];
                vv[i] = b2 * vv[i] + (1 - b2) * g[i] * g[i];
                p[i] -= lr * (mm[i] / c1) / (std::sqrt(vv[i] / c2) + 1e-8);
            }
        }
    }
};

std::string step_dump(const StepLog& s) {
    std::ostringstream o;
    o << "step " << s.step << " (epoch " << s.epoch << ", p=" << s.dropout_p << ", lr=" << s.lr << "): total=" << s.total
      << " diffusion=" << s.diffusion << " seg=" << s.seg << " det=" << s.det;
    return o.str();
}

}  // namespace

TrainResult train(const RunConfig& cfg, const Dataset& data, const StepCallback& on_step) {
    const Model model(cfg);
    if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
    if (data.cfg.c_in != cfg.synth.c_in || data.cfg.grid != cfg.synth.grid)
        throw std::invalid_argument("train: dataset grid/c_in (" + std::to_string(data.cfg.grid) + "/" +
                                    std::to_string(data.cfg.c_in) + ") do not match the config");
    TrainResult result{model.init_params(), {}};
    ParamStore& params = result.params;
    const int total_steps = planned_steps(cfg, data.size());
    Optimizer opt{cfg, total_steps, {}, {}};
    PsdtConfig psdt = cfg.psdt;
    psdt.total_epochs = std::max(cfg.epochs, 1);
    const int T = cfg.diffusion_T;
    const Rng shuffle_base = make_stream(cfg.seed_data, Stream::Shuffle);
    const Rng noise_base = make_stream(cfg.seed_noise, Stream::Noise);

    int step = 0;
    for (int epoch = 1; epoch <= cfg.epochs && step < total_steps; ++epoch) {
        const double p = dropout_prob(epoch, psdt);
        std::vector<int> order(data.size());
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle = shuffle_base.split(static_cast<std::uint64_t>(epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<int>(i) - 1))]);

        for (std::size_t start = 0; start < order.size() && step < total_steps; start += cfg.batch) {
            const std::size_t end = std::min(order.size(), start + cfg.batch);
            std::vector<Tensor> latents, maps;
            std::vector<std::vector<GtBox>> boxes;
            for (std::size_t b = start; b < end; ++b) {
                const int i = order[b];
                const Tensor x = model.latent(data.features[i]);
                latents.push_back(x.reshaped({x.dim(1), x.dim(2), x.dim(3)}));
                maps.push_back(data.scenes[i].class_maps);
                boxes.push_back(data.scenes[i].boxes);
            }
            const Tensor x0 = stack(latents);
            const int B = x0.dim(0);

            const Rng step_rng = noise_base.split(static_cast<std::uint64_t>(step));
            Rng mask_rng = step_rng.split(static_cast<std::uint64_t>(Stream::Dropout));
            Rng t_rng = step_rng.split(static_cast<std::uint64_t>(Stream::Timestep));
            Rng eps_rng = step_rng.split(static_cast<std::uint64_t>(Stream::Noise));
            const Tensor cond = p > 0 ? psdt_mask(x0, p, psdt, mask_rng).masked : x0;
            std::vector<int> t(B);
            for (int& ti : t) ti = t_rng.uniform_int(1, T);
            const Tensor eps = eps_rng.normal(x0.shape());

            Tape tape;
            const Var x_t = guarded_q_sample(tape.constant(x0), t, tape.constant(eps), model.schedule(), cfg.gsm_guard);
            const Var pred = model.predict(params, x_t, tape.constant(cond), t);
            const Var l_diff = diffusion_loss(pred, x0);
            Var l_seg = tape.constant(Tensor::scalar(0.0));
            Var l_det = tape.constant(Tensor::scalar(0.0));
            if (model.uses_seg()) l_seg = segmentation_loss(model.seg_head().logits(params, pred), stack(maps), cfg.loss);
            if (model.uses_det())
                l_det = detection_loss(model.det_head().raw(params, pred), boxes, cfg.heads.det_classes, cfg.heads.top_k,
                                       cfg.loss);
            const Var total = total_loss(l_diff, l_seg, l_det, cfg.loss);

            StepLog log{step, epoch, p, opt.lr_at(step), total.value().item(), l_diff.value().item(), l_seg.value().item(),
                        l_det.value().item()};
            if (!std::isfinite(log.total)) throw std::runtime_error("non-finite loss at " + step_dump(log));
            Gradients grads = tape.gradients(total, params);
            opt.apply(params, grads, step, log.lr);
            if (!params.all_finite()) throw std::runtime_error("non-finite parameter after " + step_dump(log));
            result.steps.push_back(log);
            if (on_step) on_step(log);
            ++step;
        }
    }
    return result;
}

std::string to_string(SensorCondition c) {
    switch (c) {
        case SensorCondition::Both: return "both";
        case SensorCondition::CameraDropped: return "camera_dropped";
        case SensorCondition::LidarDropped: return "lidar_dropped";
    }
    return "?";
}

InferResult infer(const Model& model, const ParamStore& params, const ModalityPair& features, SensorCondition condition,
                  SamplerKind solver, int steps, std::uint64_t noise_key) {
    Tensor cond = model.latent(features);
    if (condition == SensorCondition::CameraDropped) cond = drop_modality(cond, Modality::Camera);
    if (condition == SensorCondition::LidarDropped) cond = drop_modality(cond, Modality::Lidar);
    SamplerConfig sc = model.config().sampler;
    sc.kind = solver;
    Rng rng(noise_key, static_cast<std::uint64_t>(Stream::Noise));
    const Predictor pred = [&](const Tensor& xt, int t, const Tensor& c) { return model.predict(params, xt, t, c); };

    InferResult r;
    r.x0_hat = sample_loop(pred, cond, sc, steps, model.schedule(), rng);
    Tape tape(false);
    const Var x = tape.constant(r.x0_hat);
    if (model.uses_seg()) r.seg_prob = sigmoid(model.seg_head().logits(params, x)).value();
    if (model.uses_det())
        r.detections = decode_detections(model.det_head().raw(params, x).value(), 0, model.config().heads.det_classes,
                                         model.config().heads.top_k);
    return r;
}

void MetricsReport::append(const MetricsReport& other) {
    rows_.insert(rows_.end(), other.rows_.begin(), other.rows_.end());
}

std::optional<double> MetricsReport::mean(const std::string& experiment, const std::string& metric,
                                          const std::string& cls) const {
    for (const auto& r : rows_)
        if (r.experiment == experiment && r.metric == metric && r.scene_id == "mean" && (cls.empty() || r.cls == cls))
            return r.value;
    return std::nullopt;
}

std::string MetricsReport::csv_header() { return "config_hash,seed,experiment,scene_id,metric,class,value\n"; }

std::string MetricsReport::to_csv(bool header) const {
    std::string out = header ? csv_header() : "";
    for (const auto& r : rows_)
        out += hash_ + "," + std::to_string(seed_) + "," + r.experiment + "," + r.scene_id + "," + r.metric + "," + r.cls +
               "," + format_double(r.value) + "\n";
    return out;
}

void MetricsReport::write_csv(const std::string& path, bool append) const {
    std::ifstream probe(path);
    const bool need_header = !append || !probe.good() || probe.peek() == std::ifstream::traits_type::eof();
    probe.close();
    std::ofstream f(path, append ? std::ios::app : std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write metrics to '" + path + "'");
    f << to_csv(need_header);
}

void add_training_rows(MetricsReport& report, const TrainResult& result) {
    std::map<int, std::array<double, 5>> per_epoch;  // sums of total, diffusion, seg, det, count
    for (const auto& s : result.steps) {
        auto& a = per_epoch[s.epoch];
        a[0] += s.total;
        a[1] += s.diffusion;
        a[2] += s.seg;
        a[3] += s.det;
        a[4] += 1;
    }
    for (const auto& [epoch, a] : per_epoch) {
        const std::string cls = "epoch_" + std::to_string(epoch);
        report.add({"train", "-", "loss_total", cls, a[0] / a[4]});
        report.add({"train", "-", "loss_diffusion", cls, a[1] / a[4]});
        report.add({"train", "-", "loss_seg", cls, a[2] / a[4]});
        report.add({"train", "-", "loss_det", cls, a[3] / a[4]});
    }
}

namespace {

std::uint64_t eval_noise_key(const RunConfig& cfg, std::size_t scene) {
    return make_stream(cfg.seed_noise, Stream::Noise).split(0x100000000ULL + scene).key();
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
    std::vector<double> ok;
    for (double x : v)
        if (!std::isnan(x)) ok.push_back(x);
    if (ok.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    const double m = std::accumulate(ok.begin(), ok.end(), 0.0) / ok.size();
    double ss = 0.0;
    for (double x : ok) ss += (x - m) * (x - m);
    return {m, ok.size() > 1 ? std::sqrt(ss / (ok.size() - 1)) : 0.0};
}

std::string solver_name(SamplerKind k) {
    switch (k) {
        case SamplerKind::DDIM: return "ddim";
        case SamplerKind::DPMpp2M: return "dpmpp";
        case SamplerKind::DEIS: return "deis";
    }
    return "?";
}

}  // namespace

std::string experiment_name(const std::string& prefix, SamplerKind solver, int steps, SensorCondition c) {
    return prefix + ":" + solver_name(solver) + ":s" + std::to_string(steps) + ":" + to_string(c);
}

EvalSummary evaluate(const Model& model, const ParamStore& params, const Dataset& data, SensorCondition condition,
                     SamplerKind solver, int steps, const std::string& experiment, MetricsReport& report) {
    std::vector<double> mious, aps;
    std::vector<std::vector<double>> per_class(SynthConfig::kSegClasses);
    const RunConfig& cfg = model.config();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const InferResult r = infer(model, params, data.features[i], condition, solver, steps, eval_noise_key(cfg, i));
        const std::string id = std::to_string(i);
        if (model.uses_seg()) {
            const IoUResult iou = miou(r.seg_prob, data.scenes[i].class_maps, cfg.seg_threshold);
            for (int c = 0; c < SynthConfig::kSegClasses; ++c) {
                report.add({experiment, id, "iou", kSegClassNames[c], iou.per_class[c]});
                per_class[c].push_back(iou.per_class[c]);
            }
            report.add({experiment, id, "miou", "all", iou.mean});
            mious.push_back(iou.mean);
        }
        if (model.uses_det()) {
            const double ap = mean_average_precision(r.detections, data.scenes[i].boxes, cfg.heads.det_classes, cfg.ap_threshold);
            report.add({experiment, id, "map", "all", ap});
            aps.push_back(ap);
        }
    }
    EvalSummary s;
    s.scenes = static_cast<int>(data.size());
    s.ap_mean = std::numeric_limits<double>::quiet_NaN();
    if (model.uses_seg()) {
        for (int c = 0; c < SynthConfig::kSegClasses; ++c) {
            const auto [m, sd] = mean_std(per_class[c]);
            report.add({experiment, "mean", "iou", kSegClassNames[c], m});
            report.add({experiment, "std", "iou", kSegClassNames[c], sd});
        }
        std::tie(s.miou_mean, s.miou_std) = mean_std(mious);
        report.add({experiment, "mean", "miou", "all", s.miou_mean});
        report.add({experiment, "std", "miou", "all", s.miou_std});
    }
    if (model.uses_det()) {
        const auto [m, sd] = mean_std(aps);
        s.ap_mean = m;
        report.add({experiment, "mean", "map", "all", m});
        report.add({experiment, "std", "map", "all", sd});
    }
    return s;
}

void solver_sweep(const Model& model, const ParamStore& params, const Dataset& data, MetricsReport& report) {
    for (SamplerKind k : {SamplerKind::DDIM, SamplerKind::DPMpp2M, SamplerKind::DEIS})
        for (int steps : kSweepSteps)
            evaluate(model, params, data, SensorCondition::Both, k, steps,
                     experiment_name("sweep", k, steps, SensorCondition::Both), report);
}

void robustness_eval(const Model& psdt_model, const ParamStore& psdt_params, const Model& plain_model,
                     const ParamStore& plain_params, const Dataset& data, MetricsReport& report) {
    const SamplerKind solver = psdt_model.config().sampler.kind;
    struct Entry {
        const char* prefix;
        const Model& model;
        const ParamStore& params;
    };
    for (const Entry& e : {Entry{"robust_psdt", psdt_model, psdt_params}, Entry{"robust_plain", plain_model, plain_params}})
        for (int steps : kSweepSteps) {
            std::map<SensorCondition, double> m;
            for (SensorCondition c : {SensorCondition::Both, SensorCondition::CameraDropped, SensorCondition::LidarDropped})
                m[c] = evaluate(e.model, e.params, data, c, solver, steps, experiment_name(e.prefix, solver, steps, c), report)
                           .miou_mean;
            for (SensorCondition c : {SensorCondition::CameraDropped, SensorCondition::LidarDropped})
                report.add({experiment_name(e.prefix, solver, steps, c), "mean", "degradation", "all",
                            m[SensorCondition::Both] - m[c]});
        }
}

namespace {

const char* const kArchKeys[] = {"synth.c_in",  "synth.grid",    "fuser.channels", "fuser.scales", "fuser.epsilon",
                                 "gsm.scale",   "gsm.shift",     "gsm.gate",       "gsm.per_channel", "gsm.time_dim",
                                 "head.hidden", "det.top_k",     "diffusion.T",    "diffusion.kind", "diffusion.beta_start",
                                 "diffusion.beta_end", "task", "model.inputs"};

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params, const RunConfig& cfg) {
    Container c;
    c.kind = "checkpoint";
    const auto kv = to_kv(cfg);
    for (const char* k : kArchKeys) c.meta[std::string("arch.") + k] = kv.at(k);
    c.meta["config_hash"] = config_hash(cfg);
    for (const auto& [name, t] : params) {
        Array a{name, DType::F64, {}, t.values()};
        for (int d : t.shape()) a.dims.push_back(d);
        c.arrays.push_back(std::move(a));
    }
    write_container(path, c);
}

ParamStore load_checkpoint(const std::string& path, RunConfig& cfg) {
    const Container c = read_container(path, "checkpoint");
    std::map<std::string, std::string> arch;
    for (const char* k : kArchKeys) arch[k] = c.meta_value(std::string("arch.") + k);
    try {
        apply_kv(cfg, arch);
    } catch (const ConfigError& e) {
        throw ContainerError(path + ": checkpoint architecture: " + e.what());
    }
    ParamStore p;
    for (const auto& a : c.arrays) p.add(a.name, Tensor(Shape(a.dims.begin(), a.dims.end()), a.values));
    // Catch a checkpoint whose parameter set does not match the architecture it declares.
    const ParamStore expect = Model(cfg).init_params();
    for (const auto& [name, t] : expect) {
        if (!p.contains(name)) throw ContainerError(path + ": checkpoint is missing parameter '" + name + "'");
        if (p.get(name).shape() != t.shape())
            throw ContainerError(path + ": parameter '" + name + "' has shape " + to_string(p.get(name).shape()) +
                                 ", expected " + to_string(t.shape()));
    }
    if (p.all().size() != expect.all().size()) throw ContainerError(path + ": checkpoint has unexpected extra parameters");
    return p;
}

Dataset eval_subset(const Dataset& d, int max_scenes) {
    if (max_scenes <= 0 || static_cast<std::size_t>(max_scenes) >= d.size()) return d;
    Dataset out = d;
    out.scenes.resize(max_scenes);
    out.features.resize(max_scenes);
    return out;
}

}  // namespace bevdiff
