#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "bevdiff/config.hpp"
#include "bevdiff/kv.hpp"
#include "bevdiff/losses.hpp"
#include "bevdiff/metrics.hpp"
#include "bevdiff/noise_schedule.hpp"
#include "bevdiff/pipeline.hpp"
#include "bevdiff/psdt.hpp"
#include "bevdiff/samplers.hpp"
#include "bevdiff/selftest.hpp"
#include "bevdiff/synth.hpp"

namespace py = pybind11;
using namespace bevdiff;

namespace {

using NdArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const NdArray& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    if (shape.empty()) shape = {1};
    return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

NdArray to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    NdArray out(shape);
    std::copy(t.values().begin(), t.values().end(), out.mutable_data());
    return out;
}

py::dict box_dict(const GtBox& b) {
    py::dict d;
    d["cx"] = b.cx;
    d["cy"] = b.cy;
    d["w"] = b.w;
    d["h"] = b.h;
    d["heading"] = b.heading;
    d["cls"] = b.cls;
    return d;
}

RunConfig config_from(const std::map<std::string, std::string>& kv) {
    RunConfig cfg;
    apply_kv(cfg, kv);
    validate(cfg);
    return cfg;
}

SensorCondition parse_condition(const std::string& s) {
    if (s == "both" || s == "none") return SensorCondition::Both;
    if (s == "camera") return SensorCondition::CameraDropped;
    if (s == "lidar") return SensorCondition::LidarDropped;
    throw ConfigError("condition must be both, camera or lidar, got '" + s + "'");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "BEV camera/lidar diffusion fusion: schedules, samplers, losses, synthetic data and training";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

    py::class_<NoiseSchedule>(m, "NoiseSchedule")
        .def(py::init([](const std::vector<double>& beta) { return NoiseSchedule(beta); }), py::arg("beta"))
        .def_property_readonly("T", &NoiseSchedule::steps)
        .def("beta", &NoiseSchedule::beta)
        .def("alpha_bar", &NoiseSchedule::alpha_bar)
        .def_property_readonly("betas", &NoiseSchedule::betas)
        .def_property_readonly("alpha_bars", &NoiseSchedule::alpha_bars);

    m.def("make_schedule", [](int T, const std::string& kind, double beta_start, double beta_end) {
        return make_schedule(T, parse_schedule_kind(kind), beta_start, beta_end);
    }, py::arg("T"), py::arg("kind") = "linear", py::arg("beta_start") = 1e-4, py::arg("beta_end") = 0.02);

    m.def("q_sample", [](const NdArray& x0, int t, const NdArray& eps, const NoiseSchedule& s) {
        return to_array(q_sample(to_tensor(x0), t, to_tensor(eps), s));
    }, py::arg("x0"), py::arg("t"), py::arg("eps"), py::arg("schedule"));

    m.def("posterior_mean_var", [](const NdArray& x0, const NdArray& xt, int t, const NoiseSchedule& s) {
        const Posterior p = posterior_mean_var(to_tensor(x0), to_tensor(xt), t, s);
        return py::make_tuple(to_array(p.mean), p.variance);
    }, py::arg("x0"), py::arg("xt"), py::arg("t"), py::arg("schedule"));

    m.def("make_step_schedule", [](int T, int steps) { return make_step_schedule(T, steps).pairs; },
          py::arg("T"), py::arg("steps"));

    m.def("sample_loop", [](const std::function<NdArray(NdArray, int, NdArray)>& predictor, const NdArray& cond,
                            const std::string& solver, int steps, const NoiseSchedule& s, std::uint64_t seed, double eta) {
        SamplerConfig sc;
        sc.kind = parse_sampler_kind(solver);
        sc.eta = eta;
        Rng rng(seed);
        const Predictor pred = [&](const Tensor& xt, int t, const Tensor& c) {
            return to_tensor(predictor(to_array(xt), t, to_array(c)));
        };
        return to_array(sample_loop(pred, to_tensor(cond), sc, steps, s, rng));
    }, py::arg("predictor"), py::arg("cond"), py::arg("solver") = "ddim", py::arg("steps") = 4, py::arg("schedule"),
       py::arg("seed") = 0, py::arg("eta") = 0.0);

    m.def("hungarian_match", [](const NdArray& cost) {
        if (cost.ndim() != 2) throw ShapeError("hungarian_match: cost must be 2-d");
        CostMatrix c(static_cast<int>(cost.shape(0)), static_cast<int>(cost.shape(1)));
        std::copy(cost.data(), cost.data() + cost.size(), c.values.begin());
        const Assignment a = hungarian_match(c);
        return py::make_tuple(a.pairs, a.cost);
    }, py::arg("cost"));

    m.def("focal_loss", &focal_loss, py::arg("prob"), py::arg("is_positive"), py::arg("alpha") = 0.25,
          py::arg("gamma") = 2.0);
    m.def("smooth_l1", py::overload_cast<double>(&smooth_l1), py::arg("x"));
    m.def("total_loss", [](double l_diff, double l_seg, double l_det, double lambda_diff, double lambda_seg,
                           double lambda_det) {
        LossWeights w;
        w.lambda_diff = lambda_diff;
        w.lambda_seg = lambda_seg;
        w.lambda_det = lambda_det;
        return total_loss(l_diff, l_seg, l_det, w);
    }, py::arg("l_diff"), py::arg("l_seg"), py::arg("l_det"), py::arg("lambda_diff") = 1.0, py::arg("lambda_seg") = 1.0,
       py::arg("lambda_det") = 1.0);

    m.def("dropout_prob", [](int epoch, double alpha_max, int total_epochs) {
        PsdtConfig c;
        c.alpha_max = alpha_max;
        c.total_epochs = total_epochs;
        return dropout_prob(epoch, c);
    }, py::arg("epoch"), py::arg("alpha_max"), py::arg("total_epochs"));

    m.def("mask_modality", [](const NdArray& features, const std::string& modality, double p, const std::string& granularity,
                              std::uint64_t seed) {
        Modality which;
        if (modality == "camera") which = Modality::Camera;
        else if (modality == "lidar") which = Modality::Lidar;
        else throw ConfigError("modality must be camera or lidar, got '" + modality + "'");
        Granularity g;
        if (granularity == "element") g = Granularity::Element;
        else if (granularity == "modality") g = Granularity::Modality;
        else throw ConfigError("granularity must be element or modality, got '" + granularity + "'");
        Rng rng(seed);
        const MaskResult r = mask_modality(to_tensor(features), which, p, g, rng);
        return py::make_tuple(to_array(r.masked), to_array(r.mask));
    }, py::arg("features"), py::arg("modality"), py::arg("p"), py::arg("granularity") = "element", py::arg("seed") = 0);

    m.def("miou", [](const NdArray& prob, const NdArray& gt, double threshold) {
        const IoUResult r = miou(to_tensor(prob), to_tensor(gt), threshold);
        return py::make_tuple(r.mean, r.per_class);
    }, py::arg("prob"), py::arg("gt"), py::arg("threshold") = 0.5);

    py::class_<Dataset>(m, "Dataset")
        .def("__len__", [](const Dataset& d) { return d.scenes.size(); })
        .def_readonly("seed", &Dataset::seed)
        .def("class_maps", [](const Dataset& d, std::size_t i) { return to_array(d.scenes.at(i).class_maps); })
        .def("camera", [](const Dataset& d, std::size_t i) { return to_array(d.features.at(i).cam); })
        .def("lidar", [](const Dataset& d, std::size_t i) { return to_array(d.features.at(i).lidar); })
        .def("boxes", [](const Dataset& d, std::size_t i) {
            py::list out;
            for (const GtBox& b : d.scenes.at(i).boxes) out.append(box_dict(b));
            return out;
        })
        .def("save", [](const Dataset& d, const std::string& path) { save_dataset(path, d); });

    m.def("generate_dataset", [](std::uint64_t seed, int scenes, const std::map<std::string, std::string>& overrides) {
        SynthConfig cfg;
        apply_kv(cfg, overrides);
        validate(cfg);
        return generate_dataset(seed, scenes, cfg);
    }, py::arg("seed"), py::arg("scenes"), py::arg("config") = std::map<std::string, std::string>{});
    m.def("load_dataset", &load_dataset, py::arg("path"));

    m.def("default_config", [] { return to_kv(RunConfig{}); });
    m.def("config_hash", [](const std::map<std::string, std::string>& kv) { return config_hash(config_from(kv)); },
          py::arg("config") = std::map<std::string, std::string>{});

    py::class_<TrainResult>(m, "TrainResult")
        .def_property_readonly("losses", [](const TrainResult& r) {
            std::vector<double> v;
            for (const StepLog& s : r.steps) v.push_back(s.total);
            return v;
        })
        .def_property_readonly("steps", [](const TrainResult& r) { return r.steps.size(); })
        .def("save_checkpoint", [](const TrainResult& r, const std::string& path, const std::map<std::string, std::string>& kv) {
            save_checkpoint(path, r.params, config_from(kv));
        }, py::arg("path"), py::arg("config") = std::map<std::string, std::string>{});

    m.def("train", [](const Dataset& data, const std::map<std::string, std::string>& kv) {
        const RunConfig cfg = config_from(kv);
        py::gil_scoped_release release;
        return train(cfg, data);
    }, py::arg("data"), py::arg("config") = std::map<std::string, std::string>{});

    m.def("evaluate", [](const TrainResult& r, const Dataset& data, const std::map<std::string, std::string>& kv,
                         const std::string& condition, const std::string& solver, int steps) {
        const RunConfig cfg = config_from(kv);
        const Model model(cfg);
        const SensorCondition c = parse_condition(condition);
        const SamplerKind k = parse_sampler_kind(solver);
        MetricsReport report(config_hash(cfg), cfg.seed_noise);
        const EvalSummary s = evaluate(model, r.params, data, c, k, steps, experiment_name("py", k, steps, c), report);
        py::dict d;
        d["miou_mean"] = s.miou_mean;
        d["miou_std"] = s.miou_std;
        d["ap_mean"] = s.ap_mean;
        d["scenes"] = s.scenes;
        d["csv"] = report.to_csv();
        return d;
    }, py::arg("result"), py::arg("data"), py::arg("config") = std::map<std::string, std::string>{},
       py::arg("condition") = "both", py::arg("solver") = "ddim", py::arg("steps") = 4);

    m.def("selftest", [] {
        std::ostringstream log;
        const SelftestResult r = run_selftest(log);
        return py::make_tuple(r.failed == 0, log.str());
    });
}
