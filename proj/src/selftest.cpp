#include "bevdiff/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "bevdiff/grad_check.hpp"
#include "bevdiff/pipeline.hpp"

namespace bevdiff {

namespace {

using Check = std::function<bool()>;

bool grad_composition() {
    Rng rng(7);
    GsmConfig gcfg;
    gcfg.time_dim = 4;
    FuserConfig fcfg{6, 2, 3, 1e-4, gcfg};
    const Fuser fuser(fcfg);
    ParamStore params;
    fuser.init(params, rng);
    const Tensor x = rng.normal({1, 6, 8, 8}), c = rng.normal({1, 6, 8, 8});
    const std::vector<int> t{3};
    GradCheckOptions opt;
    opt.max_coords_per_param = 3;
    const auto r = finite_diff_check(
        [&](Tape& tape, const ParamStore& p) { return mean(mul(fuser.forward(p, tape.constant(x), tape.constant(c), t),
                                                               fuser.forward(p, tape.constant(x), tape.constant(c), t))); },
        params, opt);
    return r.passed(1e-4);
}

bool schedule_posterior_collapse() {
    const NoiseSchedule s = make_schedule(100, ScheduleKind::Linear);
    Rng rng(3);
    const Tensor x0 = rng.normal({1, 2, 2, 2}), xt = rng.normal({1, 2, 2, 2});
    const Posterior p = posterior_mean_var(x0, xt, 1, s);
    if (p.variance != 0.0 || p.mean != x0) return false;
    for (int t = 1; t <= s.steps(); ++t)
        if (!(s.alpha_bar(t) < s.alpha_bar(t - 1))) return false;
    return s.alpha_bar(0) == 1.0;
}

bool step_schedule_example() {
    const StepSchedule sch = make_step_schedule(8, 4);
    return sch.pairs == std::vector<TimePair>{{7, 5}, {5, 3}, {3, 1}, {1, -1}};
}

bool samplers_agree_at_one_step() {
    const NoiseSchedule s = make_schedule(20, ScheduleKind::Linear);
    Rng data(11);
    const Tensor cond = data.normal({1, 2, 4, 4});
    const Predictor pred = [](const Tensor& xt, int t, const Tensor& c) {
        Tensor out = c;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * c[i] + 0.01 * t * xt[i];
        return out;
    };
    std::vector<Tensor> outs;
    for (SamplerKind k : {SamplerKind::DDIM, SamplerKind::DPMpp2M, SamplerKind::DEIS}) {
        Rng rng(5);
        outs.push_back(sample_loop(pred, cond, SamplerConfig{k, 0.0, 2}, 1, s, rng));
    }
    return max_abs_diff(outs[0], outs[1]) <= 1e-9 && max_abs_diff(outs[0], outs[2]) <= 1e-9;
}

bool gsm_identity_when_disabled() {
    const GsmBlock block("g", 2, gsm_ablation_config(false, false, false));
    ParamStore params;
    Rng rng(1);
    block.init(params, rng);
    Tape tape;
    const Tensor x = rng.normal({1, 2, 4, 4});
    const std::vector<int> t{5};
    return block.modulate(params, tape.constant(x), tape.constant(rng.normal({1, 2, 4, 4})), t).value() == x;
}

bool psdt_endpoints() {
    PsdtConfig cfg;
    cfg.total_epochs = 10;
    return dropout_prob(0, cfg) == 0.0 && dropout_prob(10, cfg) == 0.25 && dropout_prob(12, cfg) == 0.25;
}

bool focal_values() {
    return std::abs(focal_loss(0.5, true, 1.0, 0.0) - std::log(2.0)) < 1e-12 &&
           std::abs(focal_loss(0.9, true, 0.25, 2.0) - 0.25 * 0.01 * -std::log(0.9)) < 1e-12 && smooth_l1(1.0) == 0.5 &&
           smooth_l1(-1.0) == 0.5;
}

bool hungarian_brute_force() {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const int k = rng.uniform_int(1, 5), m = rng.uniform_int(1, 5);
        CostMatrix c(k, m);
        for (double& v : c.values) v = rng.uniform_int(0, 20);
        // Enumerate injections of the smaller side into the larger one.
        const int small = std::min(k, m), large = std::max(k, m);
        std::vector<int> perm(large);
        std::iota(perm.begin(), perm.end(), 0);
        double best = INFINITY;
        do {
            double s = 0;
            for (int i = 0; i < small; ++i) s += k <= m ? c(i, perm[i]) : c(perm[i], i);
            best = std::min(best, s);
        } while (std::next_permutation(perm.begin(), perm.end()));
        if (hungarian_match(c).cost != best) return false;
    }
    return true;
}

bool miou_hand_case() {
    Tensor pred(Shape{1, 1, 3}), gt(Shape{1, 1, 3});
    pred[0] = pred[1] = 1.0;
    gt[1] = gt[2] = 1.0;
    const IoUResult r = miou(pred, gt);
    return std::abs(r.mean - 1.0 / 3.0) < 1e-15;
}

bool dataset_round_trip() {
    SynthConfig cfg;
    cfg.grid = 16;
    const Dataset d = generate_dataset(9, 3, cfg);
    if (!(generate_dataset(9, 3, cfg) == d)) return false;
    const Container c = dataset_to_container(d);
    const std::string bytes = serialize_container(c);
    if (bytes.size() != c.header().size() + c.payload_bytes()) return false;
    return dataset_from_container(parse_container(bytes, "dataset")) == d;
}

bool config_round_trip() {
    RunConfig a;
    a.lr = 0.123;
    a.psdt.alpha_max = 10;
    RunConfig b;
    apply_kv(b, to_kv(a));
    return config_snapshot(a) == config_snapshot(b) && config_hash(a) == config_hash(b);
}

bool zero_lr_keeps_parameters() {
    RunConfig cfg;
    cfg.synth.grid = 8;
    cfg.synth.max_size = 3;
    cfg.synth.min_size = 2;
    cfg.epochs = 1;
    cfg.batch = 2;
    cfg.lr = 0;
    cfg.lr_min = 0;
    cfg.diffusion_T = 10;
    cfg.sampler_steps = 2;
    const Dataset d = generate_dataset(4, 4, cfg.synth);
    const TrainResult r = train(cfg, d);
    return r.steps.size() == 2 && r.params == Model(cfg).init_params();
}

}  // namespace

SelftestResult run_selftest(std::ostream& log) {
    const std::pair<const char*, Check> checks[] = {
        {"tensor_autodiff: fuser composition matches finite differences", grad_composition},
        {"noise_schedule: monotone alpha_bar and exact t=1 posterior collapse", schedule_posterior_collapse},
        {"samplers: step schedule T=8 steps=4", step_schedule_example},
        {"samplers: three solvers agree at one step", samplers_agree_at_one_step},
        {"gsm_block: all branches disabled is the identity", gsm_identity_when_disabled},
        {"psdt: dropout schedule endpoints", psdt_endpoints},
        {"losses: focal and smooth-L1 hand values", focal_values},
        {"losses: assignment matches brute force", hungarian_brute_force},
        {"heads_metrics: IoU counting case", miou_hand_case},
        {"synth_data: deterministic generation and byte-exact container round trip", dataset_round_trip},
        {"pipeline_cli: config snapshot round trip", config_round_trip},
        {"pipeline_cli: zero learning rate leaves parameters unchanged", zero_lr_keeps_parameters},
    };
    SelftestResult r;
    for (const auto& [name, check] : checks) {
        bool ok = false;
        std::string err;
        try {
            ok = check();
        } catch (const std::exception& e) {
            err = e.what();
        }
        log << (ok ? "PASS " : "FAIL ") << name << (err.empty() ? "" : " (" + err + ")") << "\n";
        (ok ? r.passed : r.failed)++;
    }
    return r;
}

}  // namespace bevdiff
