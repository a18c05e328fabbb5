// Acceptance runner: one PASS/FAIL line per criterion, exit 1 if any fails.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "bevdiff/pipeline.hpp"
#include "grad_suite.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace bevdiff;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int precision = 4) {
    std::ostringstream o;
    o << std::setprecision(precision) << v;
    return o.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void progress(const std::string& msg) { std::cout << "  .. " << msg << std::endl; }

// ---------------------------------------------------------------- criterion 1

Outcome gradient_correctness() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0;
    std::string worst_name, failed;
    int n = 0;
    for (const auto& c : grad_suite::cases()) {
        const double e = c.run();
        ++n;
        if (!(e < grad_suite::kTol)) failed += (failed.empty() ? "" : ",") + c.name;
        if (std::isnan(e) || e > worst) {
            worst = e;
            worst_name = c.name;
        }
    }
    const double secs = seconds_since(t0);
    Outcome o;
    o.pass = failed.empty() && secs < 60;
    o.detail = std::to_string(n) + " cases x " + std::to_string(grad_suite::kInstances) + " instances, worst rel err " +
               fmt(worst, 3) + " (" + worst_name + "), " + fmt(secs, 3) + " s";
    if (!failed.empty()) o.detail += "; failing: " + failed;
    return o;
}

// ---------------------------------------------------------------- criterion 2

struct Moments {
    double mean, var;
};

Moments moments(const std::vector<double>& xs) {
    double m = 0;
    for (double x : xs) m += x;
    m /= xs.size();
    double v = 0;
    for (double x : xs) v += (x - m) * (x - m);
    return {m, v / (xs.size() - 1)};
}

// Largest deviation in units of the standard error, over mean and variance.
double z_score(const Moments& got, double mean, double var, std::size_t n) {
    const double se_mean = std::sqrt(var / n), se_var = var * std::sqrt(2.0 / (n - 1));
    return std::max(std::abs(got.mean - mean) / se_mean, std::abs(got.var - var) / se_var);
}

Outcome forward_fidelity() {
    const auto t0 = std::chrono::steady_clock::now();
    const NoiseSchedule s = make_schedule(100, ScheduleKind::Linear);
    const int n = 100000;
    double worst = 0;
    for (int t : {1, 10, 35, 70, 100}) {
        const double x0 = 1.3;
        Rng rng(2024, t);
        const Tensor xt = q_sample(Tensor(Shape{n}, x0), t, rng.normal({n}), s);
        worst = std::max(worst, z_score(moments(xt.values()), std::sqrt(s.alpha_bar(t)) * x0, 1 - s.alpha_bar(t), n));
    }
    double worst_iter = 0;
    for (int t : {5, 50}) {
        const double x0 = -0.7;
        Rng rng(2025, t);
        std::vector<double> seq(n, x0);
        for (int k = 1; k <= t; ++k)
            for (double& x : seq) x = std::sqrt(1 - s.beta(k)) * x + std::sqrt(s.beta(k)) * rng.normal();
        const Tensor direct = q_sample(Tensor(Shape{n}, x0), t, rng.normal({n}), s);
        const double m = std::sqrt(s.alpha_bar(t)) * x0, v = 1 - s.alpha_bar(t);
        worst_iter = std::max({worst_iter, z_score(moments(seq), m, v, n), z_score(moments(direct.values()), m, v, n)});
    }
    const double secs = seconds_since(t0);
    return {worst < 4 && worst_iter < 4 && secs < 30,
            "q_sample max |z| " + fmt(worst, 3) + " at 5 t values, iterated vs direct max |z| " + fmt(worst_iter, 3) +
                " (limit 4 SE, 1e5 draws), " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------- criterion 3

Outcome posterior_formulas() {
    Rng rng(303);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int T = rng.uniform_int(1, 60);
        std::vector<double> beta(T);
        for (double& b : beta) b = rng.uniform(1e-4, 0.3);
        const NoiseSchedule s(beta);
        const int t = rng.uniform_int(1, T);
        const double x0 = rng.normal(), xt = rng.normal();
        const Posterior p = posterior_mean_var(Tensor::scalar(x0), Tensor::scalar(xt), t, s);
        const auto ref = oracle::posterior_scalar(beta, t, x0, xt);
        worst = std::max({worst, std::abs(p.mean.item() - ref.mean), std::abs(p.variance - ref.var)});
    }
    const NoiseSchedule s = make_schedule(30, ScheduleKind::Linear);
    const Tensor x0 = rng.normal({3, 4}), xt = rng.normal({3, 4});
    const Posterior p1 = posterior_mean_var(x0, xt, 1, s);
    const bool collapse = p1.mean == x0 && p1.variance == 0.0;
    return {worst <= 1e-12 && collapse,
            "100 tuples max abs err " + fmt(worst, 3) + " (limit 1e-12), t=1 collapse " + (collapse ? "exact" : "WRONG")};
}

// ---------------------------------------------------------------- criterion 4

Outcome sampler_consistency() {
    const NoiseSchedule s = make_schedule(50, ScheduleKind::Linear);
    Rng data(404);
    const Tensor cond = data.normal({1, 3, 4, 4});
    const Predictor smooth = [](const Tensor& xt, int t, const Tensor& c) {
        Tensor y = c;
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = 0.6 * c[i] + 0.3 * std::tanh(xt[i]) + 0.01 * t;
        return y;
    };
    std::vector<Tensor> outs;
    for (SamplerKind k : {SamplerKind::DDIM, SamplerKind::DPMpp2M, SamplerKind::DEIS}) {
        SamplerConfig sc;
        sc.kind = k;
        Rng rng(405);
        outs.push_back(sample_loop(smooth, cond, sc, 1, s, rng));
    }
    const double spread = std::max(max_abs_diff(outs[0], outs[1]), max_abs_diff(outs[0], outs[2]));

    const NoiseSchedule s100 = make_schedule(100, ScheduleKind::Linear);
    const Tensor x0 = data.normal({1, 3, 4, 4});
    const Predictor oracle_pred = [&](const Tensor&, int, const Tensor&) { return x0; };
    Rng rng(406);
    const Tensor rec = sample_loop(oracle_pred, cond, SamplerConfig{}, 100, s100, rng);
    const double rec_err = max_abs_diff(rec, x0);

    const StepSchedule sched = make_step_schedule(8, 4);
    const bool sched_ok = sched.pairs == std::vector<TimePair>{{7, 5}, {5, 3}, {3, 1}, {1, -1}};
    return {spread <= 1e-9 && rec_err <= 1e-6 && sched_ok,
            "steps=1 solver spread " + fmt(spread, 3) + " (limit 1e-9), DDIM eta=0 oracle reconstruction err " +
                fmt(rec_err, 3) + " at steps=T=100 (limit 1e-6), (T=8, steps=4) schedule " + (sched_ok ? "exact" : "WRONG")};
}

// ---------------------------------------------------------------- criterion 5

Outcome assignment_optimality() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(505);
    int mismatches = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const int k = rng.uniform_int(1, 7), m = rng.uniform_int(1, 7);
        CostMatrix c(k, m);
        for (double& v : c.values) v = rng.uniform(-5, 5);
        const Assignment a = hungarian_match(c);
        double recomputed = 0;
        for (const auto& [i, j] : a.pairs) recomputed += c.values[static_cast<std::size_t>(i) * m + j];
        if (a.cost != oracle::brute_force_assignment(c) || recomputed != a.cost ||
            static_cast<int>(a.pairs.size()) != std::min(k, m))
            ++mismatches;
    }
    const double secs = seconds_since(t0);
    return {mismatches == 0 && secs < 10,
            "200 matrices up to 7x7, " + std::to_string(mismatches) + " cost mismatches vs brute force, " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------- criterion 6

Outcome loss_unit_values() {
    const double ln2 = focal_loss(0.5, true, 1.0, 0.0);
    const double small = focal_loss(0.9, true, 0.25, 2.0);
    const double small_hand = 0.25 * (0.1 * 0.1) * -std::log(0.9);
    const double e1 = std::abs(ln2 - std::log(2.0)), e2 = std::abs(small - small_hand);
    const bool continuity = smooth_l1(1.0) == 0.5 && smooth_l1(-1.0) == 0.5 && 0.5 * 1.0 * 1.0 == 1.0 - 0.5;
    LossWeights w;
    w.lambda_diff = 1.0;
    w.lambda_seg = 0.5;
    w.lambda_det = 0.25;
    const bool eq8 = total_loss(0.75, 1.5, 2.0, w) == 0.75 + 0.5 * 1.5 + 0.25 * 2.0 &&
                     total_loss(0.1, 0.2, 0.3, LossWeights{}) == 1.0 * 0.1 + 1.0 * 0.2 + 1.0 * 0.3;
    return {e1 <= 1e-9 && e2 <= 1e-9 && continuity && eq8,
            "ln2 case err " + fmt(e1, 3) + ", 0.25*0.01*(-ln 0.9) = " + fmt(small, 6) + " err " + fmt(e2, 3) +
                ", smooth-L1 continuity " + (continuity ? "exact" : "BROKEN") + ", weighted total " +
                (eq8 ? "exact" : "WRONG")};
}

// ---------------------------------------------------------------- criterion 10

Outcome psdt_schedule() {
    PsdtConfig c;
    c.alpha_max = 25;
    c.total_epochs = 24;
    const bool ends = dropout_prob(0, c) == 0.0 && dropout_prob(24, c) == 0.25;
    const double p = dropout_prob(24, c);
    const Tensor f(Shape{1, 2, 1000, 1000}, 1.0);
    Rng rng(1010);
    const MaskResult r = mask_modality(f, Modality::Camera, p, Granularity::Element, rng);
    double kept = 0;
    for (int i = 0; i < 1000 * 1000; ++i) kept += r.mask[i];
    const double frac = kept / 1e6;
    return {ends && std::abs(frac - (1 - p)) <= 0.002,
            std::string("dropout_prob(0)=0 and dropout_prob(E)=alpha/100 ") + (ends ? "exact" : "WRONG") +
                ", kept fraction " + fmt(frac, 6) + " vs " + fmt(1 - p) + " (limit +-0.002, 1e6 elements)"};
}

// ---------------------------------------------------------------- training-based criteria

struct Trained {
    RunConfig cfg;
    ParamStore params;
    std::vector<StepLog> steps;
};

Trained train_logged(const RunConfig& cfg, const Dataset& data, const std::string& label) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult r = train(cfg, data);
    progress("trained " + label + ": " + std::to_string(r.steps.size()) + " steps, final loss " +
             fmt(r.steps.empty() ? NAN : r.steps.back().total) + ", " + fmt(seconds_since(t0), 3) + " s");
    return {cfg, std::move(r.params), std::move(r.steps)};
}

double eval_miou(const Trained& m, const Dataset& data, SensorCondition c, int steps, MetricsReport& report,
                 const std::string& prefix) {
    const Model model(m.cfg);
    return evaluate(model, m.params, data, c, m.cfg.sampler.kind, steps,
                    experiment_name(prefix, m.cfg.sampler.kind, steps, c), report)
        .miou_mean;
}

struct Shared {
    Dataset train_data, eval_data;
    std::optional<Trained> fused;  // default config, seed 1
};

double window_mean(const std::vector<StepLog>& s, std::size_t from, std::size_t to) {
    double acc = 0;
    for (std::size_t i = from; i < to; ++i) acc += s[i].total;
    return acc / static_cast<double>(to - from);
}

Outcome end_to_end(Shared& sh, const fs::path& out) {
    const auto t0 = std::chrono::steady_clock::now();
    const RunConfig fused_cfg;
    if (!sh.fused) sh.fused = train_logged(fused_cfg, sh.train_data, "fused (default config)");
    RunConfig lidar_cfg;
    lidar_cfg.inputs = ModelInputs::LidarOnly;
    const Trained lidar = train_logged(lidar_cfg, sh.train_data, "lidar-only");

    // Per-step losses are noisy (random t per sample), so compare the first 32 steps with the
    // 32 steps that end at step 200.
    const auto& s = sh.fused->steps;
    if (s.size() < 200) return {false, "fused run has only " + std::to_string(s.size()) + " steps"};
    const double first = window_mean(s, 0, 32), at200 = window_mean(s, 168, 200);
    const double reduction = 1 - at200 / first;

    MetricsReport report(config_hash(fused_cfg), fused_cfg.seed_init);
    const double fused_miou =
        eval_miou(*sh.fused, sh.eval_data, SensorCondition::Both, fused_cfg.sampler_steps, report, "e2e_fused");
    const double lidar_miou =
        eval_miou(lidar, sh.eval_data, SensorCondition::Both, lidar_cfg.sampler_steps, report, "e2e_lidar_only");
    report.write_csv((out / "end_to_end.csv").string());
    const double gap = fused_miou - lidar_miou;
    const double secs = seconds_since(t0);
    return {reduction >= 0.5 && gap >= 0.05,
            "loss " + fmt(first) + " -> " + fmt(at200) + " by step 200 (" + fmt(100 * reduction, 3) +
                "% reduction, need >= 50%); mIoU fused " + fmt(fused_miou) + " vs lidar-only " + fmt(lidar_miou) +
                " (gap " + fmt(gap) + ", need >= 0.05) on " + std::to_string(sh.eval_data.scenes.size()) + " scenes, " +
                fmt(secs, 3) + " s"};
}

Outcome solver_sweep_trend(Shared& sh, const fs::path& out) {
    const auto t0 = std::chrono::steady_clock::now();
    const RunConfig cfg;
    if (!sh.fused) sh.fused = train_logged(cfg, sh.train_data, "fused (default config)");
    const Model model(cfg);
    MetricsReport report(config_hash(cfg), cfg.seed_init);
    solver_sweep(model, sh.fused->params, sh.eval_data, report);
    report.write_csv((out / "solver_sweep.csv").string());
    bool pass = true;
    int cells = 0;
    std::string table;
    for (SamplerKind k : {SamplerKind::DDIM, SamplerKind::DPMpp2M, SamplerKind::DEIS}) {
        std::vector<double> row;
        for (int steps : kSweepSteps) {
            const auto v = report.mean(experiment_name("sweep", k, steps, SensorCondition::Both), "miou");
            if (v && *v >= 0 && *v <= 1) ++cells;
            row.push_back(v.value_or(NAN));
        }
        pass = pass && row[3] >= row[0] - 0.02;
        table += " " + to_string(k) + "[";
        for (std::size_t i = 0; i < row.size(); ++i) table += (i ? "/" : "") + fmt(row[i], 3);
        table += "]";
    }
    return {pass && cells == 12, std::to_string(cells) + " cells in [0,1], mIoU at 1/2/4/8 steps:" + table +
                                     " (need s8 >= s1 - 0.02), " + std::to_string(sh.eval_data.scenes.size()) + " scenes, " +
                                     fmt(seconds_since(t0), 3) + " s"};
}

Outcome robustness_trend(Shared& sh, const fs::path& out) {
    const auto t0 = std::chrono::steady_clock::now();
    const int steps = 8;
    double deg[2][2] = {{0, 0}, {0, 0}};  // [psdt|plain][camera|lidar]
    MetricsReport all("acceptance", 0);
    std::string per_seed;
    for (std::uint64_t seed : {1, 2, 3}) {
        RunConfig psdt_cfg;
        psdt_cfg.seed_init = psdt_cfg.seed_noise = seed;
        RunConfig plain_cfg = psdt_cfg;
        plain_cfg.psdt.alpha_max = 0;
        std::optional<Trained> psdt;
        if (seed == 1 && sh.fused) psdt = sh.fused;
        else psdt = train_logged(psdt_cfg, sh.train_data, "psdt seed " + std::to_string(seed));
        if (seed == 1 && !sh.fused) sh.fused = psdt;
        const Trained plain = train_logged(plain_cfg, sh.train_data, "plain seed " + std::to_string(seed));
        per_seed += " seed " + std::to_string(seed) + ":";
        int idx = 0;
        for (const Trained* m : {static_cast<const Trained*>(&*psdt), &plain}) {
            MetricsReport rep(config_hash(m->cfg), seed);
            const std::string prefix = idx == 0 ? "robust_psdt" : "robust_plain";
            const double both = eval_miou(*m, sh.eval_data, SensorCondition::Both, steps, rep, prefix);
            const double cam = eval_miou(*m, sh.eval_data, SensorCondition::CameraDropped, steps, rep, prefix);
            const double lid = eval_miou(*m, sh.eval_data, SensorCondition::LidarDropped, steps, rep, prefix);
            deg[idx][0] += (both - cam) / 3;
            deg[idx][1] += (both - lid) / 3;
            per_seed += " " + prefix.substr(7) + " " + fmt(both, 3) + "/" + fmt(cam, 3) + "/" + fmt(lid, 3);
            all.append(rep);
            ++idx;
        }
        progress("robustness seed " + std::to_string(seed) + " done");
    }
    all.write_csv((out / "robustness.csv").string());
    const bool pass = deg[0][0] < deg[1][0] && deg[0][1] < deg[1][1];
    return {pass, "mean degradation at 8 steps over 3 seeds: camera dropped psdt " + fmt(deg[0][0]) + " vs plain " +
                      fmt(deg[1][0]) + ", lidar dropped psdt " + fmt(deg[0][1]) + " vs plain " + fmt(deg[1][1]) +
                      "; mIoU both/cam-dropped/lidar-dropped:" + per_seed + ", " + fmt(seconds_since(t0), 3) + " s"};
}

// ---------------------------------------------------------------- criterion 11

int run(const std::string& cmd) {
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

Outcome determinism(const std::string& cli, const fs::path& out) {
    if (cli.empty() || !fs::exists(cli)) return {false, "CLI binary not found (pass --cli or set BEVDIFF_CLI)"};
    const fs::path dir = out / "determinism";
    std::string train_csv[2], eval_csv[2];
    for (int r = 0; r < 2; ++r) {
        fs::remove_all(dir);
        fs::create_directories(dir);
        const std::string log = " >> " + (out / "determinism.log").string() + " 2>&1";
        const std::string d = (dir / "train.bin").string(), e = (dir / "eval.bin").string();
        if (run(cli + " gen-data --seed 1000 --scenes 32 --out " + d + log) != 0 ||
            run(cli + " gen-data --seed 900000 --scenes 4 --out " + e + log) != 0)
            return {false, "gen-data failed, see determinism.log"};
        if (run(cli + " train --data " + d + " --epochs 2 --out " + (dir / "train").string() + log) != 0)
            return {false, "train failed, see determinism.log"};
        if (run(cli + " eval --checkpoint " + (dir / "train" / "checkpoint.bin").string() + " --data " + e + " --out " +
                (dir / "eval").string() + log) != 0)
            return {false, "eval failed, see determinism.log"};
        train_csv[r] = slurp(dir / "train" / "metrics.csv");
        eval_csv[r] = slurp(dir / "eval" / "metrics.csv");
    }
    const bool same = train_csv[0] == train_csv[1] && eval_csv[0] == eval_csv[1];
    const bool nonempty = train_csv[0].size() > MetricsReport::csv_header().size() &&
                          eval_csv[0].size() > MetricsReport::csv_header().size();
    return {same && nonempty, "two gen-data+train+eval CLI runs: train metrics.csv (" + std::to_string(train_csv[0].size()) +
                                  " bytes) and eval metrics.csv (" + std::to_string(eval_csv[0].size()) + " bytes) " +
                                  (same ? "byte-identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria runner"};
    std::string cli_path, out_dir = "acceptance_out", only;
    int train_scenes = 256, eval_scenes = 64;
    app.add_option("--cli", cli_path, "path to the bevdiff binary (default: $BEVDIFF_CLI)");
    app.add_option("--out", out_dir, "directory for CSV artifacts");
    app.add_option("--only", only, "comma-separated criterion numbers to run");
    app.add_option("--train-scenes", train_scenes, "training scenes")->check(CLI::PositiveNumber);
    app.add_option("--eval-scenes", eval_scenes, "evaluation scenes (>= 16)")->check(CLI::Range(16, 100000));
    CLI11_PARSE(app, argc, argv);
    if (cli_path.empty())
        if (const char* env = std::getenv("BEVDIFF_CLI")) cli_path = env;

    std::set<int> selected;
    {
        std::stringstream ss(only);
        std::string item;
        while (std::getline(ss, item, ','))
            if (!item.empty()) selected.insert(std::stoi(item));
    }
    auto wanted = [&](int n) { return selected.empty() || selected.count(n) != 0; };

    const fs::path out(out_dir);
    fs::create_directories(out);
    Shared sh;
    auto ensure_data = [&] {
        if (!sh.train_data.scenes.empty()) return;
        const SynthConfig synth;
        sh.train_data = generate_dataset(1000, train_scenes, synth);
        sh.eval_data = generate_dataset(900000, eval_scenes, synth);
        progress("generated " + std::to_string(train_scenes) + " train scenes (seed 1000) and " +
                 std::to_string(eval_scenes) + " eval scenes (seed 900000)");
    };

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"gradient correctness", gradient_correctness},
        {"forward-process fidelity", forward_fidelity},
        {"posterior formulas", posterior_formulas},
        {"sampler consistency", sampler_consistency},
        {"assignment optimality", assignment_optimality},
        {"loss unit values", loss_unit_values},
        {"end-to-end learning", [&] { ensure_data(); return end_to_end(sh, out); }},
        {"solver-sweep trend", [&] { ensure_data(); return solver_sweep_trend(sh, out); }},
        {"robustness trend", [&] { ensure_data(); return robustness_trend(sh, out); }},
        {"PSDT schedule", psdt_schedule},
        {"determinism", [&] { return determinism(cli_path, out); }},
    };

    int failures = 0, ran = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int n = static_cast<int>(i) + 1;
        if (!wanted(n)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        ++ran;
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << criteria[i].first << "): " << o.detail
                  << std::endl;
    }
    std::cout << ran - failures << "/" << ran << " criteria passed" << std::endl;
    return failures == 0 ? 0 : 1;
}
