#include <gtest/gtest.h>

#include <cmath>

#include "bevdiff/samplers.hpp"
#include "oracles.hpp"

using namespace bevdiff;

namespace {

// Scalar helpers computed straight from alpha_bar, sampler index k -> schedule timestep k + 1.
double ab(const NoiseSchedule& s, int k) { return s.alpha_bar(k + 1); }
double lam(const NoiseSchedule& s, int k) { return 0.5 * std::log(ab(s, k) / (1 - ab(s, k))); }

std::vector<int> linspace_times(int T, int steps) {
    std::vector<int> times;
    for (int i = steps; i >= 0; --i) times.push_back(static_cast<int>(std::round(-1.0 + (T * 1.0) * i / steps)));
    return times;
}

// Bayes posterior mean E[x0 | xt] for x0 ~ N(mu, v): a linear-Gaussian toy predictor.
struct GaussianToy {
    double mu, v;
    const NoiseSchedule* s;
    double operator()(double xt, int t) const {
        const double a = s->alpha_bar(t);
        return mu + std::sqrt(a) * v / (a * v + 1 - a) * (xt - std::sqrt(a) * mu);
    }
    Predictor predictor() const {
        return [toy = *this](const Tensor& xt, int t, const Tensor&) {
            Tensor out = xt;
            for (auto& x : out.data()) x = toy(x, t);
            return out;
        };
    }
};

// DPM-Solver++(2M), data prediction, written from the multistep recurrence.
double dpmpp_reference(const GaussianToy& toy, double x, int T, int steps) {
    const NoiseSchedule& s = *toy.s;
    const auto times = linspace_times(T, steps);
    double d_prev = 0, h_prev = 0, x0 = 0;
    for (int i = 0; i < steps; ++i) {
        const int now = times[i], next = times[i + 1];
        x0 = toy(x, now + 1);
        const double a_next = std::sqrt(ab(s, next)), s_now = std::sqrt(1 - ab(s, now)), s_next = std::sqrt(1 - ab(s, next));
        if (next == -1) {
            x = a_next * x0;  // sigma_next = 0: the update lands on the prediction
            continue;
        }
        const double h = lam(s, next) - lam(s, now);
        double d = x0;
        if (i > 0) {
            const double r = h_prev / h;
            d = (1 + 1 / (2 * r)) * x0 - 1 / (2 * r) * d_prev;
        }
        x = s_next / s_now * x - a_next * (std::exp(-h) - 1) * d;
        d_prev = x0;
        h_prev = h;
    }
    return x0;
}

// Exponential integrator x_next = (s_next/s_now) x + s_next * int e^lambda x0(lambda) dlambda with the data
// prediction extrapolated linearly in lambda; the integral is done by composite Simpson quadrature.
double deis_step_reference(double x, double x0_now, double x0_prev, double l_prev, double l_now, double l_next,
                           double s_now, double s_next) {
    const int n = 2000;
    const double h = (l_next - l_now) / n;
    auto f = [&](double l) { return std::exp(l) * (x0_now + (x0_now - x0_prev) / (l_now - l_prev) * (l - l_now)); };
    double acc = f(l_now) + f(l_next);
    for (int i = 1; i < n; ++i) acc += (i % 2 ? 4 : 2) * f(l_now + i * h);
    return s_next / s_now * x + s_next * acc * h / 3;
}

double deis_reference(const GaussianToy& toy, double x, int T, int steps) {
    const NoiseSchedule& s = *toy.s;
    const auto times = linspace_times(T, steps);
    double x0_prev = 0, l_prev = 0, x0 = 0;
    for (int i = 0; i < steps; ++i) {
        const int now = times[i], next = times[i + 1];
        x0 = toy(x, now + 1);
        const double s_now = std::sqrt(1 - ab(s, now)), s_next = std::sqrt(1 - ab(s, next));
        if (i == 0 || next == -1) {
            x = next == -1 ? x0 : s_next / s_now * x + (std::sqrt(ab(s, next)) - s_next / s_now * std::sqrt(ab(s, now))) * x0;
        } else {
            x = deis_step_reference(x, x0, x0_prev, l_prev, lam(s, now), lam(s, next), s_now, s_next);
        }
        x0_prev = x0;
        l_prev = lam(s, now);
    }
    return x0;
}

Predictor oracle_predictor(const Tensor& x0, int* calls = nullptr) {
    return [x0, calls](const Tensor&, int, const Tensor&) {
        if (calls) ++*calls;
        return x0;
    };
}

const SamplerKind kAll[] = {SamplerKind::DDIM, SamplerKind::DPMpp2M, SamplerKind::DEIS};

}  // namespace

TEST(StepSchedule, AlgorithmExample) {
    EXPECT_EQ(make_step_schedule(8, 4).pairs, (std::vector<TimePair>{{7, 5}, {5, 3}, {3, 1}, {1, -1}}));
}

TEST(StepSchedule, SingleStep) {
    for (int T : {1, 8, 100}) EXPECT_EQ(make_step_schedule(T, 1).pairs, (std::vector<TimePair>{{T - 1, -1}}));
}

TEST(StepSchedule, MatchesLinspaceFormula) {
    const auto sch = make_step_schedule(100, 8);
    const auto times = linspace_times(100, 8);
    ASSERT_EQ(sch.pairs.size(), 8u);
    for (int i = 0; i < 8; ++i) EXPECT_EQ(sch.pairs[i], (TimePair{times[i], times[i + 1]}));
    EXPECT_EQ(sch.pairs.back().second, -1);
}

TEST(StepSchedule, StrictlyDecreasingForAllSizes) {
    for (int T = 1; T <= 60; ++T)
        for (int steps = 1; steps <= T; ++steps) {
            const auto sch = make_step_schedule(T, steps);
            ASSERT_EQ(static_cast<int>(sch.pairs.size()), steps);
            EXPECT_EQ(sch.pairs.front().first, T - 1);
            EXPECT_EQ(sch.pairs.back().second, -1);
            for (std::size_t i = 0; i < sch.pairs.size(); ++i) {
                EXPECT_LT(sch.pairs[i].second, sch.pairs[i].first);
                if (i > 0) EXPECT_EQ(sch.pairs[i].first, sch.pairs[i - 1].second);
            }
        }
    EXPECT_THROW(make_step_schedule(8, 9), std::invalid_argument);
    EXPECT_THROW(make_step_schedule(8, 0), std::invalid_argument);
}

TEST(Ddim, HandEvaluatedScalarCase) {
    Rng rng(1);
    const Tensor out = ddim_update(Tensor::scalar(1), Tensor::scalar(1), NoiseLevel::from_alpha_bar(0.25),
                                   NoiseLevel::from_alpha_bar(0.64), 0.0, rng);
    const double eps = (1 - 0.5) / std::sqrt(0.75);
    EXPECT_NEAR(eps, 0.57735, 1e-5);
    EXPECT_NEAR(out.item(), 0.8 + 0.6 * eps, 1e-15);
    EXPECT_NEAR(out.item(), 1.14641, 1e-5);
}

TEST(Ddim, CleanTargetReturnsPrediction) {
    const NoiseSchedule s = make_schedule(50, ScheduleKind::Linear);
    Rng rng(2);
    const Tensor xt = rng.normal({2, 3}), x0 = rng.normal({2, 3});
    EXPECT_EQ(ddim_step(xt, x0, 10, -1, 0.0, s, rng), x0);
}

TEST(Ddim, DeterministicAtZeroEta) {
    const NoiseSchedule s = make_schedule(50, ScheduleKind::Linear);
    Rng d(3);
    const Tensor xt = d.normal({4, 4}), x0 = d.normal({4, 4});
    Rng a(10), b(20);
    EXPECT_EQ(ddim_step(xt, x0, 30, 12, 0.0, s, a), ddim_step(xt, x0, 30, 12, 0.0, s, b));
    EXPECT_EQ(a.counter(), 0u);
}

TEST(Ddim, StochasticNoiseHasFormulaSigma) {
    const NoiseSchedule s = make_schedule(100, ScheduleKind::Linear);
    const int n = 100000;
    Rng d(4);
    const Tensor xt = d.normal({n}), x0 = d.normal({n});
    Rng r(5);
    const double eta = 1.0;
    const Tensor out = ddim_step(xt, x0, 60, 30, eta, s, r);
    const double a_now = ab(s, 60), a_next = ab(s, 30);
    const double sigma = eta * std::sqrt((1 - a_next) / (1 - a_now)) * std::sqrt(1 - a_now / a_next);
    double m = 0, v = 0;
    std::vector<double> resid(n);
    for (int i = 0; i < n; ++i) {
        const double eps = (xt[i] - std::sqrt(a_now) * x0[i]) / std::sqrt(1 - a_now);
        resid[i] = out[i] - std::sqrt(a_next) * x0[i] - std::sqrt(1 - a_next - sigma * sigma) * eps;
        m += resid[i];
    }
    m /= n;
    for (double x : resid) v += (x - m) * (x - m);
    v /= n - 1;
    EXPECT_LE(std::abs(m), 4 * sigma / std::sqrt(n));
    EXPECT_LE(std::abs(v - sigma * sigma), 4 * sigma * sigma * std::sqrt(2.0 / (n - 1)));
}

TEST(Ddim, RejectsBadTimes) {
    const NoiseSchedule s = make_schedule(10, ScheduleKind::Linear);
    Rng rng(1);
    const Tensor x = Tensor::scalar(0);
    EXPECT_THROW(ddim_step(x, x, 3, 3, 0, s, rng), std::invalid_argument);
    EXPECT_THROW(ddim_step(x, x, -1, -2, 0, s, rng), std::exception);
    EXPECT_THROW(ddim_step(x, x, 10, 2, 0, s, rng), std::out_of_range);
}

TEST(FirstOrder, AllSolversReduceToDdimWithoutHistory) {
    const NoiseSchedule s = make_schedule(100, ScheduleKind::Cosine);
    Rng d(6);
    const Tensor xt = d.normal({3, 5}), x0 = d.normal({3, 5});
    for (auto [now, next] : {TimePair{99, 49}, {40, 12}, {5, -1}}) {
        Rng rng(1);
        const Tensor ref = ddim_step(xt, x0, now, next, 0.0, s, rng);
        EXPECT_LE(max_abs_diff(dpmpp_2m_step(xt, x0, std::nullopt, now, std::nullopt, next, s), ref), 1e-12);
        const Tensor hist[] = {x0};
        const int th[] = {now};
        EXPECT_LE(max_abs_diff(deis_step(xt, hist, th, next, 1, s), ref), 1e-12);
        EXPECT_LE(max_abs_diff(deis_step(xt, hist, th, next, 2, s), ref), 1e-12);  // order-2 falls back
    }
}

TEST(Dpmpp, RejectsNonMonotoneHistory) {
    const NoiseSchedule s = make_schedule(20, ScheduleKind::Linear);
    const Tensor x = Tensor::scalar(0.3);
    EXPECT_THROW(dpmpp_2m_step(x, x, x, 10, 10, 5, s), std::invalid_argument);
    EXPECT_THROW(dpmpp_2m_step(x, x, x, 10, 4, 5, s), std::invalid_argument);
}

TEST(Dpmpp, MatchesScalarRecurrenceOnGaussianToy) {
    const NoiseSchedule s = make_schedule(100, ScheduleKind::Linear);
    const GaussianToy toy{0.4, 0.5, &s};
    for (int steps : {2, 3, 4, 8}) {
        Rng rng(7, steps), ref_rng(7, steps);
        const Tensor out = sample_loop(toy.predictor(), Tensor::scalar(0), SamplerConfig{SamplerKind::DPMpp2M}, steps, s, rng);
        EXPECT_NEAR(out.item(), dpmpp_reference(toy, ref_rng.normal(), 100, steps), 1e-12) << steps;
    }
}

TEST(Deis, MatchesQuadratureOracleOnGaussianToy) {
    const NoiseSchedule s = make_schedule(100, ScheduleKind::Linear);
    const GaussianToy toy{-0.2, 1.5, &s};
    for (int steps : {2, 3, 4, 8}) {
        Rng rng(8, steps), ref_rng(8, steps);
        const Tensor out = sample_loop(toy.predictor(), Tensor::scalar(0), SamplerConfig{SamplerKind::DEIS, 0.0, 2}, steps, s, rng);
        EXPECT_NEAR(out.item(), deis_reference(toy, ref_rng.normal(), 100, steps), 1e-9) << steps;
    }
}

TEST(Deis, SingleSecondOrderStepAgainstQuadrature) {
    const NoiseSchedule s = make_schedule(100, ScheduleKind::Linear);
    const double x = 0.9, x0_prev = 0.2, x0_now = 0.5;
    const Tensor hist[] = {Tensor::scalar(x0_prev), Tensor::scalar(x0_now)};
    const int th[] = {80, 50};
    const Tensor out = deis_step(Tensor::scalar(x), hist, th, 20, 2, s);
    const double ref = deis_step_reference(x, x0_now, x0_prev, lam(s, 80), lam(s, 50), lam(s, 20), std::sqrt(1 - ab(s, 50)),
                                           std::sqrt(1 - ab(s, 20)));
    EXPECT_NEAR(out.item(), ref, 1e-10);
}

TEST(SampleLoop, ConstantOracleIsFixedPoint) {
    const NoiseSchedule s = make_schedule(100, ScheduleKind::Linear);
    Rng d(9);
    const Tensor x0 = d.normal({2, 3, 4});
    for (SamplerKind k : kAll)
        for (int steps : {1, 2, 4, 8, 100}) {
            Rng rng(1);
            const Tensor out = sample_loop(oracle_predictor(x0), x0, SamplerConfig{k}, steps, s, rng);
            EXPECT_LE(max_abs_diff(out, x0), 1e-9);
        }
}

TEST(SampleLoop, DdimFullStepsTrajectoryLandsOnData) {
    const NoiseSchedule s = make_schedule(100, ScheduleKind::Linear);
    Rng d(10);
    const Tensor x0 = d.normal({3, 3});
    Rng rng(2);
    Tensor xt = rng.normal(x0.shape());
    for (auto [now, next] : make_step_schedule(100, 100).pairs) xt = ddim_step(xt, x0, now, next, 0.0, s, rng);
    EXPECT_LE(max_abs_diff(xt, x0), 1e-6);
}

TEST(SampleLoop, OnePredictorCallPerStep) {
    const NoiseSchedule s = make_schedule(20, ScheduleKind::Linear);
    const Tensor x0(Shape{2}, 0.5);
    for (SamplerKind k : kAll)
        for (int steps : {1, 3, 20}) {
            int calls = 0;
            Rng rng(1);
            sample_loop(oracle_predictor(x0, &calls), x0, SamplerConfig{k}, steps, s, rng);
            EXPECT_EQ(calls, steps);
        }
}

TEST(SampleLoop, PredictorSeesScheduleTimesteps) {
    const NoiseSchedule s = make_schedule(8, ScheduleKind::Linear);
    std::vector<int> seen;
    Rng rng(1);
    sample_loop([&](const Tensor& xt, int t, const Tensor&) { seen.push_back(t); return xt; }, Tensor::scalar(0),
                SamplerConfig{}, 4, s, rng);
    EXPECT_EQ(seen, (std::vector<int>{8, 6, 4, 2}));
}

TEST(SampleLoop, SolversAgreeAtOneStep) {
    const NoiseSchedule s = make_schedule(100, ScheduleKind::Linear);
    const GaussianToy toy{0.1, 0.7, &s};
    std::vector<Tensor> outs;
    for (SamplerKind k : kAll) {
        Rng rng(3);
        outs.push_back(sample_loop(toy.predictor(), Tensor(Shape{10}), SamplerConfig{k}, 1, s, rng));
    }
    EXPECT_LE(max_abs_diff(outs[0], outs[1]), 1e-9);
    EXPECT_LE(max_abs_diff(outs[0], outs[2]), 1e-9);
}

TEST(SampleLoop, BitIdenticalAcrossRuns) {
    const NoiseSchedule s = make_schedule(100, ScheduleKind::Linear);
    const GaussianToy toy{0.1, 0.7, &s};
    for (SamplerKind k : kAll) {
        Rng a(4), b(4);
        EXPECT_EQ(sample_loop(toy.predictor(), Tensor(Shape{6}), SamplerConfig{k}, 8, s, a),
                  sample_loop(toy.predictor(), Tensor(Shape{6}), SamplerConfig{k}, 8, s, b));
    }
}

TEST(SampleLoop, AbortsOnNonFinitePrediction) {
    const NoiseSchedule s = make_schedule(10, ScheduleKind::Linear);
    Rng rng(1);
    int calls = 0;
    try {
        sample_loop([&](const Tensor& xt, int, const Tensor&) {
            Tensor out = xt;
            if (++calls == 2) out[0] = NAN;
            return out;
        }, Tensor(Shape{3}), SamplerConfig{}, 4, s, rng);
        FAIL();
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
    }
}

TEST(SampleLoop, NoisyPredictorErrorNonIncreasingInSteps) {
    // The predictor knows x0 but leaks part of the noise still present in x_t.
    const NoiseSchedule s = make_schedule(100, ScheduleKind::Linear);
    for (SamplerKind k : kAll) {
        std::vector<double> err;
        for (int steps : {1, 2, 4, 8}) {
            double total = 0;
            for (int seed = 0; seed < 32; ++seed) {
                Rng d(100 + seed);
                const Tensor x0 = d.normal({16});
                const Predictor leaky = [&](const Tensor& xt, int t, const Tensor&) {
                    Tensor out = x0;
                    for (std::size_t i = 0; i < out.size(); ++i) out[i] += 0.3 * (xt[i] - std::sqrt(s.alpha_bar(t)) * x0[i]);
                    return out;
                };
                Rng rng(200 + seed);
                const Tensor out = sample_loop(leaky, x0, SamplerConfig{k}, steps, s, rng);
                total += max_abs_diff(out, x0);
            }
            err.push_back(total / 32);
        }
        for (std::size_t i = 1; i < err.size(); ++i) EXPECT_LE(err[i], err[i - 1]) << to_string(k) << " steps idx " << i;
    }
}
