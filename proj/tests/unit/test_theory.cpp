#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "stepsep/synth.hpp"
#include "stepsep/theory.hpp"

using namespace stepsep;

namespace {

MixtureProblem small_problem(std::uint64_t seed) {
    MixtureProblem p;
    p.reference = oracle::random_buffer(seed, 1, 256);
    p.mixture = mix(*p.reference, oracle::random_buffer(seed + 1, 1, 256), 1.0, 1.0);
    p.label = "small";
    return p;
}

StepRecord step(std::size_t t, double score) {
    StepRecord s;
    s.step = t;
    if (t > 0) s.r_star = 0.0;
    s.search_score = {score, false, false};
    return s;
}

}  // namespace

TEST_CASE("lipschitz probing recovers exact constants of linear maps") {
    std::vector<AudioBuffer> anchors;
    for (int i = 0; i < 3; ++i) anchors.push_back(oracle::random_buffer(100 + i, 1, 64));
    const auto id = estimate_lipschitz(BufferFn([](const AudioBuffer& x) { return x; }), anchors, 1e-3, 8);
    CHECK(id.constant == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(id.probe_count == 3 * 8 + 3);

    const auto scaled = estimate_lipschitz(BufferFn([](const AudioBuffer& x) { return mix(x, x, 3.0, 0.0); }), anchors,
                                           1e-3, 8);
    CHECK(scaled.constant == doctest::Approx(3.0).epsilon(1e-12));

    const auto contraction = contraction_model({anchors[0], 0.7});
    const auto c = estimate_lipschitz(BufferFn([&](const AudioBuffer& x) { return contraction->evaluate(x); }),
                                      anchors, 1e-3, 8);
    CHECK(c.constant == doctest::Approx(0.7).epsilon(1e-10));
}

TEST_CASE("lipschitz probing of a scalar function stays below its gradient norm") {
    const auto ref = oracle::random_buffer(200, 1, 2, 16000, 1.0);
    const std::vector<AudioBuffer> anchors{oracle::random_buffer(201, 1, 2, 16000, 1.0)};
    const double grad = 2.0 * distance(anchors[0], ref) / 2.0;
    const auto est = estimate_lipschitz(ScalarFn([&](const AudioBuffer& y) { return neg_mse(ref, y).value; }), anchors,
                                        1e-7, 4000, 3);
    CHECK(est.constant <= grad * (1 + 1e-5));
    CHECK(est.constant >= 0.95 * grad);
}

TEST_CASE("error-bound simulation: variance agrees with an independent Monte Carlo") {
    const auto problem = small_problem(300);
    const double alpha = 0.5, eps = 0.05;
    BoundSimConfig cfg;
    cfg.epsilon_r = eps;
    cfg.trials = 10000;
    cfg.model = contraction_model({*problem.reference, alpha});
    cfg.problem = problem;
    cfg.lipschitz_model = alpha;
    cfg.r_star = 0.3;  // interior, so clipping is negligible
    cfg.seed = 5;
    const auto rep = simulate_error_bound(cfg);
    CHECK(rep.pass);
    CHECK(rep.r_star == 0.3);
    CHECK(rep.clip_fraction == 0.0);

    const auto& x0 = problem.mixture;
    const auto& p = *problem.reference;
    const auto y0 = cfg.model->evaluate(x0);
    long double dms = 0;
    for (std::size_t i = 0; i < x0.size(); ++i) dms += std::pow((long double)x0.samples()[i] - y0.samples()[i], 2);
    dms /= x0.size();
    CHECK(rep.distance_mean_square == doctest::Approx(static_cast<double>(dms)).epsilon(1e-12));
    CHECK(rep.bound == doctest::Approx(rep.lipschitz_model * rep.lipschitz_model * rep.lipschitz_metric *
                                       rep.lipschitz_metric * rep.distance_mean_square * eps * eps)
                           .epsilon(1e-12));

    std::mt19937_64 rng(12345);
    std::normal_distribution<double> g(0.3, eps);
    double mean = 0, m2 = 0;
    const int n = 20000;
    for (int i = 1; i <= n; ++i) {
        const double r = std::clamp(g(rng), 0.0, 1.0);
        AudioBuffer xt(1, x0.frames(), x0.sample_rate());
        for (std::size_t j = 0; j < xt.size(); ++j) xt.samples()[j] = r * x0.samples()[j] + (1 - r) * y0.samples()[j];
        const double v = neg_mse(p, cfg.model->evaluate(xt)).value;
        const double d = v - mean;
        mean += d / i;
        m2 += d * (v - mean);
    }
    const double var = m2 / (n - 1);
    CHECK(rep.empirical_variance == doctest::Approx(var).epsilon(0.1));
    CHECK(rep.empirical_variance <= rep.bound);
}

TEST_CASE("error-bound simulation flags an understated model constant") {
    const auto problem = small_problem(400);
    BoundSimConfig cfg;
    cfg.epsilon_r = 0.05;
    cfg.trials = 2000;
    cfg.model = contraction_model({*problem.reference, 0.9});
    cfg.problem = problem;
    cfg.lipschitz_model = 0.01;
    cfg.r_star = 0.5;
    const auto rep = simulate_error_bound(cfg);
    CHECK_FALSE(rep.pass);
    CHECK(rep.diagnostic.find("L_f") != std::string::npos);

    cfg.trials = 1;
    CHECK_THROWS(simulate_error_bound(cfg));
}

TEST_CASE("error-bound simulation is reproducible from its seed") {
    const auto problem = small_problem(500);
    BoundSimConfig cfg;
    cfg.epsilon_r = 0.02;
    cfg.trials = 500;
    cfg.model = contraction_model({*problem.reference, 0.5});
    cfg.problem = problem;
    cfg.seed = 9;
    const auto a = simulate_error_bound(cfg);
    cfg.workers = 3;
    const auto b = simulate_error_bound(cfg);
    CHECK(a.empirical_variance == b.empirical_variance);
    CHECK(a.to_json() == b.to_json());
}

TEST_CASE("bridge score vanishes at the interpolation point and is -d / eps^2 nearby") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    for (int i = 0; i < 50; ++i) {
        const BridgeSample s{oracle::random_buffer(600 + i, 2, 100), oracle::random_buffer(700 + i, 2, 100), u(rng)};
        const auto y = bridge_point(s);
        const auto at_bridge = bridge_score(y, s, 1e-3);
        for (double v : at_bridge.samples()) CHECK(v == 0.0);

        const auto d = oracle::random_buffer(800 + i, 2, 100, 16000, 1e-3);
        const auto score = bridge_score(mix(y, d, 1.0, 1.0), s, 1e-3);
        const auto expected = mix(d, d, -1e6, 0.0);
        CHECK(distance(score, expected) <= 1e-10 * std::sqrt(sum_squares(expected.samples())));
    }
}

TEST_CASE("ddbm loss is the separation term times w(sigma) / sigma^2") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    BridgeBatch batch;
    batch.epsilon = 1e-2;
    for (int i = 0; i < 40; ++i)
        batch.samples.push_back({oracle::random_buffer(900 + i, 1, 64), oracle::random_buffer(950 + i, 1, 64), u(rng)});

    const auto estimator = contraction_estimator(0.4);
    const auto rep = ddbm_loss_equivalence(batch, estimator);
    CHECK(rep.pass);
    CHECK(rep.max_relative_deviation <= 1e-10);

    // Direct computation of both sides for one sample.
    const auto& s = batch.samples[3];
    const auto y = bridge_point(s);
    const auto p_hat = estimator(y, s);
    long double loss = 0, sep = 0;
    const long double e2 = batch.epsilon * batch.epsilon;
    for (std::size_t j = 0; j < y.size(); ++j) {
        const long double sp = ((long double)y.samples()[j] - p_hat.samples()[j]) / (e2 * s.sigma);
        loss += sp * sp;  // the true score is zero at y
        sep += std::pow((long double)y.samples()[j] - p_hat.samples()[j], 2) / (e2 * e2);
    }
    loss *= (long double)s.sigma * s.sigma;
    CHECK(rep.samples[3].ddbm_loss == doctest::Approx(static_cast<double>(loss)).epsilon(1e-12));
    CHECK(rep.samples[3].separation_term == doctest::Approx(static_cast<double>(sep)).epsilon(1e-12));

    BridgeBatch unit = batch;
    unit.weighting = Weighting::custom("unit", [](double) { return 1.0; });
    const auto u_rep = ddbm_loss_equivalence(unit, estimator);
    CHECK(u_rep.pass);
    for (const auto& r : u_rep.samples)
        CHECK(r.ratio == doctest::Approx(1.0 / (r.sigma * r.sigma)).epsilon(1e-10));
}

TEST_CASE("a perfect estimator yields zero loss on both sides") {
    BridgeBatch batch;
    batch.samples.push_back({oracle::random_buffer(1, 1, 16), oracle::random_buffer(2, 1, 16), 0.5});
    const CleanEstimator echo = [](const AudioBuffer& y, const BridgeSample&) { return y; };
    const auto rep = ddbm_loss_equivalence(batch, echo);
    CHECK(rep.samples[0].zero_loss);
    CHECK(rep.pass);
}

TEST_CASE("score check reports the closed-form residual of the oracle estimate") {
    const auto p = oracle::random_buffer(1000, 1, 128);
    const auto q = oracle::random_buffer(1001, 1, 128);
    const auto d = oracle::random_buffer(1002, 1, 128, 16000, 0.01);
    const CleanEstimator oracle_estimate = [](const AudioBuffer&, const BridgeSample& s) { return s.p; };
    const auto rep = score_check(p, q, 0.3, 1e-3, oracle_estimate, d, {0.2, 0.5, 0.8});
    CHECK(rep.pass);
    CHECK(rep.bridge_score_max_abs == 0.0);
    CHECK(rep.displaced_relative_error <= 1e-10);
    REQUIRE(rep.curve.size() == 3);
    for (const auto& pt : rep.curve)
        CHECK(pt.measured_residual == doctest::Approx(std::pow(1 - pt.sigma, 2) * distance(p, q)).epsilon(1e-12));
}

TEST_CASE("monotonicity audit") {
    RefinementTrace trace;
    trace.label = "hand";
    for (auto [t, v] : std::vector<std::pair<std::size_t, double>>{{0, 1.0}, {1, 5.0}, {2, 4.0}, {3, 6.0}, {4, 0.5}})
        trace.steps.push_back(step(t, v));
    const auto a = monotonicity_audit(trace);
    CHECK(a.baseline == 1.0);
    REQUIRE(a.deltas.size() == 4);
    CHECK(a.deltas[0] == 4.0);
    CHECK(a.largest_delta_step == std::size_t{1});
    CHECK(a.violations == std::vector<std::size_t>{4});
    CHECK_FALSE(a.lower_bound_holds);
    CHECK_FALSE(a.monotone);

    trace.steps.pop_back();
    const auto b = monotonicity_audit(trace);
    CHECK(b.lower_bound_holds);
    CHECK_FALSE(b.monotone);

    RefinementTrace empty;
    CHECK_THROWS(monotonicity_audit(empty));
}

TEST_CASE("synthetic corpus generation is deterministic per index") {
    const auto a = synth::tone_noise_problem(3, 7);
    const auto b = synth::tone_noise_problem(3, 7);
    CHECK(a.mixture == b.mixture);
    CHECK(*a.reference == *b.reference);
    const auto corpus = synth::tone_noise_corpus(3, 8);
    CHECK(corpus[7].mixture == a.mixture);
    CHECK_FALSE(corpus[6].mixture == a.mixture);
    CHECK(oracle::max_abs_diff(mix(*a.reference, *a.noise, 1, 1), a.mixture) < 1e-15);

    const auto j = synth::ToneNoiseParams{}.to_json();
    CHECK(synth::ToneNoiseParams::from_json(j).to_json() == j);
}
