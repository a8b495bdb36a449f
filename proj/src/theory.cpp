#include "stepsep/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

#include "stepsep/parallel.hpp"

namespace stepsep {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Independent stream for item `index` of a run seeded with `seed`.
std::mt19937_64 stream(std::uint64_t seed, std::uint64_t index) {
    return std::mt19937_64(splitmix64(seed ^ splitmix64(index + 1)));
}

double norm(std::span<const double> x) { return std::sqrt(sum_squares(x)); }

double rms_distance(const AudioBuffer& a, const AudioBuffer& b) {
    if (a.empty()) return 0.0;
    return distance(a, b) / std::sqrt(static_cast<double>(a.size()));
}

AudioBuffer random_perturbation(const AudioBuffer& like, double scale, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    AudioBuffer d(like.channels(), like.frames(), like.sample_rate());
    for (double& v : d.samples()) v = gauss(rng);
    const double n = norm(d.samples());
    if (n > 0.0)
        for (double& v : d.samples()) v *= scale / n;
    return d;
}

template <typename Diff>
LipschitzEstimate probe(const std::vector<AudioBuffer>& anchors, double scale, std::size_t probes, std::uint64_t seed,
                        Diff&& output_distance) {
    if (!(scale > 0.0)) throw std::invalid_argument("estimate_lipschitz: perturbation_scale must be > 0");
    LipschitzEstimate est;
    auto consider = [&](double ratio, std::string where) {
        ++est.probe_count;
        if (ratio > est.constant || est.max_ratio_location.empty()) {
            est.constant = std::max(est.constant, ratio);
            est.max_ratio_location = std::move(where);
        }
    };
    for (std::size_t a = 0; a < anchors.size(); ++a) {
        auto rng = stream(seed, a);
        for (std::size_t k = 0; k < probes; ++k) {
            const AudioBuffer moved = mix(anchors[a], random_perturbation(anchors[a], scale, rng), 1.0, 1.0);
            const double in = distance(moved, anchors[a]);
            if (in > 0.0)
                consider(output_distance(a, anchors[a], moved) / in,
                         "anchor " + std::to_string(a) + ", probe " + std::to_string(k));
        }
    }
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        for (std::size_t j = i + 1; j < anchors.size(); ++j) {
            const double in = distance(anchors[i], anchors[j]);
            if (in > 0.0)
                consider(output_distance(i, anchors[i], anchors[j]) / in,
                         "anchor pair (" + std::to_string(i) + ", " + std::to_string(j) + ")");
        }
    }
    return est;
}

}  // namespace

nlohmann::json LipschitzEstimate::to_json() const {
    return {{"constant", constant}, {"probe_count", probe_count}, {"max_ratio_location", max_ratio_location}};
}

LipschitzEstimate estimate_lipschitz(const BufferFn& g, const std::vector<AudioBuffer>& anchors,
                                     double perturbation_scale, std::size_t probes_per_anchor, std::uint64_t seed) {
    std::vector<AudioBuffer> at_anchor;
    for (const auto& a : anchors) at_anchor.push_back(g(a));
    return probe(anchors, perturbation_scale, probes_per_anchor, seed,
                 [&](std::size_t i, const AudioBuffer& a, const AudioBuffer& b) {
                     (void)a;
                     return distance(at_anchor[i], g(b));
                 });
}

LipschitzEstimate estimate_lipschitz(const ScalarFn& g, const std::vector<AudioBuffer>& anchors,
                                     double perturbation_scale, std::size_t probes_per_anchor, std::uint64_t seed) {
    std::vector<double> at_anchor;
    for (const auto& a : anchors) at_anchor.push_back(g(a));
    return probe(anchors, perturbation_scale, probes_per_anchor, seed,
                 [&](std::size_t i, const AudioBuffer& a, const AudioBuffer& b) {
                     (void)a;
                     return std::abs(at_anchor[i] - g(b));
                 });
}

// ---------------------------------------------------------------------------

nlohmann::json BoundSimReport::to_json() const {
    return {{"inputs",
             {{"r_star", r_star}, {"epsilon_r", epsilon_r}, {"trials", trials}, {"window", {window_low, window_high}}}},
            {"seed", seed},
            {"statistics",
             {{"metric_mean", metric_mean},
              {"empirical_variance", empirical_variance},
              {"clip_fraction", clip_fraction},
              {"distance_mean_square", distance_mean_square}}},
            {"constants",
             {{"lipschitz_model", lipschitz_model},
              {"lipschitz_model_estimate", lipschitz_model_estimate},
              {"lipschitz_metric", lipschitz_metric}}},
            {"bound", bound},
            {"pass", pass},
            {"diagnostic", diagnostic}};
}

BoundSimReport simulate_error_bound(const BoundSimConfig& config) {
    if (!config.model) throw std::invalid_argument("simulate_error_bound: no model");
    if (!(config.epsilon_r >= 0.0)) throw std::invalid_argument("simulate_error_bound: epsilon_r must be >= 0");
    if (config.trials < 2) throw std::invalid_argument("simulate_error_bound: need at least 2 trials");
    const auto& f = *config.model;
    const auto& problem = config.problem;
    const AudioBuffer& x0 = problem.mixture;
    const AudioBuffer y_prev = config.y_prev ? *config.y_prev : f.evaluate(x0);
    require_same_shape(x0, y_prev, "simulate_error_bound");

    BoundSimReport rep;
    rep.epsilon_r = config.epsilon_r;
    rep.trials = config.trials;
    rep.seed = config.seed;
    rep.r_star = config.r_star ? *config.r_star
                               : select_candidate(f, config.metric, problem, y_prev,
                                                  ratio_grid(config.lr_search_ratios, GridMode::inclusive))
                                     .r_star;
    if (!(rep.r_star >= 0.0 && rep.r_star <= 1.0)) throw std::invalid_argument("simulate_error_bound: r_star outside [0, 1]");
    rep.distance_mean_square = mean_square(mix(x0, y_prev, 1.0, -1.0));

    auto score_at = [&](double r, AudioBuffer* out) {
        AudioBuffer y = f.evaluate(blend(x0, y_prev, r));
        const MetricScore s = metric_eval(config.metric, problem, y);
        if (!s.usable()) throw MetricError("simulate_error_bound: metric unusable at r=" + std::to_string(r));
        if (out) *out = std::move(y);
        return s.value;
    };

    // Local constants along the ratio path inside r* +/- 4 eps.
    rep.window_low = std::max(0.0, rep.r_star - 4.0 * config.epsilon_r);
    rep.window_high = std::min(1.0, rep.r_star + 4.0 * config.epsilon_r);
    if (rep.window_high > rep.window_low && config.lr_grid_points >= 2) {
        const std::size_t g = config.lr_grid_points;
        std::vector<AudioBuffer> xs(g), ys(g);
        std::vector<double> rs(g);
        for (std::size_t i = 0; i < g; ++i) {
            const double r = rep.window_low + (rep.window_high - rep.window_low) * static_cast<double>(i) /
                                                  static_cast<double>(g - 1);
            xs[i] = blend(x0, y_prev, r);
            rs[i] = score_at(r, &ys[i]);
        }
        for (std::size_t i = 0; i < g; ++i) {
            for (std::size_t j = i + 1; j < g; ++j) {
                const double dy = rms_distance(ys[i], ys[j]);
                const double dx = rms_distance(xs[i], xs[j]);
                if (dy > 0.0) rep.lipschitz_metric = std::max(rep.lipschitz_metric, std::abs(rs[i] - rs[j]) / dy);
                if (dx > 0.0) rep.lipschitz_model_estimate = std::max(rep.lipschitz_model_estimate, dy / dx);
            }
        }
    }
    rep.lipschitz_model = config.lipschitz_model ? *config.lipschitz_model : rep.lipschitz_model_estimate;

    std::vector<double> values(config.trials);
    std::vector<char> clipped(config.trials, 0);
    std::vector<std::exception_ptr> errors(config.trials);
    parallel_for(config.trials, std::max<std::size_t>(1, config.workers), [&](std::size_t i) {
        try {
            auto rng = stream(config.seed, i);
            std::normal_distribution<double> gauss(0.0, 1.0);
            const double raw = rep.r_star + config.epsilon_r * gauss(rng);
            const double r = std::clamp(raw, 0.0, 1.0);
            clipped[i] = r != raw;
            values[i] = score_at(r, nullptr);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    });
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size() - 1);
    rep.metric_mean = mean;
    rep.empirical_variance = var;
    rep.clip_fraction = static_cast<double>(std::count(clipped.begin(), clipped.end(), 1)) /
                        static_cast<double>(config.trials);
    if (config.epsilon_r > 0.0 && var == 0.0)
        throw std::runtime_error("simulate_error_bound: degenerate sample set (zero variance with epsilon_r > 0)");

    const double lf = rep.lipschitz_model;
    const double lr = rep.lipschitz_metric;
    rep.bound = lf * lf * lr * lr * rep.distance_mean_square * config.epsilon_r * config.epsilon_r;
    rep.pass = rep.empirical_variance <= rep.bound;
    if (!rep.pass) {
        if (lf < rep.lipschitz_model_estimate * (1.0 - 1e-9))
            rep.diagnostic = "bound violated: model Lipschitz constant L_f=" + std::to_string(lf) +
                             " is below the finite-difference estimate " +
                             std::to_string(rep.lipschitz_model_estimate) + " along the ratio path";
        else
            rep.diagnostic = "bound violated: local metric constant L_r=" + std::to_string(lr) +
                             " does not cover the sampled ratio range";
    }
    return rep;
}

// ---------------------------------------------------------------------------

CleanEstimator estimator_from_model(ModelPtr model) {
    return [model = std::move(model)](const AudioBuffer& y, const BridgeSample&) { return model->evaluate(y); };
}

CleanEstimator contraction_estimator(double alpha) {
    return [alpha](const AudioBuffer& y, const BridgeSample& s) {
        return contraction_model({s.p, alpha})->evaluate(y);
    };
}

AudioBuffer bridge_point(const BridgeSample& s) { return mix(s.p, s.q, s.sigma, 1.0 - s.sigma); }

AudioBuffer bridge_score(const AudioBuffer& x, const BridgeSample& s, double epsilon) {
    require_same_shape(s.p, s.q, "bridge_score");
    require_same_shape(x, s.p, "bridge_score");
    // Gaussian mean written as (1 - sigma) q + sigma p, independently of bridge_point.
    const AudioBuffer centre = mix(s.q, s.p, 1.0 - s.sigma, s.sigma);
    AudioBuffer score = mix(x, centre, 1.0, -1.0);
    for (double& v : score.samples()) v *= -1.0 / (epsilon * epsilon);
    return score;
}

AudioBuffer parameterized_score(const AudioBuffer& y, const AudioBuffer& p_hat, double sigma, double epsilon) {
    const double k = 1.0 / (epsilon * epsilon * sigma);
    return mix(y, p_hat, k, -k);
}

nlohmann::json DdbmReport::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& s : samples)
        rows.push_back({{"sigma", s.sigma},
                        {"ddbm_loss", s.ddbm_loss},
                        {"separation_term", s.separation_term},
                        {"separation_loss", s.separation_loss},
                        {"ratio", s.zero_loss ? nlohmann::json(nullptr) : nlohmann::json(s.ratio)},
                        {"expected_ratio", s.expected_ratio},
                        {"bridge_score_max_abs", s.bridge_score_max_abs},
                        {"zero_loss", s.zero_loss},
                        {"pass", s.pass}});
    return {{"inputs", {{"epsilon", epsilon}, {"weighting", weighting}, {"count", samples.size()}}},
            {"tolerance", tolerance},
            {"statistics",
             {{"max_relative_deviation", max_relative_deviation},
              {"mean_ddbm_loss", mean_ddbm_loss},
              {"mean_separation_term", mean_separation_term}}},
            {"samples", rows},
            {"pass", pass}};
}

DdbmReport ddbm_loss_equivalence(const BridgeBatch& batch, const CleanEstimator& estimator, double tolerance) {
    if (!(batch.epsilon > 0.0)) throw std::invalid_argument("ddbm_loss_equivalence: epsilon must be > 0");
    DdbmReport rep;
    rep.epsilon = batch.epsilon;
    rep.weighting = batch.weighting.tag;
    rep.tolerance = tolerance;
    rep.pass = true;
    const double eps4 = std::pow(batch.epsilon, 4);

    for (const auto& s : batch.samples) {
        if (!(s.sigma > 0.0 && s.sigma <= 1.0))
            throw std::invalid_argument("ddbm_loss_equivalence: sigma must be in (0, 1]");
        require_same_shape(s.p, s.q, "ddbm_loss_equivalence");
        const AudioBuffer y = bridge_point(s);
        const AudioBuffer p_hat = estimator(y, s);
        require_same_shape(y, p_hat, "ddbm_loss_equivalence estimate");

        const AudioBuffer true_score = bridge_score(y, s, batch.epsilon);
        const AudioBuffer model_score = parameterized_score(y, p_hat, s.sigma, batch.epsilon);

        BridgeSampleResult r;
        r.sigma = s.sigma;
        for (double v : true_score.samples()) r.bridge_score_max_abs = std::max(r.bridge_score_max_abs, std::abs(v));
        r.ddbm_loss = batch.weighting.fn(s.sigma) * sum_squares(mix(model_score, true_score, 1.0, -1.0).samples());
        r.separation_term = sum_squares(mix(y, p_hat, 1.0, -1.0).samples()) / eps4;
        r.separation_loss = sum_squares(mix(p_hat, s.p, 1.0, -1.0).samples());
        r.expected_ratio = batch.weighting.fn(s.sigma) / (s.sigma * s.sigma);
        if (r.separation_term == 0.0) {
            r.zero_loss = true;
            r.pass = r.ddbm_loss == 0.0;
        } else {
            r.ratio = r.ddbm_loss / r.separation_term;
            const double dev = std::abs(r.ratio - r.expected_ratio) / std::abs(r.expected_ratio);
            rep.max_relative_deviation = std::max(rep.max_relative_deviation, dev);
            r.pass = dev <= tolerance;
        }
        rep.pass = rep.pass && r.pass;
        rep.mean_ddbm_loss += r.ddbm_loss;
        rep.mean_separation_term += r.separation_term;
        rep.samples.push_back(r);
    }
    if (!rep.samples.empty()) {
        rep.mean_ddbm_loss /= static_cast<double>(rep.samples.size());
        rep.mean_separation_term /= static_cast<double>(rep.samples.size());
    }
    return rep;
}

nlohmann::json ScoreReport::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& c : curve)
        rows.push_back({{"sigma", c.sigma},
                        {"measured_residual", c.measured_residual},
                        {"closed_form_residual", c.closed_form_residual}});
    return {{"inputs", {{"sigma", sigma}, {"epsilon", epsilon}}},
            {"statistics",
             {{"bridge_score_max_abs", bridge_score_max_abs},
              {"displaced_relative_error", displaced_relative_error},
              {"parameterized_score_norm", parameterized_score_norm},
              {"curve_max_deviation", curve_max_deviation}}},
            {"curve", rows},
            {"pass", pass}};
}

ScoreReport score_check(const AudioBuffer& p, const AudioBuffer& q, double sigma, double epsilon,
                        const CleanEstimator& estimator, const AudioBuffer& displacement,
                        const std::vector<double>& sigma_curve, double tolerance) {
    if (!(sigma > 0.0 && sigma <= 1.0)) throw std::invalid_argument("score_check: sigma must be in (0, 1]");
    if (!(epsilon > 0.0)) throw std::invalid_argument("score_check: epsilon must be > 0");
    require_same_shape(p, q, "score_check");
    require_same_shape(p, displacement, "score_check displacement");

    ScoreReport rep;
    rep.sigma = sigma;
    rep.epsilon = epsilon;
    const BridgeSample s{p, q, sigma};
    const AudioBuffer y = bridge_point(s);

    const AudioBuffer at_bridge = bridge_score(y, s, epsilon);
    for (double v : at_bridge.samples())
        rep.bridge_score_max_abs = std::max(rep.bridge_score_max_abs, std::abs(v));

    const AudioBuffer displaced = mix(y, displacement, 1.0, 1.0);
    const AudioBuffer expected = mix(displacement, displacement, -1.0 / (epsilon * epsilon), 0.0);
    const double scale = norm(expected.samples());
    const double err = distance(bridge_score(displaced, s, epsilon), expected);
    rep.displaced_relative_error = scale > 0.0 ? err / scale : err;

    rep.parameterized_score_norm = norm(parameterized_score(y, estimator(y, s), sigma, epsilon).samples());

    const double pq = distance(p, q);
    for (double sc : sigma_curve) {
        if (!(sc > 0.0 && sc <= 1.0)) throw std::invalid_argument("score_check: curve sigma must be in (0, 1]");
        const BridgeSample point{p, q, sc};
        const AudioBuffer yc = bridge_point(point);
        const AudioBuffer step = mix(estimator(yc, point), yc, 1.0, -1.0);  // p_hat(y) - y
        const AudioBuffer target = mix(p, yc, sc, -sc);                     // sigma (p - y)
        ScoreCurvePoint c{sc, distance(step, target), (1.0 - sc) * (1.0 - sc) * pq};
        rep.curve_max_deviation = std::max(rep.curve_max_deviation, std::abs(c.measured_residual - c.closed_form_residual));
        rep.curve.push_back(c);
    }
    rep.pass = rep.bridge_score_max_abs == 0.0 && rep.displaced_relative_error <= tolerance;
    return rep;
}

// ---------------------------------------------------------------------------

nlohmann::json MonotonicityReport::to_json() const {
    return {{"steps", steps},
            {"baseline", baseline},
            {"deltas", deltas},
            {"violations", violations},
            {"largest_delta_step", largest_delta_step ? nlohmann::json(*largest_delta_step) : nlohmann::json(nullptr)},
            {"lower_bound_holds", lower_bound_holds},
            {"monotone", monotone}};
}

MonotonicityReport monotonicity_audit(const RefinementTrace& trace, double tolerance) {
    if (trace.steps.empty()) throw std::invalid_argument("monotonicity_audit: empty trace");
    for (std::size_t i = 0; i < trace.steps.size(); ++i) {
        if (trace.steps[i].step != i)
            throw std::invalid_argument("monotonicity_audit: step " + std::to_string(i) + " is labelled " +
                                        std::to_string(trace.steps[i].step));
        if (!trace.steps[i].search_score.usable())
            throw std::invalid_argument("monotonicity_audit: step " + std::to_string(i) + " has no usable score");
    }
    MonotonicityReport rep;
    rep.steps = trace.steps.size();
    rep.baseline = trace.steps.front().search_score.value;
    rep.monotone = true;
    double best_delta = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 1; t < trace.steps.size(); ++t) {
        const double cur = trace.steps[t].search_score.value;
        const double delta = cur - trace.steps[t - 1].search_score.value;
        rep.deltas.push_back(delta);
        if (cur < rep.baseline - tolerance) rep.violations.push_back(t);
        if (delta < 0.0) rep.monotone = false;
        if (delta > best_delta) {
            best_delta = delta;
            rep.largest_delta_step = t;
        }
    }
    rep.lower_bound_holds = rep.violations.empty();
    return rep;
}

}  // namespace stepsep
