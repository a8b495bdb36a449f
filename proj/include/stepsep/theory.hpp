#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "stepsep/audio.hpp"
#include "stepsep/metrics.hpp"
#include "stepsep/problem.hpp"
#include "stepsep/refine.hpp"
#include "stepsep/separators.hpp"

namespace stepsep {

// ---------------------------------------------------------------------------
// Lipschitz probing

struct LipschitzEstimate {
    double constant = 0.0;
    std::size_t probe_count = 0;
    std::string max_ratio_location;

    nlohmann::json to_json() const;
};

using BufferFn = std::function<AudioBuffer(const AudioBuffer&)>;
using ScalarFn = std::function<double(const AudioBuffer&)>;

/// Max of ||g(a) - g(b)|| / ||a - b|| over random perturbations of each anchor
/// (norm `perturbation_scale`) and over every pair of anchors. A lower bound
/// on the true local constant.
LipschitzEstimate estimate_lipschitz(const BufferFn& g, const std::vector<AudioBuffer>& anchors,
                                     double perturbation_scale, std::size_t probes_per_anchor, std::uint64_t seed = 0);

/// Same probing for scalar functions (metrics): |g(a) - g(b)| / ||a - b||.
LipschitzEstimate estimate_lipschitz(const ScalarFn& g, const std::vector<AudioBuffer>& anchors,
                                     double perturbation_scale, std::size_t probes_per_anchor, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Metric variance under noisy ratio selection

struct BoundSimConfig {
    double epsilon_r = 0.02;
    std::size_t trials = 10000;
    ModelPtr model;
    MetricKind metric{MetricKind::Id::neg_mse, {}};
    MixtureProblem problem;
    /// Centre of the ratio distribution. Defaults to the inclusive-grid argmax
    /// (K = lr_search_ratios) at y_prev.
    std::optional<double> r_star;
    /// Previous estimate. Defaults to f(x0).
    std::optional<AudioBuffer> y_prev;
    /// Known Lipschitz constant of the model; estimated along the ratio path when absent.
    std::optional<double> lipschitz_model;
    std::size_t lr_grid_points = 33;
    std::size_t lr_search_ratios = 10;
    std::uint64_t seed = 0;
    std::size_t workers = 1;
};

struct BoundSimReport {
    double r_star = 0.0;
    double epsilon_r = 0.0;
    std::size_t trials = 0;
    std::uint64_t seed = 0;
    double window_low = 0.0;
    double window_high = 0.0;
    double metric_mean = 0.0;
    double empirical_variance = 0.0;
    double clip_fraction = 0.0;
    double lipschitz_model = 0.0;            // constant used in the bound
    double lipschitz_model_estimate = 0.0;   // finite-difference estimate along the path
    double lipschitz_metric = 0.0;           // local, per unit RMS change of the estimate
    double distance_mean_square = 0.0;       // meansq(x0 - y_prev)
    double bound = 0.0;
    bool pass = false;
    std::string diagnostic;

    nlohmann::json to_json() const;
};

/// Draws r ~ N(r*, eps^2) clipped to [0, 1], scores R(f(blend(x0, y_prev, r)))
/// and compares the empirical variance with L_f^2 L_r^2 meansq(x0 - y_prev) eps^2.
BoundSimReport simulate_error_bound(const BoundSimConfig& config);

// ---------------------------------------------------------------------------
// Bridge-model loss equivalence

struct BridgeSample {
    AudioBuffer p;  // clean
    AudioBuffer q;  // noise
    double sigma = 0.5;
};

struct Weighting {
    std::string tag = "sigma_squared";
    std::function<double(double)> fn = [](double s) { return s * s; };

    static Weighting sigma_squared() { return {}; }
    static Weighting custom(std::string tag, std::function<double(double)> fn) { return {std::move(tag), std::move(fn)}; }
};

struct BridgeBatch {
    std::vector<BridgeSample> samples;
    double epsilon = 1e-3;
    Weighting weighting;
};

/// Produces the clean estimate p_hat(y) for a bridge point y.
using CleanEstimator = std::function<AudioBuffer(const AudioBuffer& y, const BridgeSample&)>;

CleanEstimator estimator_from_model(ModelPtr model);
/// p_hat(y) = p + alpha (y - p), the contraction model centred on each sample's own p.
CleanEstimator contraction_estimator(double alpha);

/// y = sigma p + (1 - sigma) q
AudioBuffer bridge_point(const BridgeSample& s);

/// Smoothed-bridge score -(x - ((1 - sigma) q + sigma p)) / eps^2.
AudioBuffer bridge_score(const AudioBuffer& x, const BridgeSample& s, double epsilon);

/// Parameterized score (y - p_hat) / (eps^2 sigma).
AudioBuffer parameterized_score(const AudioBuffer& y, const AudioBuffer& p_hat, double sigma, double epsilon);

struct BridgeSampleResult {
    double sigma = 0.0;
    double ddbm_loss = 0.0;        // w(sigma) ||s_param - score||^2
    double separation_term = 0.0;  // ||y - p_hat||^2 / eps^4
    double separation_loss = 0.0;  // ||p_hat - p||^2
    double ratio = 0.0;            // ddbm_loss / separation_term
    double expected_ratio = 0.0;   // w(sigma) / sigma^2
    double bridge_score_max_abs = 0.0;
    bool zero_loss = false;
    bool pass = false;
};

struct DdbmReport {
    double epsilon = 0.0;
    std::string weighting;
    double tolerance = 1e-10;
    std::vector<BridgeSampleResult> samples;
    double max_relative_deviation = 0.0;
    double mean_ddbm_loss = 0.0;
    double mean_separation_term = 0.0;
    bool pass = false;

    nlohmann::json to_json() const;
};

DdbmReport ddbm_loss_equivalence(const BridgeBatch& batch, const CleanEstimator& estimator, double tolerance = 1e-10);

struct ScoreCurvePoint {
    double sigma = 0.0;
    double measured_residual = 0.0;     // ||(p_hat(y) - y) - sigma (p - y)||
    double closed_form_residual = 0.0;  // (1 - sigma)^2 ||p - q|| for the oracle estimate
};

struct ScoreReport {
    double sigma = 0.0;
    double epsilon = 0.0;
    double bridge_score_max_abs = 0.0;           // at the interpolation point: exactly 0
    double displaced_relative_error = 0.0;       // score(y + d) against -d / eps^2
    double parameterized_score_norm = 0.0;
    std::vector<ScoreCurvePoint> curve;
    double curve_max_deviation = 0.0;
    bool pass = false;

    nlohmann::json to_json() const;
};

ScoreReport score_check(const AudioBuffer& p, const AudioBuffer& q, double sigma, double epsilon,
                        const CleanEstimator& estimator, const AudioBuffer& displacement,
                        const std::vector<double>& sigma_curve, double tolerance = 1e-10);

// ---------------------------------------------------------------------------
// Trace audit

struct MonotonicityReport {
    std::size_t steps = 0;
    double baseline = 0.0;
    std::vector<double> deltas;               // score_t - score_{t-1}, t >= 1
    std::vector<std::size_t> violations;      // steps whose score < baseline - tolerance
    std::optional<std::size_t> largest_delta_step;
    bool lower_bound_holds = false;
    bool monotone = false;                    // informational only

    nlohmann::json to_json() const;
};

MonotonicityReport monotonicity_audit(const RefinementTrace& trace, double tolerance = 1e-9);

}  // namespace stepsep
