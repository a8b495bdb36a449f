#pragma once

#include <cstddef>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "stepsep/audio.hpp"
#include "stepsep/metrics.hpp"
#include "stepsep/problem.hpp"
#include "stepsep/separators.hpp"

namespace stepsep {

enum class GridMode {
    inclusive,  // (k-1)/(K-1), k = 1..K: both 0 and 1 are candidates
    open,       // k/(K+1), k = 1..K: endpoints excluded
};

enum class TiePolicy { prefer_larger_r };

struct RefinementConfig {
    std::size_t steps = 20;        // T
    std::size_t num_ratios = 10;   // K
    MetricKind search_metric{MetricKind::Id::si_snr, {}};
    std::vector<MetricKind> eval_metrics;
    GridMode grid = GridMode::inclusive;
    TiePolicy tie_policy = TiePolicy::prefer_larger_r;
    bool record_candidates = true;
    bool record_wall_time = true;
    /// Worker threads for candidate evaluation; 0 picks hardware concurrency.
    /// Only used when the model is parallel-safe.
    std::size_t max_parallel = 0;

    void validate() const;
};

struct Candidate {
    double ratio = 0.0;
    MetricScore score;
    friend bool operator==(const Candidate&, const Candidate&) = default;
};

struct StepRecord {
    std::size_t step = 0;
    std::optional<double> r_star;  // absent at step 0
    MetricScore search_score;
    std::vector<Candidate> candidates;
    std::vector<std::pair<std::string, MetricScore>> eval;
    std::size_t model_calls = 0;
    double wall_ms = 0.0;
};

struct RefinementTrace {
    std::string label;
    std::vector<StepRecord> steps;

    std::size_t total_model_calls() const;
};

/// Field-for-field equality, ignoring wall time.
bool same_trace(const RefinementTrace& a, const RefinementTrace& b);

class RefinementError : public std::runtime_error {
public:
    RefinementError(const std::string& message, std::optional<std::size_t> step, std::optional<std::size_t> candidate)
        : std::runtime_error(message), step_(step), candidate_(candidate) {}

    std::optional<std::size_t> step() const noexcept { return step_; }
    std::optional<std::size_t> candidate() const noexcept { return candidate_; }

private:
    std::optional<std::size_t> step_;
    std::optional<std::size_t> candidate_;
};

/// r x0 + (1 - r) y_prev. r = 1 returns x0 and r = 0 returns y_prev bit-exactly.
AudioBuffer blend(const AudioBuffer& x0, const AudioBuffer& y_prev, double r);

std::vector<double> ratio_grid(std::size_t count, GridMode mode = GridMode::inclusive);

struct Selection {
    double r_star = 1.0;
    MetricScore score;  // search score of the winner
    AudioBuffer y_next;
    std::vector<Candidate> candidates;
    std::size_t model_calls = 0;
};

/// Scores f(blend(x0, y_prev, r)) for every r and keeps the best. Ties go to
/// the larger r. Non-finite or skipped scores never win unless nothing else
/// is usable. The winner's model output is returned as y_next (no recompute).
Selection select_candidate(const SeparationModel& model, const MetricKind& search_metric,
                           const MixtureProblem& problem, const AudioBuffer& y_prev, const std::vector<double>& ratios,
                           std::size_t max_parallel = 1);

struct RefinementResult {
    AudioBuffer output;
    RefinementTrace trace;
};

RefinementResult refine(const SeparationModel& model, const MixtureProblem& problem, const RefinementConfig& config);

// Trace export. Schema: one JSON object per step with keys
// step, r_star (null at step 0), search_score, eval{name: value}, model_calls,
// candidates[{r, score}] (when recorded) and wall_ms (when timed).
void write_trace_jsonl(const RefinementTrace& trace, std::ostream& out);
/// Flat columns: step, r_star, search_score, then one column per eval metric.
void write_trace_csv(const RefinementTrace& trace, std::ostream& out);

}  // namespace stepsep
