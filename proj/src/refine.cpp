#include "stepsep/refine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>

#include "json.hpp"
#include "stepsep/parallel.hpp"

namespace stepsep {

void RefinementConfig::validate() const {
    if (steps >= 1 && num_ratios < 2 && grid == GridMode::inclusive)
        throw std::invalid_argument("refine: need at least 2 ratios per step with the inclusive grid");
    if (steps >= 1 && num_ratios < 1) throw std::invalid_argument("refine: need at least 1 ratio per step");
}

std::size_t RefinementTrace::total_model_calls() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += s.model_calls;
    return n;
}

bool same_trace(const RefinementTrace& a, const RefinementTrace& b) {
    if (a.label != b.label || a.steps.size() != b.steps.size()) return false;
    for (std::size_t i = 0; i < a.steps.size(); ++i) {
        const auto& x = a.steps[i];
        const auto& y = b.steps[i];
        if (x.step != y.step || x.r_star != y.r_star || !(x.search_score == y.search_score) ||
            x.candidates != y.candidates || x.eval != y.eval || x.model_calls != y.model_calls)
            return false;
    }
    return true;
}

AudioBuffer blend(const AudioBuffer& x0, const AudioBuffer& y_prev, double r) {
    if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("blend: ratio must be in [0, 1]");
    require_same_shape(x0, y_prev, "blend");
    if (r == 1.0) return x0;
    if (r == 0.0) return y_prev;
    return mix(x0, y_prev, r, 1.0 - r);
}

std::vector<double> ratio_grid(std::size_t count, GridMode mode) {
    std::vector<double> out;
    if (mode == GridMode::inclusive) {
        if (count < 2) throw std::invalid_argument("ratio_grid: inclusive grid needs K >= 2");
        for (std::size_t k = 0; k < count; ++k)
            out.push_back(static_cast<double>(k) / static_cast<double>(count - 1));
    } else {
        if (count < 1) throw std::invalid_argument("ratio_grid: open grid needs K >= 1");
        for (std::size_t k = 1; k <= count; ++k)
            out.push_back(static_cast<double>(k) / static_cast<double>(count + 1));
    }
    return out;
}

namespace {

double effective(const MetricScore& s) {
    return s.usable() ? s.value : -std::numeric_limits<double>::infinity();
}

struct Evaluated {
    AudioBuffer output;
    MetricScore score;
    std::exception_ptr error;
};

std::string describe(const std::exception_ptr& error) {
    try {
        std::rethrow_exception(error);
    } catch (const std::exception& e) {
        return e.what();
    } catch (...) {
        return "unknown error";
    }
}

}  // namespace

Selection select_candidate(const SeparationModel& model, const MetricKind& search_metric,
                           const MixtureProblem& problem, const AudioBuffer& y_prev, const std::vector<double>& ratios,
                           std::size_t max_parallel) {
    if (ratios.empty()) throw std::invalid_argument("select_candidate: no ratios");

    std::vector<Evaluated> results(ratios.size());
    auto run_one = [&](std::size_t k) {
        try {
            results[k].output = model.evaluate(blend(problem.mixture, y_prev, ratios[k]));
            if (!results[k].output.same_shape(problem.mixture))
                throw ShapeError("model '" + model.descriptor().name + "' changed the signal shape");
            results[k].score = metric_eval(search_metric, problem, results[k].output);
        } catch (...) {
            results[k].error = std::current_exception();
        }
    };

    parallel_for(ratios.size(), model.parallel_safe() ? max_parallel : 1, run_one);

    // Reduce in k order so the tie policy is reproducible regardless of scheduling.
    Selection sel;
    std::size_t best = 0;
    for (std::size_t k = 0; k < ratios.size(); ++k) {
        if (results[k].error)
            throw RefinementError("candidate " + std::to_string(k) + " (r=" + std::to_string(ratios[k]) +
                                      "): " + describe(results[k].error),
                                  std::nullopt, k);
        sel.candidates.push_back({ratios[k], results[k].score});
        if (k == 0) continue;
        const double cur = effective(results[k].score);
        const double top = effective(results[best].score);
        if (cur > top || (cur == top && ratios[k] > ratios[best])) best = k;
    }
    sel.r_star = ratios[best];
    sel.score = results[best].score;
    sel.y_next = std::move(results[best].output);
    sel.model_calls = ratios.size();
    return sel;
}

RefinementResult refine(const SeparationModel& model, const MixtureProblem& problem, const RefinementConfig& config) {
    config.validate();
    problem.validate();
    if (config.search_metric.intrusive() && !problem.reference)
        throw RefinementError("search metric " + config.search_metric.name() + " needs a reference for problem '" +
                                  problem.label + "'",
                              std::nullopt, std::nullopt);

    const std::size_t parallel =
        config.max_parallel == 0 ? default_workers() : config.max_parallel;
    const auto ratios = config.steps > 0 ? ratio_grid(config.num_ratios, config.grid) : std::vector<double>{};

    RefinementResult result;
    result.trace.label = problem.label;

    auto evaluate_step = [&](StepRecord& rec, const AudioBuffer& y) {
        for (const auto& kind : config.eval_metrics) rec.eval.emplace_back(kind.name(), metric_eval(kind, problem, y));
    };
    using clock = std::chrono::steady_clock;
    auto elapsed_ms = [](clock::time_point start) {
        return std::chrono::duration<double, std::milli>(clock::now() - start).count();
    };

    AudioBuffer y;
    {
        const auto start = clock::now();
        StepRecord rec;
        try {
            y = model.evaluate(problem.mixture);
            if (!y.same_shape(problem.mixture))
                throw ShapeError("model '" + model.descriptor().name + "' changed the signal shape");
            rec.search_score = metric_eval(config.search_metric, problem, y);
            evaluate_step(rec, y);
        } catch (const std::exception& e) {
            throw RefinementError("step 0: " + std::string(e.what()), 0, std::nullopt);
        }
        rec.model_calls = 1;
        if (config.record_wall_time) rec.wall_ms = elapsed_ms(start);
        result.trace.steps.push_back(std::move(rec));
    }

    for (std::size_t t = 1; t <= config.steps; ++t) {
        const auto start = clock::now();
        StepRecord rec;
        rec.step = t;
        try {
            Selection sel = select_candidate(model, config.search_metric, problem, y, ratios, parallel);
            rec.r_star = sel.r_star;
            rec.model_calls = sel.model_calls;
            rec.search_score = sel.score;
            if (config.record_candidates) rec.candidates = std::move(sel.candidates);
            y = std::move(sel.y_next);
            evaluate_step(rec, y);
        } catch (const RefinementError& e) {
            throw RefinementError("step " + std::to_string(t) + ": " + e.what(), t, e.candidate());
        } catch (const std::exception& e) {
            throw RefinementError("step " + std::to_string(t) + ": " + std::string(e.what()), t, std::nullopt);
        }
        if (config.record_wall_time) rec.wall_ms = elapsed_ms(start);
        result.trace.steps.push_back(std::move(rec));
    }

    result.output = std::move(y);
    return result;
}

namespace {

nlohmann::json score_json(const MetricScore& s) {
    if (s.skipped || !std::isfinite(s.value)) return nullptr;
    return s.value;
}

std::string csv_number(double v) {
    if (!std::isfinite(v)) return "";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void write_trace_jsonl(const RefinementTrace& trace, std::ostream& out) {
    for (const auto& s : trace.steps) {
        nlohmann::json rec;
        rec["label"] = trace.label;
        rec["step"] = s.step;
        rec["r_star"] = s.r_star ? nlohmann::json(*s.r_star) : nlohmann::json(nullptr);
        rec["search_score"] = score_json(s.search_score);
        nlohmann::json eval = nlohmann::json::object();
        for (const auto& [name, score] : s.eval) eval[name] = score_json(score);
        rec["eval"] = eval;
        rec["model_calls"] = s.model_calls;
        if (!s.candidates.empty()) {
            nlohmann::json cands = nlohmann::json::array();
            for (const auto& c : s.candidates) cands.push_back({{"r", c.ratio}, {"score", score_json(c.score)}});
            rec["candidates"] = cands;
        }
        if (s.wall_ms > 0.0) rec["wall_ms"] = s.wall_ms;
        out << rec.dump() << '\n';
    }
}

void write_trace_csv(const RefinementTrace& trace, std::ostream& out) {
    out << "step,r_star,search_score";
    if (!trace.steps.empty())
        for (const auto& [name, score] : trace.steps.front().eval) out << ',' << name;
    out << '\n';
    for (const auto& s : trace.steps) {
        out << s.step << ',' << (s.r_star ? csv_number(*s.r_star) : "") << ','
            << (s.search_score.skipped ? "" : csv_number(s.search_score.value));
        for (const auto& [name, score] : s.eval) out << ',' << (score.skipped ? "" : csv_number(score.value));
        out << '\n';
    }
}

}  // namespace stepsep
