#include "stepsep/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <thread>

#include "json.hpp"
#include "stepsep/subprocess.hpp"

namespace stepsep {

namespace {

MetricScore ratio_db(double signal_energy, double error_energy) {
    MetricScore s;
    // No target component at all (e.g. a zero estimate) is the worst score, even with zero residual.
    if (signal_energy <= 0.0) {
        s.value = -kMetricCapDb;
        s.capped = true;
        return s;
    }
    if (error_energy <= 0.0) {
        s.value = kMetricCapDb;
        s.capped = true;
        return s;
    }
    const double db = 10.0 * std::log10(signal_energy / error_energy);
    s.value = std::clamp(db, -kMetricCapDb, kMetricCapDb);
    s.capped = s.value != db;
    return s;
}

double error_energy(std::span<const double> ref, std::span<const double> est) {
    double acc = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const double d = ref[i] - est[i];
        acc += d * d;
    }
    return acc;
}

bool silent(double energy, std::size_t count) {
    return count == 0 || energy / static_cast<double>(count) < kSilentMeanSquare;
}

}  // namespace

bool MetricScore::usable() const noexcept { return !skipped && std::isfinite(value); }

MetricKind MetricKind::parse(const std::string& text) {
    static const std::map<std::string, Id> names = {
        {"si_snr", Id::si_snr},          {"sdr", Id::sdr},
        {"usdr", Id::usdr_component},    {"usdr_component", Id::usdr_component},
        {"csdr", Id::csdr_component},    {"csdr_component", Id::csdr_component},
        {"search_sdr", Id::search_sdr},  {"neg_mse", Id::neg_mse},
    };
    const std::string prefix = "external:";
    if (text.rfind(prefix, 0) == 0) {
        MetricKind k{Id::external, text.substr(prefix.size())};
        if (k.command.empty()) throw std::invalid_argument("external metric needs a command: external:<command>");
        return k;
    }
    auto it = names.find(text);
    if (it == names.end()) throw std::invalid_argument("unknown metric: " + text);
    return MetricKind{it->second, {}};
}

std::string MetricKind::name() const {
    switch (id) {
        case Id::si_snr: return "si_snr";
        case Id::sdr: return "sdr";
        case Id::usdr_component: return "usdr_component";
        case Id::csdr_component: return "csdr_component";
        case Id::search_sdr: return "search_sdr";
        case Id::neg_mse: return "neg_mse";
        case Id::external: return "external:" + command;
    }
    return "unknown";
}

MetricScore si_snr(const AudioBuffer& reference, const AudioBuffer& estimate) {
    require_same_shape(reference, estimate, "si_snr");
    if (reference.frames() == 0) throw MetricError("si_snr: empty signals");
    const std::size_t n = reference.frames();
    double total = 0.0;
    bool capped = false;
    std::vector<double> r(n), e(n);
    for (std::size_t c = 0; c < reference.channels(); ++c) {
        auto rc = reference.channel(c);
        auto ec = estimate.channel(c);
        const double rm = std::accumulate(rc.begin(), rc.end(), 0.0) / static_cast<double>(n);
        const double em = std::accumulate(ec.begin(), ec.end(), 0.0) / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            r[i] = rc[i] - rm;
            e[i] = ec[i] - em;
        }
        const double rr = sum_squares(r);
        if (rr <= 0.0) throw MetricError("si_snr: reference has zero energy after mean removal");
        const double scale = std::inner_product(e.begin(), e.end(), r.begin(), 0.0) / rr;
        double noise = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = e[i] - scale * r[i];
            noise += d * d;
        }
        const MetricScore ch = ratio_db(scale * scale * rr, noise);
        total += ch.value;
        capped = capped || ch.capped;
    }
    return {total / static_cast<double>(reference.channels()), capped, false};
}

MetricScore sdr(const AudioBuffer& reference, const AudioBuffer& estimate) {
    require_same_shape(reference, estimate, "sdr");
    const double signal = sum_squares(reference.samples());
    if (silent(signal, reference.size())) return {0.0, false, true};
    return ratio_db(signal, error_energy(reference.samples(), estimate.samples()));
}

double usdr(std::span<const double> per_song_sdrs) {
    if (per_song_sdrs.empty()) throw MetricError("usdr: no songs");
    return std::accumulate(per_song_sdrs.begin(), per_song_sdrs.end(), 0.0) /
           static_cast<double>(per_song_sdrs.size());
}

double median(std::vector<double> values) {
    if (values.empty()) throw MetricError("median of empty set");
    std::sort(values.begin(), values.end());
    const std::size_t mid = values.size() / 2;
    if (values.size() % 2 == 1) return values[mid];
    return 0.5 * (values[mid - 1] + values[mid]);
}

CsdrReport csdr_report(std::span<const SongPair> songs, double chunk_seconds) {
    if (!(chunk_seconds > 0.0)) throw std::invalid_argument("csdr: chunk_seconds must be > 0");
    CsdrReport report;
    std::vector<double> medians;
    for (std::size_t s = 0; s < songs.size(); ++s) {
        const auto& song = songs[s];
        require_same_shape(song.reference, song.estimate, "csdr");
        const auto chunk = static_cast<std::size_t>(std::llround(chunk_seconds * song.reference.sample_rate()));
        std::vector<double> chunk_sdrs;
        for (std::size_t start = 0; chunk > 0 && start + chunk <= song.reference.frames(); start += chunk) {
            const MetricScore score = sdr(song.reference.slice(start, chunk), song.estimate.slice(start, chunk));
            if (!score.skipped) chunk_sdrs.push_back(score.value);
        }
        if (chunk_sdrs.empty()) {
            report.song_medians.push_back(std::nullopt);
            report.warnings.push_back("csdr: song " + std::to_string(s) + " has no valid chunk; excluded");
            continue;
        }
        medians.push_back(median(std::move(chunk_sdrs)));
        report.song_medians.push_back(medians.back());
    }
    if (medians.empty()) throw MetricError("csdr: every song was excluded (no valid chunks)");
    report.value = median(medians);
    return report;
}

double csdr(std::span<const SongPair> songs, double chunk_seconds) {
    auto report = csdr_report(songs, chunk_seconds);
    for (const auto& w : report.warnings) std::clog << "warning: " << w << '\n';
    return report.value;
}

std::vector<std::pair<std::size_t, std::size_t>> search_sdr_chunks(std::size_t frames, unsigned sample_rate,
                                                                   double chunk_seconds, double overlap) {
    const auto chunk = static_cast<std::size_t>(std::llround(chunk_seconds * sample_rate));
    const auto hop = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(chunk * (1.0 - overlap))));
    std::vector<std::pair<std::size_t, std::size_t>> out;
    if (frames < chunk || chunk == 0) {
        out.emplace_back(0, frames);
        return out;
    }
    for (std::size_t start = 0; start + chunk <= frames; start += hop) out.emplace_back(start, chunk);
    return out;
}

MetricScore search_sdr(const AudioBuffer& reference, const AudioBuffer& estimate) {
    require_same_shape(reference, estimate, "search_sdr");
    double total = 0.0;
    std::size_t terms = 0;
    bool capped = false;
    for (const auto& [start, len] : search_sdr_chunks(reference.frames(), reference.sample_rate())) {
        for (std::size_t c = 0; c < reference.channels(); ++c) {
            auto r = reference.channel(c).subspan(start, len);
            auto e = estimate.channel(c).subspan(start, len);
            const double signal = sum_squares(r);
            if (silent(signal, len)) continue;
            const MetricScore term = ratio_db(signal, error_energy(r, e));
            total += term.value;
            capped = capped || term.capped;
            ++terms;
        }
    }
    if (terms == 0) return {0.0, false, true};
    return {total / static_cast<double>(terms), capped, false};
}

MetricScore neg_mse(const AudioBuffer& reference, const AudioBuffer& estimate) {
    require_same_shape(reference, estimate, "neg_mse");
    if (reference.empty()) return {0.0, false, false};
    return {-error_energy(reference.samples(), estimate.samples()) / static_cast<double>(reference.size()), false,
            false};
}

namespace {

constexpr auto kExternalMetricTimeout = std::chrono::seconds(120);

std::shared_ptr<ProcessPool> metric_pool(const std::string& command) {
    static std::mutex mutex;
    static std::map<std::string, std::shared_ptr<ProcessPool>> pools;
    std::lock_guard lock(mutex);
    auto& pool = pools[command];
    if (!pool)
        pool = std::make_shared<ProcessPool>(split_command(command),
                                             std::max(1u, std::thread::hardware_concurrency()));
    return pool;
}

MetricScore external_metric(const std::string& command, const std::optional<AudioBuffer>& reference,
                            const AudioBuffer& estimate) {
    if (reference) require_same_shape(*reference, estimate, "external metric");
    auto pool = metric_pool(command);
    auto child = pool->lease();
    const auto deadline = std::chrono::steady_clock::now() + kExternalMetricTimeout;

    nlohmann::json header = {{"sample_rate", estimate.sample_rate()},
                             {"channels", estimate.channels()},
                             {"num_samples", estimate.frames()}};
    header["signals"] = reference ? nlohmann::json::array({"reference", "estimate"})
                                  : nlohmann::json::array({"estimate"});
    const std::string line = header.dump() + "\n";
    child->write_all({reinterpret_cast<const unsigned char*>(line.data()), line.size()}, deadline);
    if (reference) child->write_all(encode_interleaved_f32(*reference), deadline);
    child->write_all(encode_interleaved_f32(estimate), deadline);

    const std::string reply = child->read_line(deadline);
    double value = 0.0;
    try {
        value = nlohmann::json::parse(reply).at("score").get<double>();
    } catch (const std::exception& e) {
        throw ExternalProcessError(ExternalProcessError::Kind::malformed_reply,
                                   child->command() + ": bad metric reply '" + reply + "': " + e.what());
    }
    return {value, false, false};
}

}  // namespace

MetricScore metric_eval(const MetricKind& kind, const MixtureProblem& problem, const AudioBuffer& estimate) {
    if (kind.id == MetricKind::Id::external) return external_metric(kind.command, problem.reference, estimate);
    if (!problem.reference)
        throw MetricError("metric " + kind.name() + " is intrusive and needs a reference for problem '" +
                          problem.label + "'");
    const AudioBuffer& ref = *problem.reference;
    switch (kind.id) {
        case MetricKind::Id::si_snr: return si_snr(ref, estimate);
        case MetricKind::Id::sdr:
        case MetricKind::Id::usdr_component: return sdr(ref, estimate);
        case MetricKind::Id::csdr_component: {
            const SongPair song{ref, estimate};
            auto report = csdr_report(std::span(&song, 1));
            return {report.value, report.value >= kMetricCapDb || report.value <= -kMetricCapDb, false};
        }
        case MetricKind::Id::search_sdr: return search_sdr(ref, estimate);
        case MetricKind::Id::neg_mse: return neg_mse(ref, estimate);
        case MetricKind::Id::external: break;
    }
    throw MetricError("unhandled metric kind");
}

}  // namespace stepsep
