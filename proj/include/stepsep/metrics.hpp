#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "stepsep/audio.hpp"
#include "stepsep/problem.hpp"

namespace stepsep {

/// Ratio metrics saturate at +/- this many dB so argmax always sees a total order.
inline constexpr double kMetricCapDb = 100.0;
/// A reference (chunk) whose mean-square energy is below this is silent: SDR is undefined there.
inline constexpr double kSilentMeanSquare = 1e-8;

class MetricError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct MetricScore {
    double value = 0.0;
    bool capped = false;   // value was clamped to +/- kMetricCapDb
    bool skipped = false;  // undefined (silent reference); value is meaningless

    bool usable() const noexcept;
    friend bool operator==(const MetricScore&, const MetricScore&) = default;
};

struct MetricKind {
    enum class Id { si_snr, sdr, usdr_component, csdr_component, search_sdr, neg_mse, external };

    Id id = Id::si_snr;
    std::string command;  // only for external

    static MetricKind parse(const std::string& text);
    std::string name() const;
    /// Needs a clean reference to evaluate.
    bool intrusive() const noexcept { return id != Id::external; }

    friend bool operator==(const MetricKind&, const MetricKind&) = default;
};

/// Scale-invariant SNR averaged over channels.
MetricScore si_snr(const AudioBuffer& reference, const AudioBuffer& estimate);

/// 10 log10(sum s^2 / sum (s - s_hat)^2) with energies summed jointly over channels.
MetricScore sdr(const AudioBuffer& reference, const AudioBuffer& estimate);

/// Arithmetic mean of per-song SDRs.
double usdr(std::span<const double> per_song_sdrs);

struct SongPair {
    AudioBuffer reference;
    AudioBuffer estimate;
};

struct CsdrReport {
    double value = 0.0;
    std::vector<std::optional<double>> song_medians;  // nullopt: song excluded (no valid chunk)
    std::vector<std::string> warnings;
};

/// Median over songs of the median over non-overlapping chunks of chunk SDR.
/// The final partial chunk is dropped; silent-reference chunks are skipped.
CsdrReport csdr_report(std::span<const SongPair> songs, double chunk_seconds = 1.0);
double csdr(std::span<const SongPair> songs, double chunk_seconds = 1.0);

/// Frame offsets of the 6 s / 50%-overlap search chunks for a signal of `frames` samples.
/// When no full chunk fits, the whole signal is the single chunk.
std::vector<std::pair<std::size_t, std::size_t>> search_sdr_chunks(std::size_t frames, unsigned sample_rate,
                                                                   double chunk_seconds = 6.0,
                                                                   double overlap = 0.5);

/// Mean of per-channel SDRs over 6-second chunks with 50% overlap.
MetricScore search_sdr(const AudioBuffer& reference, const AudioBuffer& estimate);

/// -mean((reference - estimate)^2)
MetricScore neg_mse(const AudioBuffer& reference, const AudioBuffer& estimate);

/// Dispatch on kind. Intrusive kinds need problem.reference; external kinds
/// go through a pooled child process speaking the metric wire contract.
MetricScore metric_eval(const MetricKind& kind, const MixtureProblem& problem, const AudioBuffer& estimate);

double median(std::vector<double> values);

}  // namespace stepsep
