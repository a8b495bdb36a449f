#include "stepsep/synth.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace stepsep::synth {

namespace {

std::mt19937_64 problem_stream(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x5eedu};
    return std::mt19937_64(seq);
}

void scale_to_rms(AudioBuffer& x, double rms) {
    const double ms = mean_square(x);
    if (ms <= 0.0) return;
    const double g = rms / std::sqrt(ms);
    for (double& v : x.samples()) v *= g;
}

}  // namespace

nlohmann::json ToneNoiseParams::to_json() const {
    return {{"sample_rate", sample_rate}, {"seconds", seconds},   {"channels", channels},
            {"snr_db_min", snr_db_min},   {"snr_db_max", snr_db_max}, {"f0_min", f0_min},
            {"f0_max", f0_max},           {"harmonics", harmonics}, {"target_rms", target_rms}};
}

ToneNoiseParams ToneNoiseParams::from_json(const nlohmann::json& j) {
    ToneNoiseParams p;
    p.sample_rate = j.value("sample_rate", p.sample_rate);
    p.seconds = j.value("seconds", p.seconds);
    p.channels = j.value("channels", p.channels);
    p.snr_db_min = j.value("snr_db_min", p.snr_db_min);
    p.snr_db_max = j.value("snr_db_max", p.snr_db_max);
    p.f0_min = j.value("f0_min", p.f0_min);
    p.f0_max = j.value("f0_max", p.f0_max);
    p.harmonics = j.value("harmonics", p.harmonics);
    p.target_rms = j.value("target_rms", p.target_rms);
    return p;
}

MixtureProblem tone_noise_problem(std::uint64_t seed, std::size_t index, const ToneNoiseParams& params) {
    auto rng = problem_stream(seed, index);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const auto frames = static_cast<std::size_t>(std::llround(params.seconds * params.sample_rate));
    const double sr = params.sample_rate;
    const double f0 = params.f0_min + (params.f0_max - params.f0_min) * unit(rng);
    const double snr_db = params.snr_db_min + (params.snr_db_max - params.snr_db_min) * unit(rng);
    const double am_rate = 1.0 + 3.0 * unit(rng);

    AudioBuffer clean(params.channels, frames, params.sample_rate);
    AudioBuffer noise(params.channels, frames, params.sample_rate);
    for (std::size_t c = 0; c < params.channels; ++c) {
        std::vector<double> phase(params.harmonics);
        for (double& ph : phase) ph = 2.0 * std::numbers::pi * unit(rng);
        auto x = clean.channel(c);
        for (std::size_t i = 0; i < frames; ++i) {
            const double t = static_cast<double>(i) / sr;
            double v = 0.0;
            for (std::size_t h = 1; h <= params.harmonics; ++h) {
                const double f = f0 * static_cast<double>(h);
                if (f >= 0.45 * sr) break;
                v += std::sin(2.0 * std::numbers::pi * f * t + phase[h - 1]) / static_cast<double>(h);
            }
            // Slow amplitude modulation so the target is not stationary.
            x[i] = v * (0.6 + 0.4 * std::sin(2.0 * std::numbers::pi * am_rate * t));
        }
        for (double& v : noise.channel(c)) v = gauss(rng);
    }
    scale_to_rms(clean, params.target_rms);
    scale_to_rms(noise, params.target_rms * std::pow(10.0, -snr_db / 20.0));

    MixtureProblem problem;
    problem.mixture = mix(clean, noise, 1.0, 1.0);
    problem.reference = std::move(clean);
    problem.noise = std::move(noise);
    problem.label = "tone_noise_" + std::to_string(index);
    return problem;
}

std::vector<MixtureProblem> tone_noise_corpus(std::uint64_t seed, std::size_t count, const ToneNoiseParams& params) {
    std::vector<MixtureProblem> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(tone_noise_problem(seed, i, params));
    return out;
}

nlohmann::json ChunkFixtureParams::to_json() const {
    return {{"sample_rate", sample_rate},         {"channels", channels},     {"chunk_seconds", chunk_seconds},
            {"chunks_per_song", chunks_per_song}, {"sdr_min_db", sdr_min_db}, {"sdr_max_db", sdr_max_db}};
}

ChunkFixtureParams ChunkFixtureParams::from_json(const nlohmann::json& j) {
    ChunkFixtureParams p;
    p.sample_rate = j.value("sample_rate", p.sample_rate);
    p.channels = j.value("channels", p.channels);
    p.chunk_seconds = j.value("chunk_seconds", p.chunk_seconds);
    p.chunks_per_song = j.value("chunks_per_song", p.chunks_per_song);
    p.sdr_min_db = j.value("sdr_min_db", p.sdr_min_db);
    p.sdr_max_db = j.value("sdr_max_db", p.sdr_max_db);
    return p;
}

FixtureSong chunk_sdr_song(std::uint64_t seed, std::size_t index, const ChunkFixtureParams& params) {
    auto rng = problem_stream(seed, index);
    std::uniform_real_distribution<double> target(params.sdr_min_db, params.sdr_max_db);
    std::vector<double> targets(params.chunks_per_song);
    for (double& t : targets) t = target(rng);
    return chunk_sdr_song(seed ^ (0x9E3779B97F4A7C15ull * (index + 1)), targets, params);
}

FixtureSong chunk_sdr_song(std::uint64_t seed, const std::vector<double>& targets, const ChunkFixtureParams& params) {
    auto rng = problem_stream(seed, targets.size());
    std::normal_distribution<double> gauss(0.0, 1.0);
    const auto chunk = static_cast<std::size_t>(std::llround(params.chunk_seconds * params.sample_rate));

    FixtureSong song;
    song.chunk_sdr_db = targets;
    AudioBuffer ref(params.channels, chunk * targets.size(), params.sample_rate);
    AudioBuffer est = ref;
    for (std::size_t k = 0; k < targets.size(); ++k) {
        // Build in float32-representable values so the WAV round trip keeps the targets.
        AudioBuffer s(params.channels, chunk, params.sample_rate);
        AudioBuffer e(params.channels, chunk, params.sample_rate);
        for (double& v : s.samples()) v = static_cast<float>(0.1 * gauss(rng));
        for (double& v : e.samples()) v = gauss(rng);
        const double gain = std::sqrt(sum_squares(s.samples()) / sum_squares(e.samples()) /
                                      std::pow(10.0, targets[k] / 10.0));
        for (std::size_t c = 0; c < params.channels; ++c) {
            for (std::size_t i = 0; i < chunk; ++i) {
                ref.at(c, k * chunk + i) = s.at(c, i);
                est.at(c, k * chunk + i) = static_cast<float>(s.at(c, i) + gain * e.at(c, i));
            }
        }
    }
    song.pair = {std::move(ref), std::move(est)};
    return song;
}

}  // namespace stepsep::synth
