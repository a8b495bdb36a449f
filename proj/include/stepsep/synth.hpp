#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "stepsep/audio.hpp"
#include "stepsep/metrics.hpp"
#include "stepsep/problem.hpp"

namespace stepsep::synth {

/// Harmonic tone (the clean target) plus white Gaussian noise.
struct ToneNoiseParams {
    unsigned sample_rate = 16000;
    double seconds = 1.0;
    std::size_t channels = 1;
    double snr_db_min = -5.0;
    double snr_db_max = 5.0;
    double f0_min = 120.0;
    double f0_max = 400.0;
    std::size_t harmonics = 4;
    double target_rms = 0.1;

    nlohmann::json to_json() const;
    static ToneNoiseParams from_json(const nlohmann::json& j);
};

/// Problem `index` of the corpus seeded with `seed`; independent of every other index.
MixtureProblem tone_noise_problem(std::uint64_t seed, std::size_t index, const ToneNoiseParams& params = {});

std::vector<MixtureProblem> tone_noise_corpus(std::uint64_t seed, std::size_t count, const ToneNoiseParams& params = {});

/// Songs whose per-chunk SDRs are set by construction.
struct ChunkFixtureParams {
    unsigned sample_rate = 8000;
    std::size_t channels = 2;
    double chunk_seconds = 1.0;
    std::size_t chunks_per_song = 5;
    double sdr_min_db = 0.0;
    double sdr_max_db = 20.0;

    nlohmann::json to_json() const;
    static ChunkFixtureParams from_json(const nlohmann::json& j);
};

struct FixtureSong {
    SongPair pair;
    std::vector<double> chunk_sdr_db;  // declared targets, one per chunk
};

FixtureSong chunk_sdr_song(std::uint64_t seed, std::size_t index, const ChunkFixtureParams& params = {});

/// Builds a song from explicit per-chunk targets (reference chunk energy fixed,
/// error scaled so each chunk hits its target exactly in double precision).
FixtureSong chunk_sdr_song(std::uint64_t seed, const std::vector<double>& targets, const ChunkFixtureParams& params = {});

}  // namespace stepsep::synth
