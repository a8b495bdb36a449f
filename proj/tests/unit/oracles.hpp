#pragma once

// Reference computations for the unit tests, written independently of the
// library: straightforward loops in long double, no shared helpers.

#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "stepsep/audio.hpp"

namespace oracle {

inline stepsep::AudioBuffer random_buffer(std::uint64_t seed, std::size_t channels, std::size_t frames,
                                          unsigned rate = 16000, double scale = 0.1) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, scale);
    stepsep::AudioBuffer b(channels, frames, rate);
    for (double& v : b.samples()) v = g(rng);
    return b;
}

/// Per-channel zero-mean projection SI-SNR, averaged.
inline double si_snr(const stepsep::AudioBuffer& s, const stepsep::AudioBuffer& e) {
    long double total = 0;
    const std::size_t n = s.frames();
    for (std::size_t c = 0; c < s.channels(); ++c) {
        long double ms = 0, me = 0;
        for (std::size_t i = 0; i < n; ++i) {
            ms += s.at(c, i);
            me += e.at(c, i);
        }
        ms /= n;
        me /= n;
        long double se = 0, ss = 0;
        for (std::size_t i = 0; i < n; ++i) {
            se += (e.at(c, i) - me) * (s.at(c, i) - ms);
            ss += (s.at(c, i) - ms) * (s.at(c, i) - ms);
        }
        const long double alpha = se / ss;
        long double target = 0, noise = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const long double t = alpha * (s.at(c, i) - ms);
            const long double r = (e.at(c, i) - me) - t;
            target += t * t;
            noise += r * r;
        }
        total += 10.0L * std::log10(target / noise);
    }
    return static_cast<double>(total / s.channels());
}

inline double sdr(const stepsep::AudioBuffer& s, const stepsep::AudioBuffer& e) {
    long double num = 0, den = 0;
    for (std::size_t c = 0; c < s.channels(); ++c)
        for (std::size_t i = 0; i < s.frames(); ++i) {
            num += (long double)s.at(c, i) * s.at(c, i);
            den += ((long double)s.at(c, i) - e.at(c, i)) * ((long double)s.at(c, i) - e.at(c, i));
        }
    return static_cast<double>(10.0L * std::log10(num / den));
}

/// Unnormalized DFT of one windowed frame, bins 0..n/2.
inline std::vector<std::complex<double>> dft_frame(const std::vector<double>& frame) {
    const std::size_t n = frame.size();
    std::vector<std::complex<double>> out(n / 2 + 1);
    for (std::size_t k = 0; k <= n / 2; ++k) {
        std::complex<long double> acc = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const long double ang = -2.0L * std::numbers::pi_v<long double> * (long double)(k * j % n) / n;
            acc += std::complex<long double>(frame[j] * std::cos(ang), frame[j] * std::sin(ang));
        }
        out[k] = {static_cast<double>(acc.real()), static_cast<double>(acc.imag())};
    }
    return out;
}

inline double max_abs_diff(const stepsep::AudioBuffer& a, const stepsep::AudioBuffer& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.samples()[i] - b.samples()[i]));
    return m;
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
struct TempDir {
    std::filesystem::path path;
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path = std::filesystem::temp_directory_path() / ("stepsep_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

}  // namespace oracle
