#include <chrono>
#include <cmath>
#include <cstring>
#include <thread>

#include "doctest.h"
#include "oracles.hpp"
#include "stepsep/separators.hpp"
#include "stepsep/subprocess.hpp"

using namespace stepsep;

namespace {

ExternalProcessError::Kind failure_kind(const SeparationModel& m, const AudioBuffer& x, std::string* message = nullptr) {
    try {
        m.evaluate(x);
    } catch (const ExternalProcessError& e) {
        if (message) *message = e.what();
        return e.kind();
    }
    FAIL("expected ExternalProcessError");
    return ExternalProcessError::Kind::spawn_failed;
}

std::vector<std::string> child(std::initializer_list<std::string> args) {
    std::vector<std::string> argv{STEPSEP_FIXTURE_CHILD};
    argv.insert(argv.end(), args);
    return argv;
}

}  // namespace

TEST_CASE("identity returns its input") {
    const auto x = oracle::random_buffer(1, 2, 333);
    CHECK(identity_model()->evaluate(x) == x);
}

TEST_CASE("contraction model is p + alpha (x - p)") {
    const auto p = oracle::random_buffer(2, 2, 100);
    const auto x = oracle::random_buffer(3, 2, 100);
    for (double alpha : {0.0, 0.3, 0.9}) {
        const auto y = contraction_model({p, alpha})->evaluate(x);
        for (std::size_t i = 0; i < y.size(); ++i)
            CHECK(y.samples()[i] == doctest::Approx(p.samples()[i] + alpha * (x.samples()[i] - p.samples()[i])).epsilon(1e-15));
    }
    CHECK(contraction_model({p, 0.0})->evaluate(x) == p);
    CHECK_THROWS_AS(contraction_model({p, 1.0}), std::invalid_argument);
    CHECK_THROWS_AS(contraction_model({p, -0.1}), std::invalid_argument);
    CHECK_THROWS_AS(contraction_model({p, 0.5})->evaluate(oracle::random_buffer(4, 1, 100)), ShapeError);
}

TEST_CASE("spectral gate applies max(0, 1 - beta N / |X|) per bin") {
    // One rectangular frame of 16 samples: stft is a plain DFT, so the gate can be checked by hand.
    const StftConfig cfg{16, 16, WindowKind::rectangular};
    const auto x = oracle::random_buffer(5, 1, 16);
    const auto noise = oracle::random_buffer(6, 1, 16, 16000, 0.05);
    const auto profile = estimate_noise_profile(noise, cfg);

    std::vector<double> xf(16), nf(16);
    for (std::size_t i = 0; i < 16; ++i) {
        xf[i] = x.at(0, i);
        nf[i] = noise.at(0, i);
    }
    const auto X = oracle::dft_frame(xf);
    const auto N = oracle::dft_frame(nf);
    for (std::size_t k = 0; k < X.size(); ++k) CHECK(profile.at(0, k) == doctest::Approx(std::abs(N[k])).epsilon(1e-12));

    const double beta = 1.5;
    std::vector<std::complex<double>> G(X.size());
    for (std::size_t k = 0; k < X.size(); ++k)
        G[k] = X[k] * std::max(0.0, 1.0 - beta * std::abs(N[k]) / std::abs(X[k]));
    // Inverse real DFT by hand.
    std::vector<double> expected(16, 0.0);
    for (std::size_t n = 0; n < 16; ++n) {
        double acc = 0.0;
        for (std::size_t k = 0; k < 16; ++k) {
            const auto c = k <= 8 ? G[k] : std::conj(G[16 - k]);
            acc += (c * std::polar(1.0, 2 * std::numbers::pi * double(k * n) / 16.0)).real();
        }
        expected[n] = acc / 16.0;
    }
    const auto y = spectral_gate_model(profile, beta)->evaluate(x);
    for (std::size_t n = 0; n < 16; ++n) CHECK(y.at(0, n) == doctest::Approx(expected[n]).epsilon(1e-10));
}

TEST_CASE("spectral gate with a zero profile is transparent and zero input stays zero") {
    const auto x = oracle::random_buffer(7, 2, 5000);
    const auto gate = spectral_gate_model(estimate_noise_profile(AudioBuffer(2, 4096, 16000)), 1.0);
    CHECK(oracle::max_abs_diff(gate->evaluate(x), x) < 1e-12);
    const AudioBuffer zero(2, 5000, 16000);
    CHECK(gate->evaluate(zero) == zero);
    CHECK_THROWS_AS(gate->evaluate(oracle::random_buffer(8, 1, 100)), ShapeError);
    CHECK_THROWS_AS(spectral_gate_model(estimate_noise_profile(x), 0.5), std::invalid_argument);
}

TEST_CASE("spectral gate removes stationary noise energy") {
    const auto noise = oracle::random_buffer(9, 1, 16000, 16000, 0.05);
    const auto other_noise = oracle::random_buffer(10, 1, 16000, 16000, 0.05);
    const auto gate = spectral_gate_model(estimate_noise_profile(noise), 2.0);
    CHECK(mean_square(gate->evaluate(other_noise)) < 0.1 * mean_square(other_noise));
}

TEST_CASE("quietest-frames profile picks the low-energy frames") {
    AudioBuffer x = oracle::random_buffer(11, 1, 32768, 16000, 0.01);
    for (std::size_t i = 16384; i < x.frames(); ++i) x.at(0, i) *= 100.0;
    const StftConfig cfg{1024, 512, WindowKind::hann};
    const auto quiet = estimate_noise_profile_from_quietest(x, 0.1, cfg);
    const auto loud = estimate_noise_profile(x.slice(16384, 16384), cfg);
    for (std::size_t k = 10; k < 500; k += 50) CHECK(quiet.at(0, k) < 0.1 * loud.at(0, k));
    const auto adaptive = adaptive_spectral_gate_model(1.0, 0.1, cfg);
    CHECK(adaptive->descriptor().parameters.at("profile") == "quietest");
    CHECK(adaptive->evaluate(x).same_shape(x));
}

TEST_CASE("oracle IRM recovers the reference when there is no interference") {
    const auto p = oracle::random_buffer(12, 2, 4000);
    const auto m = oracle_irm_model(p);
    CHECK(oracle::max_abs_diff(m->evaluate(p), p) < 1e-8);
    const auto x = mix(p, oracle::random_buffer(13, 2, 4000), 1.0, 1.0);
    CHECK(distance(m->evaluate(x), p) < distance(x, p));
}

TEST_CASE("external model round-trips audio through the wire contract") {
    auto x = oracle::random_buffer(14, 2, 1234, 44100);
    for (double& v : x.samples()) v = static_cast<float>(v);
    const auto echo = external_model(child({"identity"}));
    CHECK(echo->evaluate(x) == x);
    CHECK(echo->evaluate(x) == x);  // the same child serves repeated requests
    CHECK_FALSE(echo->parallel_safe());

    const auto half = external_model(child({"gain", "0.5"}), {std::chrono::seconds(10), 2});
    CHECK(half->parallel_safe());
    const auto y = half->evaluate(x);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.samples()[i] == static_cast<float>(x.samples()[i] * 0.5));
    CHECK(half->descriptor().name == "external");
}

TEST_CASE("external model failures are typed and carry the child's stderr") {
    const auto x = oracle::random_buffer(15, 1, 64);
    std::string message;
    const auto crash = external_model(child({"crash"}));
    CHECK(failure_kind(*crash, x, &message) == ExternalProcessError::Kind::crashed);
    CHECK(message.find("deliberate failure") != std::string::npos);
    // A crashed child is discarded; the next request spawns a fresh one and fails the same way.
    CHECK(failure_kind(*crash, x) == ExternalProcessError::Kind::crashed);

    CHECK(failure_kind(*external_model(child({"malformed"})), x) == ExternalProcessError::Kind::malformed_reply);
    CHECK(failure_kind(*external_model(child({"wrong_shape"})), x) == ExternalProcessError::Kind::malformed_reply);
    CHECK(failure_kind(*external_model({"/nonexistent/stepsep-model"}), x) == ExternalProcessError::Kind::spawn_failed);

    const auto start = std::chrono::steady_clock::now();
    const auto hang = external_model(child({"hang"}), {std::chrono::milliseconds(300), 1});
    CHECK(failure_kind(*hang, x) == ExternalProcessError::Kind::timeout);
    CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(10));
}

TEST_CASE("external pool recovers after a rejected reply") {
    // wrong_shape sends more payload than requested; the child must not be reused.
    const auto bad = external_model(child({"wrong_shape"}));
    const auto x = oracle::random_buffer(16, 1, 32);
    CHECK(failure_kind(*bad, x) == ExternalProcessError::Kind::malformed_reply);
    CHECK(failure_kind(*bad, x) == ExternalProcessError::Kind::malformed_reply);
}

TEST_CASE("wire framing is channel-interleaved little-endian float32") {
    const AudioBuffer b({{1.0, 2.0}, {3.0, 4.0}}, 8000);
    const auto bytes = encode_interleaved_f32(b);
    REQUIRE(bytes.size() == 16);
    float f[4];
    std::memcpy(f, bytes.data(), 16);
    CHECK(f[0] == 1.0f);
    CHECK(f[1] == 3.0f);
    CHECK(f[2] == 2.0f);
    CHECK(f[3] == 4.0f);
    CHECK(decode_interleaved_f32(bytes, {8000, 2, 2}) == b);
    CHECK_THROWS(decode_interleaved_f32(bytes, {8000, 2, 3}));
}

TEST_CASE("split_command honours quotes") {
    const auto v = split_command("python3 -c 'print(1)' \"a b\" c");
    REQUIRE(v.size() == 5);
    CHECK(v[2] == "print(1)");
    CHECK(v[3] == "a b");
}
