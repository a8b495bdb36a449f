#include <cstdint>
#include <fstream>

#include "doctest.h"
#include "oracles.hpp"
#include "stepsep/audio.hpp"

using namespace stepsep;

TEST_CASE("buffers keep channel-major layout and reject ragged input") {
    AudioBuffer b({{1.0, 2.0, 3.0}, {4.0, 5.0, 6.0}}, 8000);
    CHECK(b.channels() == 2);
    CHECK(b.frames() == 3);
    CHECK(b.at(1, 0) == 4.0);
    CHECK(b.channel(0)[2] == 3.0);
    CHECK_THROWS_AS(AudioBuffer({{1.0, 2.0}, {3.0}}, 8000), ShapeError);

    const AudioBuffer s = b.slice(1, 2);
    CHECK(s.frames() == 2);
    CHECK(s.at(0, 0) == 2.0);
    CHECK(s.at(1, 1) == 6.0);
}

TEST_CASE("mix refuses to broadcast") {
    const AudioBuffer a(1, 10, 16000);
    CHECK_THROWS_AS(mix(a, AudioBuffer(2, 10, 16000), 1, 1), ShapeError);
    CHECK_THROWS_AS(mix(a, AudioBuffer(1, 11, 16000), 1, 1), ShapeError);
    CHECK_THROWS_AS(mix(a, AudioBuffer(1, 10, 8000), 1, 1), ShapeError);

    const auto x = oracle::random_buffer(1, 2, 50);
    const auto y = oracle::random_buffer(2, 2, 50);
    const auto m = mix(x, y, 0.25, -2.0);
    for (std::size_t i = 0; i < m.size(); ++i)
        CHECK(m.samples()[i] == doctest::Approx(0.25 * x.samples()[i] - 2.0 * y.samples()[i]).epsilon(1e-15));
}

TEST_CASE("float32 wav round trip is exact for float-representable samples") {
    oracle::TempDir dir("wav");
    auto b = oracle::random_buffer(3, 2, 777, 22050);
    for (double& v : b.samples()) v = static_cast<float>(v);
    save_wav(b, dir / "x.wav", WavEncoding::float32, "{\"steps\":3}");
    const auto back = load_wav(dir / "x.wav");
    CHECK(back == b);
    CHECK(read_wav_comment(dir / "x.wav") == "{\"steps\":3}");
}

TEST_CASE("pcm16 wav round trip quantizes to 1/32768") {
    oracle::TempDir dir("pcm");
    const auto b = oracle::random_buffer(4, 1, 500);
    save_wav(b, dir / "x.wav", WavEncoding::pcm16);
    const auto back = load_wav(dir / "x.wav");
    CHECK(back.same_shape(b));
    CHECK(oracle::max_abs_diff(back, b) <= 0.5 / 32768.0 + 1e-12);
    CHECK(read_wav_comment(dir / "x.wav").empty());
}

TEST_CASE("stereo pcm16 samples are interleaved on disk") {
    oracle::TempDir dir("interleave");
    const AudioBuffer b({{0.5, 0.25}, {-0.5, -0.25}}, 8000);
    save_wav(b, dir / "s.wav", WavEncoding::pcm16);
    std::ifstream in(dir / "s.wav", std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), {});
    REQUIRE(bytes.size() >= 44 + 8);
    auto sample = [&](std::size_t i) {
        return static_cast<std::int16_t>(static_cast<std::uint8_t>(bytes[44 + 2 * i]) |
                                         (static_cast<std::uint8_t>(bytes[45 + 2 * i]) << 8));
    };
    CHECK(sample(0) == 16384);
    CHECK(sample(1) == -16384);
    CHECK(sample(2) == 8192);
    CHECK(sample(3) == -8192);
}

TEST_CASE("wav loading errors are distinguishable") {
    oracle::TempDir dir("err");
    try {
        load_wav(dir / "missing.wav");
        FAIL("expected an error");
    } catch (const AudioIoError& e) {
        CHECK(e.kind() == AudioIoError::Kind::missing_file);
    }

    {
        std::ofstream(dir / "junk.wav", std::ios::binary) << "definitely not a riff file";
    }
    try {
        load_wav(dir / "junk.wav");
        FAIL("expected an error");
    } catch (const AudioIoError& e) {
        CHECK(e.kind() == AudioIoError::Kind::malformed_header);
    }

    // 24-bit PCM header with one frame of data.
    {
        std::ofstream f(dir / "pcm24.wav", std::ios::binary);
        auto u32 = [&](std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
        auto u16 = [&](std::uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); };
        f.write("RIFF", 4);
        u32(36 + 3);
        f.write("WAVEfmt ", 8);
        u32(16);
        u16(1);
        u16(1);
        u32(8000);
        u32(8000 * 3);
        u16(3);
        u16(24);
        f.write("data", 4);
        u32(3);
        f.write("\0\0\0", 3);
    }
    try {
        load_wav(dir / "pcm24.wav");
        FAIL("expected an error");
    } catch (const AudioIoError& e) {
        CHECK(e.kind() == AudioIoError::Kind::unsupported_encoding);
    }
}

TEST_CASE("stft frames match a direct DFT of the padded, windowed signal") {
    const StftConfig cfg{64, 16, WindowKind::hann};
    const auto x = oracle::random_buffer(5, 1, 300);
    const auto spec = stft(x, cfg);
    const std::size_t pad = cfg.frame_size - cfg.hop_size;
    CHECK(spec.frames == (pad + x.frames() + cfg.hop_size - 1) / cfg.hop_size);
    CHECK(spec.bins == 33);

    std::vector<double> window(64);
    for (std::size_t n = 0; n < 64; ++n) window[n] = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * n / 64.0);
    for (std::size_t f : {std::size_t{0}, std::size_t{3}, spec.frames - 1}) {
        std::vector<double> frame(64, 0.0);
        for (std::size_t j = 0; j < 64; ++j) {
            const long idx = static_cast<long>(f * 16 + j) - static_cast<long>(pad);
            if (idx >= 0 && idx < static_cast<long>(x.frames())) frame[j] = x.at(0, idx) * window[j];
        }
        const auto ref = oracle::dft_frame(frame);
        for (std::size_t k = 0; k < spec.bins; ++k) CHECK(std::abs(spec.at(0, f, k) - ref[k]) < 1e-12);
    }
}

TEST_CASE("istft inverts stft to round-off for several configurations") {
    for (const StftConfig cfg : {StftConfig{1024, 512, WindowKind::hann}, StftConfig{256, 64, WindowKind::hann},
                                 StftConfig{32, 32, WindowKind::rectangular}, StftConfig{64, 16, WindowKind::rectangular}}) {
        for (std::size_t len : {1u, 31u, 1000u, 4097u}) {
            const auto x = oracle::random_buffer(len, 2, len);
            const auto y = istft(stft(x, cfg));
            REQUIRE(y.same_shape(x));
            CHECK(oracle::max_abs_diff(x, y) < 1e-12);
        }
    }
}

TEST_CASE("stft configuration is validated") {
    CHECK_THROWS_AS(validate_stft_config({1000, 500, WindowKind::hann}), std::invalid_argument);
    CHECK_THROWS_AS(validate_stft_config({1024, 2048, WindowKind::hann}), std::invalid_argument);
    CHECK_THROWS_AS(validate_stft_config({1024, 0, WindowKind::hann}), std::invalid_argument);
    CHECK_THROWS_AS(validate_stft_config({1024, 768, WindowKind::hann}), std::invalid_argument);
    CHECK_NOTHROW(validate_stft_config({1024, 256, WindowKind::hann}));
}

TEST_CASE("empty buffers survive the stft round trip") {
    const AudioBuffer empty(1, 0, 16000);
    const auto spec = stft(empty);
    CHECK(spec.frames == 0);
    CHECK(istft(spec).frames() == 0);
}
