#pragma once

#include <complex>
#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace stepsep {

/// Raised when two buffers (or a buffer and a model parameter) disagree in
/// channel count, length, or sample rate. Never broadcast implicitly.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Multichannel sampled signal, channel-major, 64-bit samples.
///
/// All channels share one length. A zero-length buffer is valid.
class AudioBuffer {
public:
    AudioBuffer() = default;
    AudioBuffer(std::size_t channels, std::size_t frames, unsigned sample_rate);
    /// Builds from per-channel vectors; throws ShapeError on ragged input.
    AudioBuffer(const std::vector<std::vector<double>>& channels, unsigned sample_rate);

    std::size_t channels() const noexcept { return channels_; }
    std::size_t frames() const noexcept { return frames_; }
    std::size_t size() const noexcept { return data_.size(); }
    unsigned sample_rate() const noexcept { return sample_rate_; }
    bool empty() const noexcept { return data_.empty(); }

    std::span<double> channel(std::size_t c);
    std::span<const double> channel(std::size_t c) const;

    /// All samples, channel-major (channel 0 first).
    std::span<double> samples() noexcept { return data_; }
    std::span<const double> samples() const noexcept { return data_; }

    double& at(std::size_t c, std::size_t i) { return data_[c * frames_ + i]; }
    double at(std::size_t c, std::size_t i) const { return data_[c * frames_ + i]; }

    bool same_shape(const AudioBuffer& other) const noexcept {
        return channels_ == other.channels_ && frames_ == other.frames_ &&
               sample_rate_ == other.sample_rate_;
    }

    /// Copy of frames [begin, begin + count) on every channel.
    AudioBuffer slice(std::size_t begin, std::size_t count) const;

    friend bool operator==(const AudioBuffer&, const AudioBuffer&) = default;

private:
    std::size_t channels_ = 1;
    std::size_t frames_ = 0;
    unsigned sample_rate_ = 16000;
    std::vector<double> data_;
};

/// Throws ShapeError naming `what` unless a and b have identical shape and rate.
void require_same_shape(const AudioBuffer& a, const AudioBuffer& b, const char* what);

/// Elementwise gain_a * a + gain_b * b.
AudioBuffer mix(const AudioBuffer& a, const AudioBuffer& b, double gain_a, double gain_b);

double sum_squares(std::span<const double> x) noexcept;
double mean_square(const AudioBuffer& x) noexcept;
/// Euclidean norm of a - b over every sample.
double distance(const AudioBuffer& a, const AudioBuffer& b);

// ---------------------------------------------------------------------------
// WAV persistence

enum class WavEncoding { pcm16, float32 };

class AudioIoError : public std::runtime_error {
public:
    enum class Kind { missing_file, malformed_header, unsupported_encoding, write_failed };

    AudioIoError(Kind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

AudioBuffer load_wav(const std::filesystem::path& path);
/// Writes a canonical RIFF file. A non-empty comment is stored in a LIST/INFO
/// ICMT chunk after the samples; readers that ignore metadata are unaffected.
void save_wav(const AudioBuffer& buffer, const std::filesystem::path& path,
              WavEncoding encoding = WavEncoding::float32, const std::string& comment = {});
/// Contents of the ICMT comment chunk, or empty.
std::string read_wav_comment(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Short-time Fourier transform

enum class WindowKind { hann, rectangular };

struct StftConfig {
    std::size_t frame_size = 1024;
    std::size_t hop_size = 512;
    WindowKind window = WindowKind::hann;
};

/// Complex STFT frames, one bank per channel. Keeps enough bookkeeping
/// (original length, rate) for istft to restore the exact input shape.
struct Spectrogram {
    StftConfig config;
    std::size_t channels = 0;
    std::size_t frames = 0;
    std::size_t bins = 0;  // frame_size / 2 + 1
    std::size_t signal_length = 0;
    unsigned sample_rate = 0;
    std::vector<std::complex<double>> data;  // [channel][frame][bin]

    std::complex<double>& at(std::size_t c, std::size_t f, std::size_t k) {
        return data[(c * frames + f) * bins + k];
    }
    const std::complex<double>& at(std::size_t c, std::size_t f, std::size_t k) const {
        return data[(c * frames + f) * bins + k];
    }
};

std::vector<double> make_window(WindowKind kind, std::size_t size);

/// Throws std::invalid_argument unless frame_size is a power of two,
/// hop_size <= frame_size and the window overlap-adds to a constant.
void validate_stft_config(const StftConfig& config);

Spectrogram stft(const AudioBuffer& buffer, const StftConfig& config = {});
AudioBuffer istft(const Spectrogram& spec);

}  // namespace stepsep
