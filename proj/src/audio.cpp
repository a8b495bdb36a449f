#include "stepsep/audio.hpp"

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>

namespace stepsep {

// ---------------------------------------------------------------------------
// AudioBuffer

AudioBuffer::AudioBuffer(std::size_t channels, std::size_t frames, unsigned sample_rate)
    : channels_(channels), frames_(frames), sample_rate_(sample_rate),
      data_(channels * frames, 0.0) {
    if (channels == 0) throw ShapeError("AudioBuffer: channel count must be >= 1");
    if (sample_rate == 0) throw ShapeError("AudioBuffer: sample rate must be > 0");
}

AudioBuffer::AudioBuffer(const std::vector<std::vector<double>>& channels, unsigned sample_rate)
    : AudioBuffer(channels.size(), channels.empty() ? 0 : channels.front().size(), sample_rate) {
    for (std::size_t c = 0; c < channels.size(); ++c) {
        if (channels[c].size() != frames_) throw ShapeError("AudioBuffer: ragged channels");
        std::copy(channels[c].begin(), channels[c].end(), data_.begin() + c * frames_);
    }
}

std::span<double> AudioBuffer::channel(std::size_t c) {
    if (c >= channels_) throw std::out_of_range("AudioBuffer: channel index out of range");
    return {data_.data() + c * frames_, frames_};
}

std::span<const double> AudioBuffer::channel(std::size_t c) const {
    if (c >= channels_) throw std::out_of_range("AudioBuffer: channel index out of range");
    return {data_.data() + c * frames_, frames_};
}

AudioBuffer AudioBuffer::slice(std::size_t begin, std::size_t count) const {
    if (begin + count > frames_) throw std::out_of_range("AudioBuffer::slice past end");
    AudioBuffer out(channels_, count, sample_rate_);
    for (std::size_t c = 0; c < channels_; ++c) {
        auto src = channel(c).subspan(begin, count);
        std::copy(src.begin(), src.end(), out.channel(c).begin());
    }
    return out;
}

void require_same_shape(const AudioBuffer& a, const AudioBuffer& b, const char* what) {
    if (a.same_shape(b)) return;
    throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(a.channels()) + "x" +
                     std::to_string(a.frames()) + "@" + std::to_string(a.sample_rate()) + " vs " +
                     std::to_string(b.channels()) + "x" + std::to_string(b.frames()) + "@" +
                     std::to_string(b.sample_rate()) + ")");
}

AudioBuffer mix(const AudioBuffer& a, const AudioBuffer& b, double gain_a, double gain_b) {
    require_same_shape(a, b, "mix");
    AudioBuffer out = a;
    auto dst = out.samples();
    auto sb = b.samples();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = gain_a * dst[i] + gain_b * sb[i];
    return out;
}

double sum_squares(std::span<const double> x) noexcept {
    double acc = 0.0;
    for (double v : x) acc += v * v;
    return acc;
}

double mean_square(const AudioBuffer& x) noexcept {
    if (x.empty()) return 0.0;
    return sum_squares(x.samples()) / static_cast<double>(x.size());
}

double distance(const AudioBuffer& a, const AudioBuffer& b) {
    require_same_shape(a, b, "distance");
    auto sa = a.samples();
    auto sb = b.samples();
    double acc = 0.0;
    for (std::size_t i = 0; i < sa.size(); ++i) {
        const double d = sa[i] - sb[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

// ---------------------------------------------------------------------------
// WAV

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

static_assert(std::endian::native == std::endian::little, "WAV code assumes a little-endian host");

template <typename T>
T read_le(const unsigned char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

template <typename T>
void put_le(std::vector<unsigned char>& out, T v) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    out.insert(out.end(), bytes, bytes + sizeof(T));
}

void put_tag(std::vector<unsigned char>& out, const char* tag) { out.insert(out.end(), tag, tag + 4); }

[[noreturn]] void malformed(const std::filesystem::path& path, const std::string& why) {
    throw AudioIoError(AudioIoError::Kind::malformed_header, path.string() + ": " + why);
}

}  // namespace

AudioBuffer load_wav(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw AudioIoError(AudioIoError::Kind::missing_file, path.string() + ": cannot open");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
        malformed(path, "not a RIFF/WAVE file");

    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    bool have_fmt = false;
    const unsigned char* data = nullptr;
    std::size_t data_size = 0;

    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const unsigned char* chunk = bytes.data() + pos;
        const auto size = read_le<std::uint32_t>(chunk + 4);
        const std::size_t body = pos + 8;
        if (body + size > bytes.size()) {
            // Writers that crash before patching sizes leave an oversize data chunk; clamp it.
            if (std::memcmp(chunk, "data", 4) != 0) malformed(path, "chunk extends past end of file");
        }
        const std::size_t avail = std::min<std::size_t>(size, bytes.size() - body);
        if (std::memcmp(chunk, "fmt ", 4) == 0) {
            if (avail < 16) malformed(path, "fmt chunk too short");
            format = read_le<std::uint16_t>(chunk + 8);
            channels = read_le<std::uint16_t>(chunk + 10);
            rate = read_le<std::uint32_t>(chunk + 12);
            bits = read_le<std::uint16_t>(chunk + 22);
            if (format == kFormatExtensible) {
                if (avail < 26) malformed(path, "extensible fmt chunk too short");
                format = read_le<std::uint16_t>(chunk + 8 + 24);
            }
            have_fmt = true;
        } else if (std::memcmp(chunk, "data", 4) == 0) {
            data = chunk + 8;
            data_size = avail;
        }
        pos = body + avail + (avail & 1u);
    }

    if (!have_fmt) malformed(path, "missing fmt chunk");
    if (data == nullptr) malformed(path, "missing data chunk");
    if (channels == 0 || rate == 0) malformed(path, "zero channels or sample rate");

    std::size_t width = 0;
    if (format == kFormatPcm && bits == 16) width = 2;
    else if (format == kFormatFloat && bits == 32) width = 4;
    else
        throw AudioIoError(AudioIoError::Kind::unsupported_encoding,
                           path.string() + ": unsupported encoding (format " + std::to_string(format) +
                               ", " + std::to_string(bits) + " bits)");

    const std::size_t frames = data_size / (width * channels);
    AudioBuffer out(channels, frames, rate);
    for (std::size_t i = 0; i < frames; ++i) {
        for (std::size_t c = 0; c < channels; ++c) {
            const unsigned char* p = data + (i * channels + c) * width;
            out.at(c, i) = width == 2 ? static_cast<double>(read_le<std::int16_t>(p)) / 32768.0
                                      : static_cast<double>(read_le<float>(p));
        }
    }
    return out;
}

void save_wav(const AudioBuffer& buffer, const std::filesystem::path& path, WavEncoding encoding,
              const std::string& comment) {
    const std::uint16_t channels = static_cast<std::uint16_t>(buffer.channels());
    const std::uint16_t bits = encoding == WavEncoding::pcm16 ? 16 : 32;
    const std::uint16_t block = static_cast<std::uint16_t>(channels * bits / 8);
    const std::uint32_t data_size = static_cast<std::uint32_t>(buffer.frames() * block);
    // LIST chunk: "INFO" + "ICMT" + size + NUL-terminated text, padded to even length.
    const std::uint32_t comment_size = comment.empty() ? 0 : static_cast<std::uint32_t>(comment.size() + 1);
    const std::uint32_t list_size = comment.empty() ? 0 : 4 + 8 + comment_size + (comment_size & 1u);

    std::vector<unsigned char> out;
    out.reserve(44 + data_size);
    put_tag(out, "RIFF");
    put_le<std::uint32_t>(out, 36 + data_size + (data_size & 1u) + (list_size ? 8 + list_size : 0));
    put_tag(out, "WAVE");
    put_tag(out, "fmt ");
    put_le<std::uint32_t>(out, 16);
    put_le<std::uint16_t>(out, encoding == WavEncoding::pcm16 ? kFormatPcm : kFormatFloat);
    put_le<std::uint16_t>(out, channels);
    put_le<std::uint32_t>(out, buffer.sample_rate());
    put_le<std::uint32_t>(out, buffer.sample_rate() * block);
    put_le<std::uint16_t>(out, block);
    put_le<std::uint16_t>(out, bits);
    put_tag(out, "data");
    put_le<std::uint32_t>(out, data_size);

    for (std::size_t i = 0; i < buffer.frames(); ++i) {
        for (std::size_t c = 0; c < buffer.channels(); ++c) {
            const double v = buffer.at(c, i);
            if (encoding == WavEncoding::pcm16) {
                const double q = std::round(std::clamp(v, -1.0, 1.0) * 32768.0);
                put_le<std::int16_t>(out, static_cast<std::int16_t>(std::clamp(q, -32768.0, 32767.0)));
            } else {
                put_le<float>(out, static_cast<float>(v));
            }
        }
    }

    if (data_size & 1u) out.push_back(0);
    if (list_size) {
        put_tag(out, "LIST");
        put_le<std::uint32_t>(out, list_size);
        put_tag(out, "INFO");
        put_tag(out, "ICMT");
        put_le<std::uint32_t>(out, comment_size);
        out.insert(out.end(), comment.begin(), comment.end());
        out.push_back(0);
        if (comment_size & 1u) out.push_back(0);
    }

    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw AudioIoError(AudioIoError::Kind::write_failed, path.string() + ": cannot open for writing");
    file.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!file) throw AudioIoError(AudioIoError::Kind::write_failed, path.string() + ": write failed");
}

std::string read_wav_comment(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw AudioIoError(AudioIoError::Kind::missing_file, path.string() + ": cannot open");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0) malformed(path, "not a RIFF/WAVE file");
    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const auto size = std::min<std::size_t>(read_le<std::uint32_t>(bytes.data() + pos + 4), bytes.size() - pos - 8);
        if (std::memcmp(bytes.data() + pos, "LIST", 4) == 0 && size >= 4 &&
            std::memcmp(bytes.data() + pos + 8, "INFO", 4) == 0) {
            std::size_t sub = pos + 12;
            while (sub + 8 <= pos + 8 + size) {
                const auto len = std::min<std::size_t>(read_le<std::uint32_t>(bytes.data() + sub + 4), pos + 8 + size - sub - 8);
                if (std::memcmp(bytes.data() + sub, "ICMT", 4) == 0) {
                    std::string text(reinterpret_cast<const char*>(bytes.data() + sub + 8), len);
                    while (!text.empty() && text.back() == '\0') text.pop_back();
                    return text;
                }
                sub += 8 + len + (len & 1u);
            }
        }
        pos += 8 + size + (size & 1u);
    }
    return {};
}

// ---------------------------------------------------------------------------
// STFT

namespace {

struct FftwFree {
    void operator()(void* p) const noexcept { fftw_free(p); }
};

struct RealPlans {
    fftw_plan forward = nullptr;
    fftw_plan inverse = nullptr;
};

// FFTW's planner is not thread-safe; execution with the new-array API is.
// Buffers come from fftw_malloc so their alignment always matches the plan.
RealPlans plans_for(std::size_t n) {
    static std::mutex mutex;
    static std::map<std::size_t, RealPlans> cache;
    std::lock_guard lock(mutex);
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;

    std::unique_ptr<double, FftwFree> real(fftw_alloc_real(n));
    std::unique_ptr<fftw_complex, FftwFree> spec(fftw_alloc_complex(n / 2 + 1));
    const int size = static_cast<int>(n);
    RealPlans plans;
    plans.forward = fftw_plan_dft_r2c_1d(size, real.get(), spec.get(), FFTW_ESTIMATE);
    plans.inverse = fftw_plan_dft_c2r_1d(size, spec.get(), real.get(), FFTW_ESTIMATE);
    cache.emplace(n, plans);
    return plans;
}

double cola_sum(const std::vector<double>& window, std::size_t hop, std::size_t offset) {
    double s = 0.0;
    for (std::size_t n = offset; n < window.size(); n += hop) s += window[n];
    return s;
}

std::size_t leading_pad(const StftConfig& c) { return c.frame_size - c.hop_size; }

}  // namespace

std::vector<double> make_window(WindowKind kind, std::size_t size) {
    std::vector<double> w(size, 1.0);
    if (kind == WindowKind::hann) {
        // Periodic Hann: overlap-adds to exactly 1 at 50% hop.
        for (std::size_t n = 0; n < size; ++n)
            w[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(size));
    }
    return w;
}

void validate_stft_config(const StftConfig& config) {
    if (config.frame_size < 2 || !std::has_single_bit(config.frame_size))
        throw std::invalid_argument("stft: frame_size must be a power of two >= 2");
    if (config.hop_size == 0 || config.hop_size > config.frame_size)
        throw std::invalid_argument("stft: hop_size must be in [1, frame_size]");
    const auto window = make_window(config.window, config.frame_size);
    const double ref = cola_sum(window, config.hop_size, 0);
    for (std::size_t offset = 1; offset < config.hop_size; ++offset) {
        if (std::abs(cola_sum(window, config.hop_size, offset) - ref) > 1e-9 * std::max(1.0, ref))
            throw std::invalid_argument("stft: window/hop combination does not satisfy constant overlap-add");
    }
    if (ref <= 0.0) throw std::invalid_argument("stft: window overlap-add sums to zero");
}

Spectrogram stft(const AudioBuffer& buffer, const StftConfig& config) {
    validate_stft_config(config);
    const std::size_t n = config.frame_size;
    const std::size_t hop = config.hop_size;
    const std::size_t pad = leading_pad(config);

    Spectrogram spec;
    spec.config = config;
    spec.channels = buffer.channels();
    spec.bins = n / 2 + 1;
    spec.signal_length = buffer.frames();
    spec.sample_rate = buffer.sample_rate();
    spec.frames = buffer.frames() == 0 ? 0 : (pad + buffer.frames() + hop - 1) / hop;
    spec.data.assign(spec.channels * spec.frames * spec.bins, {});
    if (spec.frames == 0) return spec;

    const auto window = make_window(config.window, n);
    const auto plans = plans_for(n);
    std::unique_ptr<double, FftwFree> frame(fftw_alloc_real(n));
    std::unique_ptr<fftw_complex, FftwFree> out(fftw_alloc_complex(spec.bins));

    for (std::size_t c = 0; c < spec.channels; ++c) {
        auto x = buffer.channel(c);
        for (std::size_t f = 0; f < spec.frames; ++f) {
            // Frame f covers padded positions [f*hop, f*hop + n); original index = padded - pad.
            for (std::size_t j = 0; j < n; ++j) {
                const std::size_t padded = f * hop + j;
                const bool inside = padded >= pad && padded - pad < x.size();
                frame.get()[j] = inside ? x[padded - pad] * window[j] : 0.0;
            }
            fftw_execute_dft_r2c(plans.forward, frame.get(), out.get());
            for (std::size_t k = 0; k < spec.bins; ++k) spec.at(c, f, k) = {out.get()[k][0], out.get()[k][1]};
        }
    }
    return spec;
}

AudioBuffer istft(const Spectrogram& spec) {
    validate_stft_config(spec.config);
    if (spec.channels == 0) throw std::invalid_argument("istft: spectrogram has no channels");
    if (spec.sample_rate == 0) throw std::invalid_argument("istft: spectrogram has no sample rate");
    AudioBuffer out(spec.channels, spec.signal_length, spec.sample_rate);
    if (spec.frames == 0 || spec.signal_length == 0) return out;

    const std::size_t n = spec.config.frame_size;
    const std::size_t hop = spec.config.hop_size;
    const std::size_t pad = leading_pad(spec.config);
    const double gain = cola_sum(make_window(spec.config.window, n), hop, 0) * static_cast<double>(n);

    const auto plans = plans_for(n);
    std::unique_ptr<double, FftwFree> frame(fftw_alloc_real(n));
    std::unique_ptr<fftw_complex, FftwFree> in(fftw_alloc_complex(spec.bins));

    for (std::size_t c = 0; c < spec.channels; ++c) {
        auto y = out.channel(c);
        for (std::size_t f = 0; f < spec.frames; ++f) {
            for (std::size_t k = 0; k < spec.bins; ++k) {
                in.get()[k][0] = spec.at(c, f, k).real();
                in.get()[k][1] = spec.at(c, f, k).imag();
            }
            fftw_execute_dft_c2r(plans.inverse, in.get(), frame.get());
            for (std::size_t j = 0; j < n; ++j) {
                const std::size_t padded = f * hop + j;
                if (padded >= pad && padded - pad < y.size()) y[padded - pad] += frame.get()[j] / gain;
            }
        }
    }
    return out;
}

}  // namespace stepsep
