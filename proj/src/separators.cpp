#include "stepsep/separators.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "stepsep/subprocess.hpp"

namespace stepsep {

namespace {

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::map<std::string, std::string> stft_parameters(const StftConfig& c) {
    return {{"frame_size", std::to_string(c.frame_size)},
            {"hop_size", std::to_string(c.hop_size)},
            {"window", c.window == WindowKind::hann ? "hann" : "rectangular"}};
}

class IdentityModel final : public SeparationModel {
public:
    AudioBuffer evaluate(const AudioBuffer& input) const override { return input; }
    ModelDescriptor descriptor() const override { return {"identity", {}}; }
};

class ContractionModel final : public SeparationModel {
public:
    explicit ContractionModel(ContractionModelParams params) : params_(std::move(params)) {
        if (!(params_.alpha >= 0.0 && params_.alpha < 1.0))
            throw std::invalid_argument("contraction_model: alpha must be in [0, 1)");
    }

    AudioBuffer evaluate(const AudioBuffer& input) const override {
        require_same_shape(params_.target, input, "contraction_model");
        // p + alpha (x - p), written so alpha = 0 returns p bit-exactly.
        AudioBuffer out = input;
        auto x = out.samples();
        auto p = params_.target.samples();
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = p[i] + params_.alpha * (x[i] - p[i]);
        return out;
    }

    ModelDescriptor descriptor() const override {
        return {"contraction", {{"alpha", format_double(params_.alpha)}}};
    }

private:
    ContractionModelParams params_;
};

NoiseProfile profile_from_frames(const Spectrogram& spec, const std::vector<std::vector<std::size_t>>& frames) {
    NoiseProfile profile;
    profile.stft = spec.config;
    profile.channels = spec.channels;
    profile.magnitude.assign(spec.channels * spec.bins, 0.0);
    for (std::size_t c = 0; c < spec.channels; ++c) {
        if (frames[c].empty()) continue;
        for (std::size_t f : frames[c])
            for (std::size_t k = 0; k < spec.bins; ++k) profile.magnitude[c * spec.bins + k] += std::abs(spec.at(c, f, k));
        for (std::size_t k = 0; k < spec.bins; ++k)
            profile.magnitude[c * spec.bins + k] /= static_cast<double>(frames[c].size());
    }
    return profile;
}

AudioBuffer apply_gate(const AudioBuffer& input, const NoiseProfile& profile, double over_subtraction) {
    if (profile.channels != input.channels())
        throw ShapeError("spectral_gate_model: noise profile has " + std::to_string(profile.channels) +
                         " channels, input has " + std::to_string(input.channels()));
    Spectrogram spec = stft(input, profile.stft);
    for (std::size_t c = 0; c < spec.channels; ++c) {
        for (std::size_t f = 0; f < spec.frames; ++f) {
            for (std::size_t k = 0; k < spec.bins; ++k) {
                auto& bin = spec.at(c, f, k);
                const double mag = std::abs(bin);
                const double gain = mag > 0.0 ? std::max(0.0, 1.0 - over_subtraction * profile.at(c, k) / mag) : 0.0;
                bin *= gain;
            }
        }
    }
    return istft(spec);
}

class SpectralGateModel final : public SeparationModel {
public:
    SpectralGateModel(NoiseProfile profile, double over_subtraction)
        : profile_(std::move(profile)), over_subtraction_(over_subtraction) {
        if (!(over_subtraction >= 1.0)) throw std::invalid_argument("spectral_gate_model: over_subtraction must be >= 1");
        validate_stft_config(profile_.stft);
    }

    AudioBuffer evaluate(const AudioBuffer& input) const override {
        return apply_gate(input, profile_, over_subtraction_);
    }

    ModelDescriptor descriptor() const override {
        auto params = stft_parameters(profile_.stft);
        params["over_subtraction"] = format_double(over_subtraction_);
        params["profile"] = "fixed";
        return {"spectral_gate", params};
    }

private:
    NoiseProfile profile_;
    double over_subtraction_;
};

class AdaptiveSpectralGateModel final : public SeparationModel {
public:
    AdaptiveSpectralGateModel(double over_subtraction, double quiet_fraction, StftConfig stft)
        : over_subtraction_(over_subtraction), quiet_fraction_(quiet_fraction), stft_(stft) {
        if (!(over_subtraction >= 1.0)) throw std::invalid_argument("spectral_gate_model: over_subtraction must be >= 1");
        validate_stft_config(stft_);
    }

    AudioBuffer evaluate(const AudioBuffer& input) const override {
        return apply_gate(input, estimate_noise_profile_from_quietest(input, quiet_fraction_, stft_), over_subtraction_);
    }

    ModelDescriptor descriptor() const override {
        auto params = stft_parameters(stft_);
        params["over_subtraction"] = format_double(over_subtraction_);
        params["profile"] = "quietest";
        params["quiet_fraction"] = format_double(quiet_fraction_);
        return {"spectral_gate", params};
    }

private:
    double over_subtraction_;
    double quiet_fraction_;
    StftConfig stft_;
};

constexpr double kIrmDelta = 1e-10;

class OracleIrmModel final : public SeparationModel {
public:
    OracleIrmModel(AudioBuffer reference, StftConfig stft)
        : reference_(std::move(reference)), reference_spec_(stepsep::stft(reference_, stft)) {}

    AudioBuffer evaluate(const AudioBuffer& input) const override {
        require_same_shape(reference_, input, "oracle_irm_model");
        Spectrogram spec = stft(input, reference_spec_.config);
        for (std::size_t i = 0; i < spec.data.size(); ++i) {
            const auto p = reference_spec_.data[i];
            const double clean = std::abs(p);
            const double residual = std::abs(spec.data[i] - p);
            spec.data[i] *= clean / (clean + residual + kIrmDelta);
        }
        return istft(spec);
    }

    ModelDescriptor descriptor() const override { return {"oracle_irm", stft_parameters(reference_spec_.config)}; }

private:
    AudioBuffer reference_;
    Spectrogram reference_spec_;
};

class ExternalModel final : public SeparationModel {
public:
    ExternalModel(std::vector<std::string> argv, ExternalModelOptions options)
        : options_(options), pool_(std::move(argv), options.max_children) {
        if (pool_.argv().empty()) throw std::invalid_argument("external_model: empty command");
    }

    AudioBuffer evaluate(const AudioBuffer& input) const override {
        auto child = pool_.lease();
        const auto deadline = std::chrono::steady_clock::now() + options_.timeout;

        const nlohmann::json header = {{"sample_rate", input.sample_rate()},
                                       {"channels", input.channels()},
                                       {"num_samples", input.frames()}};
        const std::string line = header.dump() + "\n";
        child->write_all({reinterpret_cast<const unsigned char*>(line.data()), line.size()}, deadline);
        child->write_all(encode_interleaved_f32(input), deadline);

        const std::string reply = child->read_line(deadline);
        WireHeader got;
        try {
            const auto j = nlohmann::json::parse(reply);
            got.sample_rate = j.at("sample_rate").get<unsigned>();
            got.channels = j.at("channels").get<std::size_t>();
            got.num_samples = j.at("num_samples").get<std::size_t>();
        } catch (const std::exception& e) {
            throw ExternalProcessError(ExternalProcessError::Kind::malformed_reply,
                                       child->command() + ": bad reply header '" + reply + "': " + e.what());
        }
        if (got.sample_rate != input.sample_rate() || got.channels != input.channels() ||
            got.num_samples != input.frames())
            throw ExternalProcessError(ExternalProcessError::Kind::malformed_reply,
                                       child->command() + ": reply shape differs from request: " + reply);
        auto payload = child->read_exact(got.channels * got.num_samples * sizeof(float), deadline);
        return decode_interleaved_f32(payload, got);
    }

    ModelDescriptor descriptor() const override {
        std::string cmd;
        for (const auto& a : pool_.argv()) cmd += (cmd.empty() ? "" : " ") + a;
        return {"external",
                {{"command", cmd},
                 {"timeout_ms", std::to_string(options_.timeout.count())},
                 {"max_children", std::to_string(options_.max_children)}}};
    }

    bool parallel_safe() const override { return pool_.max_children() > 1; }

private:
    ExternalModelOptions options_;
    mutable ProcessPool pool_;
};

}  // namespace

ModelPtr identity_model() { return std::make_shared<IdentityModel>(); }

ModelPtr contraction_model(ContractionModelParams params) {
    return std::make_shared<ContractionModel>(std::move(params));
}

NoiseProfile estimate_noise_profile(const AudioBuffer& noise, const StftConfig& config) {
    const Spectrogram spec = stft(noise, config);
    std::vector<std::size_t> all(spec.frames);
    std::iota(all.begin(), all.end(), std::size_t{0});
    return profile_from_frames(spec, std::vector(spec.channels, all));
}

NoiseProfile estimate_noise_profile_from_quietest(const AudioBuffer& signal, double fraction, const StftConfig& config) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("quiet fraction must be in (0, 1]");
    const Spectrogram spec = stft(signal, config);
    std::vector<std::vector<std::size_t>> chosen(spec.channels);
    for (std::size_t c = 0; c < spec.channels; ++c) {
        std::vector<std::pair<double, std::size_t>> energy(spec.frames);
        for (std::size_t f = 0; f < spec.frames; ++f) {
            double e = 0.0;
            for (std::size_t k = 0; k < spec.bins; ++k) e += std::norm(spec.at(c, f, k));
            energy[f] = {e, f};
        }
        std::sort(energy.begin(), energy.end());
        const auto keep = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * spec.frames)));
        for (std::size_t i = 0; i < std::min(keep, energy.size()); ++i) chosen[c].push_back(energy[i].second);
    }
    return profile_from_frames(spec, chosen);
}

ModelPtr spectral_gate_model(NoiseProfile profile, double over_subtraction) {
    return std::make_shared<SpectralGateModel>(std::move(profile), over_subtraction);
}

ModelPtr adaptive_spectral_gate_model(double over_subtraction, double quiet_fraction, const StftConfig& stft) {
    return std::make_shared<AdaptiveSpectralGateModel>(over_subtraction, quiet_fraction, stft);
}

ModelPtr oracle_irm_model(AudioBuffer reference, const StftConfig& stft) {
    return std::make_shared<OracleIrmModel>(std::move(reference), stft);
}

ModelPtr external_model(std::vector<std::string> argv, ExternalModelOptions options) {
    return std::make_shared<ExternalModel>(std::move(argv), options);
}

}  // namespace stepsep
