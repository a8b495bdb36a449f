#pragma once

#include <chrono>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "stepsep/audio.hpp"

namespace stepsep {

struct ModelDescriptor {
    std::string name;
    std::map<std::string, std::string> parameters;
};

/// A one-step separator: maps a mixture to an estimate of the same shape.
/// Implementations must be deterministic for identical input.
class SeparationModel {
public:
    virtual ~SeparationModel() = default;

    virtual AudioBuffer evaluate(const AudioBuffer& input) const = 0;
    virtual ModelDescriptor descriptor() const = 0;
    /// Whether evaluate may be called from several threads at once.
    virtual bool parallel_safe() const { return true; }
};

using ModelPtr = std::shared_ptr<const SeparationModel>;

/// f(x) = x
ModelPtr identity_model();

struct ContractionModelParams {
    AudioBuffer target;
    double alpha = 0.5;
};

/// f(x) = p + alpha (x - p). Lipschitz constant is exactly alpha.
ModelPtr contraction_model(ContractionModelParams params);

/// Per-channel, per-bin mean noise magnitude.
struct NoiseProfile {
    StftConfig stft;
    std::size_t channels = 0;
    std::vector<double> magnitude;  // [channel][bin]

    double at(std::size_t c, std::size_t k) const { return magnitude[c * (stft.frame_size / 2 + 1) + k]; }
};

/// Mean STFT magnitude of a noise-only excerpt.
NoiseProfile estimate_noise_profile(const AudioBuffer& noise, const StftConfig& stft = {});
/// Mean STFT magnitude of the quietest `fraction` of frames (by energy) of a signal.
NoiseProfile estimate_noise_profile_from_quietest(const AudioBuffer& signal, double fraction = 0.1,
                                                  const StftConfig& stft = {});

/// Magnitude spectral subtraction: gain max(0, 1 - over_subtraction * N(f) / |X(f)|).
ModelPtr spectral_gate_model(NoiseProfile profile, double over_subtraction = 1.0);

/// Same gate, but the profile is re-estimated from each input's quietest frames.
ModelPtr adaptive_spectral_gate_model(double over_subtraction = 1.0, double quiet_fraction = 0.1,
                                      const StftConfig& stft = {});

/// Ideal-ratio-mask separator: mask |P| / (|P| + |X - P| + 1e-10).
ModelPtr oracle_irm_model(AudioBuffer reference, const StftConfig& stft = {});

struct ExternalModelOptions {
    std::chrono::milliseconds timeout = std::chrono::seconds(120);
    /// More than one child makes the model parallel-safe (one request in flight per child).
    std::size_t max_children = 1;
};

/// Round-trips audio through a persistent child process speaking the model wire contract.
ModelPtr external_model(std::vector<std::string> argv, ExternalModelOptions options = {});

}  // namespace stepsep
