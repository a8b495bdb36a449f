#pragma once

#include <optional>
#include <string>

#include "stepsep/audio.hpp"

namespace stepsep {

/// A mixture plus whatever references exist for it. The unit of refinement
/// and evaluation.
struct MixtureProblem {
    AudioBuffer mixture;
    std::optional<AudioBuffer> reference;
    std::optional<AudioBuffer> noise;
    std::string label;

    /// Throws ShapeError if a present reference or noise differs from the mixture's shape.
    void validate() const {
        if (reference) require_same_shape(mixture, *reference, "MixtureProblem reference");
        if (noise) require_same_shape(mixture, *noise, "MixtureProblem noise");
    }
};

}  // namespace stepsep
