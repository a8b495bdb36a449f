#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "stepsep/problem.hpp"
#include "stepsep/separators.hpp"

namespace stepsep::cli {

/// Entry point shared by the stepsep executable and the tests.
/// Returns the process exit status; never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Default configuration for a subcommand. Its keys are the only keys a
/// --config file may contain.
nlohmann::json defaults(const std::string& subcommand);

/// Overlays `overrides` on `base`, rejecting keys that `base` does not have.
nlohmann::json merge_config(nlohmann::json base, const nlohmann::json& overrides, const std::string& where);

/// Builds a separator by name for one problem. `args` is a JSON object of
/// string or numeric values (the --model-arg pairs).
ModelPtr make_model(const std::string& name, const nlohmann::json& args, const MixtureProblem& problem);

/// A single mixture file (with optional reference/noise files), a directory
/// with manifest.json, or a directory of subdirectories holding mixture.wav.
std::vector<MixtureProblem> load_problems(const std::filesystem::path& input, const std::string& reference,
                                          const std::string& noise);

/// Writes via a temporary file and rename so readers never see partial output.
void write_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace stepsep::cli
