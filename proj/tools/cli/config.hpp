#pragma once

// Run configuration: defaults, overridden by a key-value config file,
// overridden by command-line flags.
//
// Config file syntax, one setting per line:
//   # comment
//   key = value
//   list_key = a, b, c

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xlprobe/dataset.hpp"
#include "xlprobe/probe.hpp"

namespace xlprobe::cli {

/// Environment variable naming the config file used when --config is absent.
inline constexpr const char* kConfigEnvVar = "XLPROBE_CONFIG";

struct RunConfig {
  std::vector<std::filesystem::path> bundle_roots;
  /// Empty selects every language found under the bundle roots.
  std::vector<std::string> languages;
  std::vector<std::string> categories = {"Number", "Gender", "POS"};
  std::vector<int> layers = {13, 17};
  std::size_t k = 50;
  TrainConfig train;
  double alpha = 0.05;
  bool bonferroni = false;
  std::size_t threshold = kDefaultLemmaThreshold;
  SplitRatios ratios;
  std::filesystem::path out = "xlprobe-out";
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::string pivot = "eng";
  std::string model_tag;
  std::optional<std::filesystem::path> metrics;
  int heatmap_layer = 17;
  std::optional<std::int64_t> heatmap_step;
};

/// One optional per overridable setting; set fields win over the file.
struct Overrides {
  std::optional<std::vector<std::string>> bundle_roots;
  std::optional<std::vector<std::string>> languages;
  std::optional<std::vector<std::string>> categories;
  std::optional<std::vector<int>> layers;
  std::optional<std::size_t> k;
  std::optional<double> learning_rate;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<std::size_t> masks_per_example;
  std::optional<double> inclusion_prob;
  std::optional<std::size_t> patience;
  std::optional<double> alpha;
  std::optional<bool> bonferroni;
  std::optional<std::size_t> threshold;
  std::optional<std::vector<double>> ratios;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::optional<std::string> pivot;
  std::optional<std::string> model_tag;
  std::optional<std::string> metrics;
  std::optional<int> heatmap_layer;
  std::optional<std::int64_t> heatmap_step;
};

/// Applies `key = value` lines. Unknown keys and malformed values throw
/// InvalidInput naming the file and line.
void apply_config_text(RunConfig& config, std::string_view text, std::string_view origin);
void apply_config_file(RunConfig& config, const std::filesystem::path& path);
void apply_overrides(RunConfig& config, const Overrides& overrides);

/// Defaults, then the config file (explicit path, else $XLPROBE_CONFIG when
/// set), then the overrides. Validates the result.
RunConfig resolve_config(const std::optional<std::filesystem::path>& config_path,
                         const Overrides& overrides);

void validate(const RunConfig& config);

/// The effective configuration in config-file syntax; feeding it back
/// through apply_config_text reproduces the same values.
std::string describe(const RunConfig& config);

}  // namespace xlprobe::cli
