#pragma once

// Correlating overlap trajectories with downstream zero-shot transfer
// metrics. Two modes:
//   average   overlap averaged over language pairs vs the metric averaged
//             over target languages, one point per checkpoint;
//   pairwise  pivot-target overlap vs that target's metric, pooled over
//             all targets and checkpoints into a single scatter.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "xlprobe/overlap.hpp"

namespace xlprobe {

struct PearsonResult {
  double r = 0.0;
  /// Two-sided, from t = r sqrt((n-2)/(1-r^2)) with n-2 degrees of freedom.
  double p = 1.0;
  std::size_t n = 0;
};

/// Throws InvalidInput on length mismatch, n < 3, or a constant series.
PearsonResult pearson(std::span<const double> x, std::span<const double> y);

enum class Band { none, significant, high };

/// p < 0.001 -> high, p < 0.05 -> significant, otherwise none.
Band significance_band(double p);
std::string_view to_string(Band band) noexcept;

struct MetricSeries {
  std::string model_tag;
  std::string task;
  std::string target_language;
  std::string metric_name;
  /// Strictly increasing steps, finite values.
  std::vector<std::pair<std::int64_t, double>> points;
};

/// Input columns: model_tag, task, target_language, checkpoint_step,
/// metric_name, value. Rows are grouped into one series per
/// (model_tag, task, target_language, metric_name).
std::vector<MetricSeries> load_metrics_csv(const std::filesystem::path& path);

enum class CorrelationMode { average, pairwise };
std::string_view to_string(CorrelationMode mode) noexcept;

struct ScatterPoint {
  /// Target language; empty in average mode.
  std::string language;
  std::int64_t checkpoint_step = 0;
  double overlap = 0.0;
  double metric = 0.0;
};

struct LanguageCorrelation {
  std::string language;
  std::size_t n = 0;
  /// Unset when the language alone has too few points or no variance.
  std::optional<PearsonResult> result;
};

struct CorrelationReport {
  CorrelationMode mode = CorrelationMode::average;
  std::string task;
  std::string model_tag;
  std::string metric_name;
  double r = 0.0;
  double p = 1.0;
  std::size_t n = 0;
  Band band = Band::none;
  /// Steps present on only one side of the join.
  std::vector<std::int64_t> dropped_steps;
  std::vector<ScatterPoint> points;
  /// Pairwise mode only.
  std::vector<LanguageCorrelation> per_language;
};

struct JoinedPoints {
  std::vector<ScatterPoint> points;
  /// Steps present on only one side of the join, ascending.
  std::vector<std::int64_t> dropped_steps;
};

/// Inner join on checkpoint_step, no interpolation. The metric at a step is
/// the mean over the target languages that report that step. All series
/// must share task and model_tag.
JoinedPoints join_average(const OverlapSeries& overlap, std::span<const MetricSeries> metrics);

/// `overlap_by_target` maps each target language to its pivot-target
/// overlap series. Targets without an overlap series are skipped.
JoinedPoints join_pairwise(const std::map<std::string, OverlapSeries>& overlap_by_target,
                           std::span<const MetricSeries> metrics);

/// Pearson over join_average. Fewer than 3 joined points is InvalidInput.
CorrelationReport correlate_average(const OverlapSeries& overlap,
                                    std::span<const MetricSeries> metrics);

/// Pearson over the pooled join_pairwise scatter, plus one coefficient per
/// target language.
CorrelationReport correlate_pairwise(const std::map<std::string, OverlapSeries>& overlap_by_target,
                                     std::span<const MetricSeries> metrics);

/// "0.940 (p=0.005)": r to 3 decimals, p to 3 decimals, or in scientific
/// notation below 0.001.
std::string format_cell(double r, double p);

/// Table layout: one row per model_tag; per (task, mode) the columns
/// <task>_<mode>_{r,p,n,band,cell}.
void write_correlation_table(std::ostream& out, std::span<const CorrelationReport> reports);
void write_correlation_json(const std::filesystem::path& path,
                            std::span<const CorrelationReport> reports);

}  // namespace xlprobe
