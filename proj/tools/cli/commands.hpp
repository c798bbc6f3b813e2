#pragma once

// The pipeline stages behind each subcommand. Every function throws
// xlprobe::InvalidInput (or a subclass) for bad inputs; the front end maps
// exceptions to exit codes.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "config.hpp"
#include "xlprobe/analysis.hpp"
#include "xlprobe/dataset.hpp"
#include "xlprobe/overlap.hpp"
#include "xlprobe/probe.hpp"

namespace xlprobe::cli {

namespace fs = std::filesystem;

/// Lemma-disjoint split then frequency filter. Returns the record count kept.
std::size_t prepare_bundle(const fs::path& in, const fs::path& out, const SplitRatios& ratios,
                           std::size_t threshold, std::uint64_t seed);

/// Requires every record to carry a split.
LinearProbe train_bundle(const fs::path& bundle, const fs::path& probe_dir,
                         const TrainConfig& config);

/// Greedy selection on the dev split. `probe_file` is stored verbatim in the
/// selection file.
SelectionResult select_bundle(const fs::path& bundle, const fs::path& probe_dir, std::size_t k,
                              const fs::path& out_json, const std::string& probe_file);

/// Expands directories into the *.json files below them, sorted.
std::vector<fs::path> collect_json_files(const std::vector<fs::path>& inputs);

/// Groups selections by (category, layer, checkpoint) and builds one
/// matrix per group with languages in sorted order. Groups with a single
/// language are reported to `log` and skipped. Writes overlap.csv and
/// matrices/<category>_L<layer>_S<step>.json under `out_dir`.
std::vector<OverlapMatrix> compute_overlap(const std::vector<fs::path>& selection_inputs,
                                           double alpha, bool bonferroni, const fs::path& out_dir,
                                           std::ostream& log);

/// Reads <dir>/matrices/*.json, or *.json in `dir` itself when it has no
/// matrices/ subdirectory.
std::vector<OverlapMatrix> load_overlap_dir(const fs::path& dir);

struct CorrelateOptions {
  std::vector<int> layers = {13, 17};
  std::string pivot = "eng";
  /// Empty: the only tag in the metrics file.
  std::string model_tag;
  /// Empty: every category present; overlap is averaged across them.
  std::vector<std::string> categories;
};

/// The overlap series that enter the correlations.
struct OverlapInputs {
  OverlapSeries average;
  /// Target language -> pivot-target series.
  std::map<std::string, OverlapSeries> pairwise;
  /// Per category, layer-averaged all-pairs series.
  std::vector<OverlapSeries> per_category;
};

OverlapInputs overlap_inputs(const std::vector<OverlapMatrix>& matrices,
                             const CorrelateOptions& options);

/// Metric series of the chosen model tag, grouped by (task, metric_name).
std::vector<std::vector<MetricSeries>> metric_groups(const std::vector<MetricSeries>& metrics,
                                                     const std::string& model_tag);

/// One average and one pairwise report per (task, metric). Writes
/// correlation.json and table.csv under `out_dir`.
std::vector<CorrelationReport> correlate_outputs(const std::vector<OverlapMatrix>& matrices,
                                                 const std::vector<MetricSeries>& metrics,
                                                 const CorrelateOptions& options,
                                                 const fs::path& out_dir);

struct ReportOptions {
  CorrelateOptions correlate;
  int heatmap_layer = 17;
  /// Unset: the latest checkpoint available at heatmap_layer.
  std::optional<std::int64_t> heatmap_step;
};

/// Figure-ready tables: trajectory.csv (category x checkpoint, layer
/// averaged), layer_trajectory.csv, heatmap.csv (one matrix per category,
/// unordered pairs), and with metrics also scatter.csv and average.csv.
void write_report(const std::vector<OverlapMatrix>& matrices,
                  const std::vector<MetricSeries>* metrics, const ReportOptions& options,
                  const fs::path& out_dir);

struct SynthOptions {
  std::vector<std::string> languages = {"eng", "deu", "fra", "spa"};
  std::vector<std::string> categories = {"Number"};
  std::vector<int> layers = {13, 17};
  std::vector<std::int64_t> checkpoints = {1000, 2000, 3000};
  std::size_t d = 64;
  std::size_t k_true = 8;
  std::size_t n_per_class = 200;
  std::size_t num_labels = 2;
  double separation = 6.0;
  double noise = 1.0;
  /// Fraction of planted dimensions shared by all languages; one value per
  /// checkpoint, or a single value for all of them.
  std::vector<double> shared = {0.5};
  /// Leave splits unassigned, for feeding through prepare.
  bool raw = false;
  /// Consecutive records sharing one lemma.
  std::size_t lemma_group = 1;
  std::uint64_t seed = 0;
  SplitRatios ratios;
};

/// One bundle per (language, category, layer, checkpoint) under
/// out/<language>_<category>_L<layer>_S<step>/. Returns the bundle
/// directories in key order.
std::vector<fs::path> synth_bundles(const SynthOptions& options, const fs::path& out);

/// Directories holding a manifest.json below any of `roots`, sorted.
std::vector<fs::path> find_bundles(const std::vector<fs::path>& roots);

/// Full pipeline over the bundles under config.bundle_roots:
///   prepared/<key>/   bundles that arrived without splits
///   probes/<key>/     trained probes
///   selections/<key>.json
///   overlap/          overlap.csv, matrices/
///   correlation/      when metrics are configured
///   report/
///   config.txt        the effective configuration
/// Bundles are processed by a pool of config.jobs workers; outputs do not
/// depend on the worker count.
void run_pipeline(const RunConfig& config, std::ostream& log);

}  // namespace xlprobe::cli
