#pragma once

// Cross-lingual neuron overlap: pairwise overlap rates of selected
// dimension sets, their significance under a random-subset null, and
// per-checkpoint trajectories.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xlprobe/matrix.hpp"
#include "xlprobe/selection.hpp"

namespace xlprobe {

inline constexpr double kDefaultAlpha = 0.05;

struct OverlapMatrix {
  std::vector<std::string> languages;
  std::string category;
  int layer = 0;
  std::int64_t checkpoint_step = 0;
  std::size_t k = 0;
  std::size_t d = 0;
  /// Symmetric, unit diagonal, entries are |A ∩ B| / k.
  Matrix<double> rates;
  /// Symmetric one-sided hypergeometric tail probabilities; diagonal 0.
  Matrix<double> pvalues;
  double alpha = kDefaultAlpha;
  bool bonferroni = false;

  std::size_t num_languages() const noexcept { return languages.size(); }
  /// Per-cell significance level: alpha, divided by the number of pairs
  /// under Bonferroni.
  double threshold() const;
  bool significant(std::size_t i, std::size_t j) const { return pvalues(i, j) <= threshold(); }
  std::optional<std::size_t> index_of(const std::string& language) const;

  bool operator==(const OverlapMatrix&) const = default;
};

/// |set(a) ∩ set(b)| / k; selection order is ignored.
double overlap_rate(const SelectionResult& a, const SelectionResult& b);

/// P(X >= m) for X ~ Hypergeometric(population d, successes k, draws k):
/// the chance that two independent uniform k-subsets of d dimensions share
/// at least m members. Exact rational arithmetic while C(d, k) <= 2^53,
/// log-space summation beyond that.
double hypergeom_pvalue(std::size_t d, std::size_t k, std::size_t m);
/// Natural log of hypergeom_pvalue, usable where the value underflows.
double hypergeom_log_pvalue(std::size_t d, std::size_t k, std::size_t m);

/// Languages appear in the order given. All selections must share k, d,
/// category, layer and checkpoint.
OverlapMatrix pairwise_matrix(std::span<const SelectionResult> selections,
                              double alpha = kDefaultAlpha, bool bonferroni = false);
OverlapMatrix pairwise_matrix(const std::map<std::string, SelectionResult>& by_language,
                              double alpha = kDefaultAlpha, bool bonferroni = false);

/// Mean of the strict upper triangle of rates.
double average_rate(const OverlapMatrix& matrix);

using LanguagePair = std::pair<std::string, std::string>;

struct OverlapSeries {
  std::string category;
  /// Layers averaged into each value, e.g. {13, 17}.
  std::vector<int> layers;
  /// Unset for the all-pairs average.
  std::optional<LanguagePair> pair;
  std::vector<std::int64_t> checkpoint_steps;
  std::vector<double> values;

  bool operator==(const OverlapSeries&) const = default;
};

inline constexpr int kDefaultLayers[] = {13, 17};

/// Per checkpoint, the mean over `layers` of average_rate (or of the rate
/// of `pair` when given). Matrices for other layers are ignored; every
/// checkpoint must carry every requested layer. Steps come out ascending.
OverlapSeries layer_average_series(std::span<const OverlapMatrix> matrices,
                                   std::span<const int> layers = kDefaultLayers,
                                   const std::optional<LanguagePair>& pair = std::nullopt);

/// Per checkpoint, the mean of the given series over the steps all of them
/// share. The category field joins the input categories with '+'. Layers
/// and pair must agree across inputs.
OverlapSeries category_average(std::span<const OverlapSeries> series);

/// Flat CSV: category, layer, checkpoint_step, lang_a, lang_b, rate,
/// p_value, significant. One row per unordered language pair.
void write_overlap_csv(std::ostream& out, std::span<const OverlapMatrix> matrices,
                       bool header = true);

void write_matrix_json(const OverlapMatrix& matrix, const std::filesystem::path& path);
OverlapMatrix load_matrix_json(const std::filesystem::path& path);

/// "<category>_L<layer>_S<step>.json"
std::string matrix_file_name(const OverlapMatrix& matrix);

}  // namespace xlprobe
