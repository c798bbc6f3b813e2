#pragma once

// Planted-signal datasets: Gaussian classes whose means differ only on a
// known set of dimensions, used as ground truth for training, selection and
// overlap checks.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xlprobe/dataset.hpp"
#include "xlprobe/selection.hpp"

namespace xlprobe {

struct PlantedSpec {
  std::size_t d = 10;
  std::size_t k_true = 2;
  /// 0-based; when empty, k_true dimensions are drawn from the seed.
  std::vector<std::size_t> planted_dims;
  std::size_t n_per_class = 500;
  std::size_t num_labels = 2;
  double class_separation = 6.0;
  double noise_std = 1.0;
  std::uint64_t seed = 0;
  SplitRatios ratios;

  std::string language = "syn";
  std::string category = "Planted";
  int layer = 0;
  std::int64_t checkpoint_step = 0;

  void validate() const;
};

struct PlantedDataset {
  ProbeDataset data;
  /// Sorted, 0-based.
  std::vector<std::size_t> ground_truth;
};

/// Planted dimension i (in ascending order) belongs to class i mod L. A
/// class mean sits at +separation/2 on the dimensions it owns and at
/// -separation/2 on the other planted dimensions, and at 0 elsewhere. With
/// two labels every planted dimension separates the classes by the full
/// separation. Records are interleaved by class; splits are assigned per
/// class by largest deficit against the ratios. Lemmas are unique.
PlantedDataset generate_planted(const PlantedSpec& spec);

/// Fraction of `truth` found among the first |truth| selected dimensions.
/// An empty truth set scores 1.
double recovery_score(const SelectionResult& selected, std::span<const std::size_t> truth);

}  // namespace xlprobe
