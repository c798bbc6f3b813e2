#pragma once

// Choosing the k most informative dimensions of a trained probe by
// maximising the dev-set log-likelihood of the masked probe.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xlprobe/dataset.hpp"
#include "xlprobe/probe.hpp"

namespace xlprobe {

inline constexpr std::size_t kDefaultK = 50;

struct SelectionResult {
  /// 0-based dimensions in selection order.
  std::vector<std::size_t> ordered_dims;
  /// Total dev log-likelihood of each prefix of ordered_dims (natural log).
  std::vector<double> loglik_trace;
  std::size_t k = 0;
  std::size_t d = 0;
  DatasetKey dataset_key;

  bool operator==(const SelectionResult&) const = default;
};

/// Dev log-likelihood of adding each dimension to `current`, computed
/// incrementally from the current logits. Entries for dimensions already
/// in `current` are -infinity.
std::vector<double> candidate_logliks(const LinearProbe& probe, const DataView& dev,
                                      const Mask& current);

/// Greedy forward selection. Each step adds the dimension with the highest
/// dev log-likelihood; ties go to the smallest index. Trace entries are
/// recomputed from scratch with masked_nll so they match it exactly.
SelectionResult greedy_select(const LinearProbe& probe, const DataView& dev, std::size_t k);
SelectionResult greedy_select(const LinearProbe& probe, const ProbeDataset& data, std::size_t k);

inline constexpr std::uint64_t kExhaustiveLimit = 1'000'000;

/// True argmax over all size-k subsets, lexicographically smallest on ties.
/// Intended as a test oracle; refuses when C(d, k) exceeds kExhaustiveLimit.
/// The trace holds only the optimum. `subsets_scanned`, when given,
/// receives the number of subsets evaluated.
SelectionResult exhaustive_select(const LinearProbe& probe, const DataView& dev, std::size_t k,
                                  std::uint64_t* subsets_scanned = nullptr);

Mask selection_to_mask(const SelectionResult& result, std::size_t d);

/// selection.json: dataset_key, k, d, ordered_dims (1-based), loglik_trace,
/// probe_file, created_at.
struct SelectionFile {
  SelectionResult result;
  std::string probe_file;
  std::string created_at;
};

void write_selection(const SelectionFile& file, const std::filesystem::path& path);
SelectionFile load_selection(const std::filesystem::path& path);

/// created_at value for new selection files: SOURCE_DATE_EPOCH when set,
/// the Unix epoch otherwise, so reruns stay byte-identical.
std::string selection_timestamp();

}  // namespace xlprobe
