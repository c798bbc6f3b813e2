#pragma once

// Probing datasets: one bundle per (language, category, layer, checkpoint).
//
// A bundle is a directory holding three files:
//   manifest.json   dataset metadata and the label inventory
//   records.tsv     one row per word: index, form, lemma, label_id, split
//   embeddings.bin  "IPEMB1\0\0", u32-LE N, u32-LE d, N*d float32-LE row-major

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xlprobe/matrix.hpp"

namespace xlprobe {

/// `none` marks a record that has not been assigned to a split yet (raw
/// bundles straight out of extraction).
enum class Split : std::uint8_t { train, dev, test, none };

std::string_view to_string(Split split) noexcept;
/// Throws InvalidInput for unknown names.
Split parse_split(std::string_view name);

inline constexpr int kBundleFormatVersion = 1;
inline constexpr std::size_t kDefaultLemmaThreshold = 20;

struct DatasetKey {
  std::string language;
  std::string category;
  int layer = 0;
  std::int64_t checkpoint_step = 0;

  auto operator<=>(const DatasetKey&) const = default;
  bool operator==(const DatasetKey&) const = default;
};

/// "<language>_<category>_L<layer>_S<step>", used for output file names.
std::string to_string(const DatasetKey& key);

struct Manifest {
  int format_version = kBundleFormatVersion;
  std::string language;
  std::string category;
  int layer = 0;
  std::int64_t checkpoint_step = 0;
  std::size_t d = 0;
  std::size_t n = 0;
  std::vector<std::string> label_inventory;
  std::string source;

  DatasetKey key() const { return {language, category, layer, checkpoint_step}; }
  bool operator==(const Manifest&) const = default;
};

struct Record {
  std::size_t index = 0;
  std::string form;
  std::string lemma;
  std::size_t label_id = 0;
  Split split = Split::none;

  bool operator==(const Record&) const = default;
};

/// Word records plus their N x d embedding matrix. Construction validates
/// every invariant; instances are immutable afterwards.
class ProbeDataset {
 public:
  ProbeDataset(Manifest manifest, std::vector<Record> records, Matrix<float> embeddings);

  const Manifest& manifest() const noexcept { return manifest_; }
  const std::vector<Record>& records() const noexcept { return records_; }
  const Matrix<float>& embeddings() const noexcept { return embeddings_; }

  std::size_t size() const noexcept { return records_.size(); }
  std::size_t dim() const noexcept { return manifest_.d; }
  std::size_t num_labels() const noexcept { return manifest_.label_inventory.size(); }
  DatasetKey key() const { return manifest_.key(); }

  std::span<const float> embedding(std::size_t row) const { return embeddings_.row(row); }

  /// Row positions of the records in `split`, ascending.
  std::vector<std::size_t> rows_in(Split split) const;

  /// True when no record is left with Split::none.
  bool splits_assigned() const noexcept;

  bool operator==(const ProbeDataset&) const = default;

 private:
  Manifest manifest_;
  std::vector<Record> records_;
  Matrix<float> embeddings_;
};

/// A subset of dataset rows, in a fixed order.
struct DataView {
  const ProbeDataset* data = nullptr;
  std::vector<std::size_t> rows;

  std::size_t size() const noexcept { return rows.size(); }
  bool empty() const noexcept { return rows.empty(); }
};

DataView view(const ProbeDataset& data, Split split);

ProbeDataset load_bundle(const std::filesystem::path& dir);
/// Reads only <dir>/manifest.json.
Manifest load_manifest(const std::filesystem::path& dir);
void write_bundle(const ProbeDataset& data, const std::filesystem::path& dir);

/// Raw embeddings.bin encoding, exposed for tests and tools.
std::vector<std::uint8_t> encode_embeddings(const Matrix<float>& embeddings);

struct SplitRatios {
  double train = 0.65;
  double dev = 0.15;
  double test = 0.20;

  void validate() const;
};

/// Assigns splits at lemma granularity. Distinct lemmas are shuffled with
/// the seeded generator, then each lemma goes to the split whose record
/// fraction is furthest below its target ratio (ties resolve train, dev,
/// test). Needs at least three distinct lemmas.
ProbeDataset lemma_disjoint_split(const ProbeDataset& data, const SplitRatios& ratios,
                                  std::uint64_t seed);

/// Drops every record whose lemma occurs fewer than `threshold` times within
/// its own split. Survivors keep their order and their `index` values.
ProbeDataset frequency_filter(const ProbeDataset& data,
                              std::size_t threshold = kDefaultLemmaThreshold);

}  // namespace xlprobe
