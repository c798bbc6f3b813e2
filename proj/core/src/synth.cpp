#include "xlprobe/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "xlprobe/error.hpp"
#include "xlprobe/random.hpp"

namespace xlprobe {

namespace {

constexpr std::uint64_t kPlantStream = 10;
constexpr std::uint64_t kNoiseStream = 11;

std::string join_dims(const std::vector<std::size_t>& dims) {
  std::string out;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i > 0) out += ',';
    out += std::to_string(dims[i] + 1);
  }
  return out;
}

}  // namespace

void PlantedSpec::validate() const {
  if (d == 0) throw InvalidInput("d must be positive");
  if (k_true > d) throw InvalidInput("k_true exceeds d");
  if (num_labels < 2) throw InvalidInput("num_labels must be at least 2");
  if (n_per_class == 0) throw InvalidInput("n_per_class must be positive");
  if (!(class_separation > 0)) throw InvalidInput("class_separation must be positive");
  if (!(noise_std > 0)) throw InvalidInput("noise_std must be positive");
  if (!planted_dims.empty()) {
    const std::set<std::size_t> unique(planted_dims.begin(), planted_dims.end());
    if (unique.size() != planted_dims.size() || planted_dims.size() != k_true) {
      throw InvalidInput("planted_dims must hold k_true distinct indices");
    }
    if (*unique.rbegin() >= d) throw InvalidInput("planted dimension outside [1, d]");
  }
  ratios.validate();
}

PlantedDataset generate_planted(const PlantedSpec& spec) {
  spec.validate();
  std::vector<std::size_t> planted = spec.planted_dims;
  if (planted.empty() && spec.k_true > 0) {
    std::vector<std::size_t> all(spec.d);
    std::iota(all.begin(), all.end(), std::size_t{0});
    Engine rng = make_engine(spec.seed, kPlantStream);
    shuffle(std::span<std::size_t>(all), rng);
    planted.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(spec.k_true));
  }
  std::sort(planted.begin(), planted.end());

  // Class means on the planted dimensions.
  const double half = spec.class_separation / 2.0;
  Matrix<double> means(spec.num_labels, spec.d);
  for (std::size_t c = 0; c < spec.num_labels; ++c) {
    for (std::size_t i = 0; i < planted.size(); ++i) {
      means(c, planted[i]) = (i % spec.num_labels == c) ? half : -half;
    }
  }

  const std::size_t n = spec.n_per_class * spec.num_labels;
  Manifest manifest;
  manifest.language = spec.language;
  manifest.category = spec.category;
  manifest.layer = spec.layer;
  manifest.checkpoint_step = spec.checkpoint_step;
  manifest.d = spec.d;
  manifest.n = n;
  for (std::size_t c = 0; c < spec.num_labels; ++c) {
    manifest.label_inventory.push_back("L" + std::to_string(c));
  }
  manifest.source = "synth:planted=" + join_dims(planted) + ";seed=" + std::to_string(spec.seed);

  const std::array<double, 3> target = {spec.ratios.train, spec.ratios.dev, spec.ratios.test};
  const std::array<Split, 3> splits = {Split::train, Split::dev, Split::test};
  std::vector<std::array<std::size_t, 3>> per_class(spec.num_labels, {0, 0, 0});

  std::vector<Record> records;
  records.reserve(n);
  Matrix<float> embeddings(n, spec.d);
  Engine rng = make_engine(spec.seed, kNoiseStream);
  for (std::size_t i = 0; i < spec.n_per_class; ++i) {
    for (std::size_t c = 0; c < spec.num_labels; ++c) {
      const std::size_t row = records.size();
      auto& counts = per_class[c];
      const auto placed = static_cast<double>(i);
      std::size_t best = 0;
      double best_deficit = -std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s < 3; ++s) {
        const double deficit = target[s] * (placed + 1.0) - static_cast<double>(counts[s]);
        if (deficit > best_deficit) {
          best = s;
          best_deficit = deficit;
        }
      }
      ++counts[best];

      Record r;
      r.index = row;
      r.form = "w" + std::to_string(row);
      r.lemma = "lemma" + std::to_string(row);
      r.label_id = c;
      r.split = splits[best];
      records.push_back(std::move(r));

      auto h = embeddings.row(row);
      for (std::size_t j = 0; j < spec.d; ++j) {
        h[j] = static_cast<float>(means(c, j) + spec.noise_std * standard_normal(rng));
      }
    }
  }
  return {ProbeDataset(std::move(manifest), std::move(records), std::move(embeddings)),
          std::move(planted)};
}

double recovery_score(const SelectionResult& selected, std::span<const std::size_t> truth) {
  if (truth.empty()) return 1.0;
  const std::set<std::size_t> truth_set(truth.begin(), truth.end());
  const std::size_t top = std::min(truth_set.size(), selected.ordered_dims.size());
  std::set<std::size_t> found;
  for (std::size_t i = 0; i < top; ++i) {
    if (truth_set.contains(selected.ordered_dims[i])) found.insert(selected.ordered_dims[i]);
  }
  return static_cast<double>(found.size()) / static_cast<double>(truth_set.size());
}

}  // namespace xlprobe
