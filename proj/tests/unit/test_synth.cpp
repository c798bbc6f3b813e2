#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "oracles.hpp"
#include "xlprobe/error.hpp"
#include "xlprobe/synth.hpp"

using namespace xlprobe;
using xlprobe::testing::TempDir;

namespace {

std::vector<double> class_mean(const ProbeDataset& data, std::size_t label) {
  std::vector<double> mean(data.dim(), 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.records()[i].label_id != label) continue;
    ++count;
    const auto h = data.embedding(i);
    for (std::size_t j = 0; j < data.dim(); ++j) mean[j] += h[j];
  }
  for (double& v : mean) v /= static_cast<double>(count);
  return mean;
}

// Nearest true class mean on the planted dimensions, which is the Bayes
// rule for equal-variance isotropic Gaussians with equal priors.
std::size_t bayes_errors(const PlantedDataset& p, const PlantedSpec& spec) {
  const double half = spec.class_separation / 2.0;
  std::size_t errors = 0;
  for (std::size_t i = 0; i < p.data.size(); ++i) {
    const auto h = p.data.embedding(i);
    std::size_t best = 0;
    double best_dist = INFINITY;
    for (std::size_t c = 0; c < spec.num_labels; ++c) {
      double dist = 0.0;
      for (std::size_t t = 0; t < p.ground_truth.size(); ++t) {
        const double mu = (t % spec.num_labels == c) ? half : -half;
        const double diff = h[p.ground_truth[t]] - mu;
        dist += diff * diff;
      }
      if (dist < best_dist) {
        best_dist = dist;
        best = c;
      }
    }
    if (best != p.data.records()[i].label_id) ++errors;
  }
  return errors;
}

}  // namespace

TEST_CASE("PlantedSpec validation") {
  PlantedSpec s;
  CHECK_NOTHROW(s.validate());
  auto expect_bad = [](PlantedSpec bad) { CHECK_THROWS_AS(generate_planted(bad), InvalidInput); };
  PlantedSpec b = s;
  b.k_true = 11;
  expect_bad(b);
  b = s;
  b.class_separation = 0.0;
  expect_bad(b);
  b = s;
  b.noise_std = -1.0;
  expect_bad(b);
  b = s;
  b.num_labels = 1;
  expect_bad(b);
  b = s;
  b.n_per_class = 0;
  expect_bad(b);
  b = s;
  b.planted_dims = {1, 1};
  expect_bad(b);
  b = s;
  b.planted_dims = {1, 10};
  expect_bad(b);
  b = s;
  b.planted_dims = {1, 2, 3};
  expect_bad(b);
}

TEST_CASE("shape, labels, lemmas and class balance") {
  PlantedSpec s;
  s.d = 12;
  s.k_true = 3;
  s.n_per_class = 50;
  s.num_labels = 3;
  const PlantedDataset p = generate_planted(s);
  CHECK(p.data.size() == 150);
  CHECK(p.data.dim() == 12);
  CHECK(p.ground_truth.size() == 3);
  CHECK(std::is_sorted(p.ground_truth.begin(), p.ground_truth.end()));
  std::set<std::string> lemmas;
  std::map<std::pair<std::size_t, Split>, std::size_t> counts;
  for (const auto& r : p.data.records()) {
    lemmas.insert(r.lemma);
    ++counts[{r.label_id, r.split}];
  }
  CHECK(lemmas.size() == 150);
  CHECK(p.data.splits_assigned());
  // Default ratios (0.65, 0.15, 0.20) as integer weights, one record per lemma.
  const std::vector<std::size_t> units(50, 1);
  const std::vector<std::uint64_t> weights = {13, 3, 4};
  const auto expected = testing::greedy_split_sizes(units, weights);
  CHECK(expected == std::vector<std::size_t>{33, 7, 10});
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(counts[{c, Split::train}] == expected[0]);
    CHECK(counts[{c, Split::dev}] == expected[1]);
    CHECK(counts[{c, Split::test}] == expected[2]);
  }
}

TEST_CASE("deterministic per seed") {
  PlantedSpec s;
  s.seed = 42;
  const PlantedDataset a = generate_planted(s);
  const PlantedDataset b = generate_planted(s);
  CHECK(a.ground_truth == b.ground_truth);
  CHECK(a.data.embeddings() == b.data.embeddings());
  CHECK(a.data.records() == b.data.records());
  s.seed = 43;
  CHECK_FALSE(generate_planted(s).data.embeddings() == a.data.embeddings());
}

TEST_CASE("class means differ only on planted dimensions") {
  PlantedSpec s;
  s.d = 16;
  s.k_true = 4;
  s.num_labels = 2;
  s.n_per_class = 4000;
  s.seed = 5;
  const PlantedDataset p = generate_planted(s);
  const auto m0 = class_mean(p.data, 0);
  const auto m1 = class_mean(p.data, 1);
  const std::set<std::size_t> planted(p.ground_truth.begin(), p.ground_truth.end());
  for (std::size_t j = 0; j < 16; ++j) {
    if (planted.contains(j)) {
      CHECK(std::abs(m0[j] - m1[j]) == doctest::Approx(6.0).epsilon(0.02));
    } else {
      CHECK(std::abs(m0[j]) < 0.08);
      CHECK(std::abs(m1[j]) < 0.08);
    }
  }
}

TEST_CASE("vanishing noise makes classes separable on planted dims") {
  PlantedSpec s;
  s.d = 10;
  s.k_true = 3;
  s.num_labels = 3;
  s.noise_std = 1e-6;
  s.n_per_class = 50;
  const PlantedDataset p = generate_planted(s);
  CHECK(bayes_errors(p, s) == 0);
  const std::set<std::size_t> planted(p.ground_truth.begin(), p.ground_truth.end());
  for (std::size_t i = 0; i < p.data.size(); ++i) {
    for (std::size_t j = 0; j < 10; ++j) {
      if (!planted.contains(j)) CHECK(std::abs(p.data.embedding(i)[j]) < 1e-4);
    }
  }
}

TEST_CASE("Bayes error at d = 10, k_true = 2, separation 6 is below 0.2%") {
  // Means +-(3, -3) are 6 sqrt(2) apart; the Bayes error is Phi(-3 sqrt(2)).
  const double analytic = testing::normal_upper_tail(3.0 * std::sqrt(2.0));
  CHECK(analytic < 0.002);
  CHECK(analytic == doctest::Approx(1.1045e-5).epsilon(1e-3));

  std::size_t errors = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    PlantedSpec s;
    s.d = 10;
    s.k_true = 2;
    s.n_per_class = 500;
    s.seed = seed;
    const PlantedDataset p = generate_planted(s);
    errors += bayes_errors(p, s);
    total += p.data.size();
  }
  CHECK(static_cast<double>(errors) / static_cast<double>(total) < 0.002);
}

TEST_CASE("listing order of planted_dims does not matter") {
  PlantedSpec a;
  a.planted_dims = {7, 2};
  a.seed = 3;
  PlantedSpec b = a;
  b.planted_dims = {2, 7};
  const PlantedDataset pa = generate_planted(a);
  const PlantedDataset pb = generate_planted(b);
  CHECK(pa.ground_truth == std::vector<std::size_t>{2, 7});
  CHECK(pa.data.embeddings() == pb.data.embeddings());
}

TEST_CASE("relabelling planted dims permutes the class means") {
  // Swapping the roles of dims (1,2) and (4,7) moves the class signal with
  // them and leaves the noise untouched.
  PlantedSpec a;
  a.planted_dims = {1, 4};
  a.seed = 8;
  PlantedSpec b = a;
  b.planted_dims = {2, 7};
  const PlantedDataset pa = generate_planted(a);
  const PlantedDataset pb = generate_planted(b);
  const std::size_t perm[] = {0, 2, 1, 3, 7, 5, 6, 4, 8, 9};
  const double half = 3.0;
  for (std::size_t i = 0; i < pa.data.size(); ++i) {
    const std::size_t c = pa.data.records()[i].label_id;
    auto mean_a = [&](std::size_t j) {
      if (j == 1) return c == 0 ? half : -half;
      if (j == 4) return c == 1 ? half : -half;
      return 0.0;
    };
    for (std::size_t j = 0; j < 10; ++j) {
      const double noise_a = pa.data.embedding(i)[j] - mean_a(j);
      const double mean_b = mean_a(perm[j]);
      CHECK(pb.data.embedding(i)[j] == doctest::Approx(mean_b + noise_a).epsilon(1e-5));
    }
  }
}

TEST_CASE("recovery_score examples") {
  SelectionResult r;
  r.ordered_dims = {3, 7, 1};
  const std::vector<std::size_t> truth = {3, 7};
  CHECK(recovery_score(r, truth) == 1.0);
  r.ordered_dims = {7, 3};
  CHECK(recovery_score(r, truth) == 1.0);
  r.ordered_dims = {0, 1};
  CHECK(recovery_score(r, truth) == 0.0);
  r.ordered_dims = {3, 5, 7};
  CHECK(recovery_score(r, truth) == 0.5);
  CHECK(recovery_score(r, std::vector<std::size_t>{}) == 1.0);
}

TEST_CASE("generated bundles pass dataset validation and record the truth") {
  TempDir dir;
  PlantedSpec s;
  s.d = 12;
  s.k_true = 3;
  s.planted_dims = {0, 5, 11};
  s.n_per_class = 30;
  s.seed = 99;
  s.language = "deu";
  s.category = "Gender";
  s.layer = 17;
  s.checkpoint_step = 5000;
  const PlantedDataset p = generate_planted(s);
  write_bundle(p.data, dir.path());
  const ProbeDataset back = load_bundle(dir.path());
  CHECK(back.records() == p.data.records());
  CHECK(back.embeddings() == p.data.embeddings());
  CHECK(back.key() == DatasetKey{"deu", "Gender", 17, 5000});
  CHECK(back.manifest().source == "synth:planted=1,6,12;seed=99");
}
