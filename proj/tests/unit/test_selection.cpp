#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <set>

#include <json.hpp>

#include "oracles.hpp"
#include "xlprobe/error.hpp"
#include "xlprobe/probe.hpp"
#include "xlprobe/selection.hpp"
#include "xlprobe/synth.hpp"

using namespace xlprobe;
using xlprobe::testing::TempDir;

namespace {

double subset_loglik(const LinearProbe& probe, const DataView& dev,
                     std::vector<std::size_t> dims) {
  return -masked_nll(probe, dev, Mask::from_indices(probe.dim(), dims));
}

struct Trained {
  PlantedDataset planted;
  LinearProbe probe;
};

Trained planted_probe(std::size_t d, std::size_t k_true, std::uint64_t seed,
                      std::size_t n_per_class = 200) {
  PlantedSpec spec;
  spec.d = d;
  spec.k_true = k_true;
  spec.n_per_class = n_per_class;
  spec.seed = seed;
  Trained t{generate_planted(spec), {}};
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.epochs = 60;
  cfg.batch_size = 64;
  cfg.seed = seed;
  t.probe = train(view(t.planted.data, Split::train), view(t.planted.data, Split::dev), cfg);
  return t;
}

}  // namespace

TEST_CASE("k = 1 picks the best single dimension found by direct scan") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ProbeDataset data = testing::random_dataset(60, 9, 3, seed);
    const LinearProbe probe = testing::random_probe(9, 3, seed + 100);
    const DataView dev = view(data, Split::dev);
    std::size_t best = 0;
    double best_ll = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < 9; ++j) {
      const double ll = subset_loglik(probe, dev, {j});
      if (ll > best_ll) {
        best_ll = ll;
        best = j;
      }
    }
    const SelectionResult r = greedy_select(probe, dev, 1);
    REQUIRE(r.ordered_dims.size() == 1);
    CHECK(r.ordered_dims[0] == best);
    CHECK(r.loglik_trace[0] == best_ll);
  }
}

TEST_CASE("k = d returns a permutation of all dimensions") {
  const ProbeDataset data = testing::random_dataset(40, 12, 2, 3);
  const LinearProbe probe = testing::random_probe(12, 2, 4);
  const SelectionResult r = greedy_select(probe, data, 12);
  std::vector<std::size_t> dims = r.ordered_dims;
  std::sort(dims.begin(), dims.end());
  for (std::size_t j = 0; j < 12; ++j) CHECK(dims[j] == j);
  CHECK(r.k == 12);
  CHECK(r.d == 12);
  CHECK(r.dataset_key == data.key());
  CHECK(r.loglik_trace.back() == doctest::Approx(-masked_nll(probe, view(data, Split::dev),
                                                             Mask::full(12))));
}

TEST_CASE("trace entries equal masked_nll of each prefix exactly") {
  const ProbeDataset data = testing::random_dataset(80, 15, 4, 11);
  const LinearProbe probe = testing::random_probe(15, 4, 12);
  const DataView dev = view(data, Split::dev);
  const SelectionResult r = greedy_select(probe, dev, 7);
  REQUIRE(r.loglik_trace.size() == 7);
  for (std::size_t i = 0; i < 7; ++i) {
    std::vector<std::size_t> prefix(r.ordered_dims.begin(), r.ordered_dims.begin() + i + 1);
    CHECK(r.loglik_trace[i] == subset_loglik(probe, dev, prefix));
  }
}

TEST_CASE("each greedy step is the argmax over the remaining dimensions") {
  const ProbeDataset data = testing::random_dataset(50, 8, 3, 21);
  const LinearProbe probe = testing::random_probe(8, 3, 22);
  const DataView dev = view(data, Split::dev);
  const SelectionResult r = greedy_select(probe, dev, 5);
  std::vector<std::size_t> chosen;
  for (std::size_t step = 0; step < 5; ++step) {
    double best_ll = -std::numeric_limits<double>::infinity();
    std::size_t best = 0;
    for (std::size_t j = 0; j < 8; ++j) {
      if (std::find(chosen.begin(), chosen.end(), j) != chosen.end()) continue;
      auto trial = chosen;
      trial.push_back(j);
      const double ll = subset_loglik(probe, dev, trial);
      if (ll > best_ll + 1e-9) {
        best_ll = ll;
        best = j;
      }
    }
    CHECK(r.ordered_dims[step] == best);
    chosen.push_back(r.ordered_dims[step]);
  }
}

TEST_CASE("candidate_logliks matches direct evaluation and excludes chosen dims") {
  const ProbeDataset data = testing::random_dataset(40, 6, 2, 5);
  const LinearProbe probe = testing::random_probe(6, 2, 6);
  const DataView dev = view(data, Split::dev);
  const std::vector<std::size_t> current_dims = {1, 4};
  const Mask current = Mask::from_indices(6, current_dims);
  const auto c = candidate_logliks(probe, dev, current);
  REQUIRE(c.size() == 6);
  for (std::size_t j = 0; j < 6; ++j) {
    if (current.contains(j)) {
      CHECK(c[j] == -std::numeric_limits<double>::infinity());
    } else {
      CHECK(c[j] == doctest::Approx(subset_loglik(probe, dev, {1, 4, j})).epsilon(1e-12));
    }
  }
}

TEST_CASE("ties go to the smaller index") {
  // Columns 1 and 3 carry identical embeddings and identical weights, and
  // together determine the label, so they tie for the first pick.
  Manifest m;
  m.d = 4;
  m.n = 40;
  m.label_inventory = {"a", "b"};
  Engine rng = make_engine(7, 0);
  Matrix<float> emb(40, 4);
  std::vector<Record> records;
  for (std::size_t i = 0; i < 40; ++i) {
    for (std::size_t j = 0; j < 4; ++j) emb(i, j) = static_cast<float>(standard_normal(rng));
    emb(i, 3) = emb(i, 1);
    records.push_back({i, "w", "w" + std::to_string(i), emb(i, 1) > 0 ? 0U : 1U, Split::dev});
  }
  const ProbeDataset data(m, records, emb);
  LinearProbe probe = testing::random_probe(4, 2, 8, 0.1);
  probe.labels = m.label_inventory;
  probe.manifest.label_inventory = m.label_inventory;
  for (std::size_t j : {1, 3}) {
    probe.weights(0, j) = 2.0f;
    probe.weights(1, j) = -2.0f;
  }
  const DataView dev = view(data, Split::dev);
  const auto c = candidate_logliks(probe, dev, Mask(4));
  REQUIRE(c[1] == c[3]);
  REQUIRE(c[1] == *std::max_element(c.begin(), c.end()));
  CHECK(greedy_select(probe, dev, 1).ordered_dims[0] == 1);
  CHECK(exhaustive_select(probe, dev, 1).ordered_dims[0] == 1);
}

TEST_CASE("planted pair is picked first at d = 10") {
  const Trained t = planted_probe(10, 2, 31);
  const SelectionResult r = greedy_select(t.probe, t.planted.data, 2);
  std::vector<std::size_t> got = r.ordered_dims;
  std::sort(got.begin(), got.end());
  CHECK(got == t.planted.ground_truth);
  CHECK(recovery_score(r, t.planted.ground_truth) == 1.0);
}

TEST_CASE("exhaustive search scans C(d, k) subsets and bounds greedy") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const ProbeDataset data = testing::random_dataset(60, 10, 3, seed + 40);
    const LinearProbe probe = testing::random_probe(10, 3, seed + 50);
    const DataView dev = view(data, Split::dev);
    std::uint64_t scanned = 0;
    const SelectionResult ex = exhaustive_select(probe, dev, 3, &scanned);
    CHECK(scanned == 120);
    REQUIRE(ex.ordered_dims.size() == 3);
    REQUIRE(ex.loglik_trace.size() == 1);
    CHECK(std::is_sorted(ex.ordered_dims.begin(), ex.ordered_dims.end()));
    CHECK(ex.loglik_trace[0] == doctest::Approx(subset_loglik(probe, dev, ex.ordered_dims)));

    // Brute-force optimum computed here.
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < 10; ++a)
      for (std::size_t b = a + 1; b < 10; ++b)
        for (std::size_t c = b + 1; c < 10; ++c) best = std::max(best, subset_loglik(probe, dev, {a, b, c}));
    CHECK(ex.loglik_trace[0] == doctest::Approx(best).epsilon(1e-12));

    const SelectionResult gr = greedy_select(probe, dev, 3);
    CHECK(gr.loglik_trace.back() <= ex.loglik_trace[0] + 1e-9);
  }
}

TEST_CASE("greedy and exhaustive agree on planted d = 8, k = 2") {
  const Trained t = planted_probe(8, 2, 77);
  const DataView dev = view(t.planted.data, Split::dev);
  const SelectionResult gr = greedy_select(t.probe, dev, 2);
  const SelectionResult ex = exhaustive_select(t.probe, dev, 2);
  std::vector<std::size_t> g = gr.ordered_dims;
  std::sort(g.begin(), g.end());
  CHECK(g == ex.ordered_dims);
  CHECK(g == t.planted.ground_truth);
}

TEST_CASE("exhaustive search refuses oversized searches") {
  const ProbeDataset data = testing::random_dataset(8, 64, 2, 1);
  const LinearProbe probe = testing::random_probe(64, 2, 2);
  CHECK_THROWS_AS(exhaustive_select(probe, view(data, Split::dev), 10), InvalidInput);
}

TEST_CASE("k outside [1, d] and empty dev are rejected") {
  const ProbeDataset data = testing::random_dataset(20, 5, 2, 1);
  const LinearProbe probe = testing::random_probe(5, 2, 2);
  const DataView dev = view(data, Split::dev);
  CHECK_THROWS_AS(greedy_select(probe, dev, 6), InvalidInput);
  CHECK_THROWS_AS(greedy_select(probe, dev, 0), InvalidInput);
  CHECK_THROWS_AS(exhaustive_select(probe, dev, 6), InvalidInput);
  CHECK_THROWS_AS(greedy_select(probe, DataView{&data, {}}, 2), InvalidInput);
  const LinearProbe wide = testing::random_probe(6, 2, 2);
  CHECK_THROWS_AS(greedy_select(wide, dev, 2), InvalidInput);
}

TEST_CASE("selection_to_mask") {
  SelectionResult r;
  r.ordered_dims = {4, 0, 2};
  r.k = 3;
  r.d = 6;
  const Mask m = selection_to_mask(r, 6);
  CHECK(m.count() == 3);
  CHECK(m.indices() == std::vector<std::size_t>{0, 2, 4});
  CHECK_THROWS_AS(selection_to_mask(r, 4), InvalidInput);
}

TEST_CASE("selection file round-trips and stores 1-based dims") {
  TempDir dir;
  SelectionFile f;
  f.result.ordered_dims = {0, 7, 3};
  f.result.loglik_trace = {-10.5, -4.25, -1.0 / 3.0};
  f.result.k = 3;
  f.result.d = 8;
  f.result.dataset_key = {"deu", "Number", 13, 4000};
  f.probe_file = "probes/deu_Number_L13_S4000";
  f.created_at = "1970-01-01T00:00:00Z";
  const auto path = dir / "sel.json";
  write_selection(f, path);
  const SelectionFile back = load_selection(path);
  CHECK(back.result == f.result);
  CHECK(back.probe_file == f.probe_file);
  CHECK(back.created_at == f.created_at);

  const auto j = nlohmann::json::parse(testing::read_text(path));
  CHECK(j.at("ordered_dims") == nlohmann::json::array({1, 8, 4}));
  CHECK(j.at("dataset_key").is_object());
}

TEST_CASE("malformed selection files are format errors") {
  TempDir dir;
  SelectionFile f;
  f.result.ordered_dims = {0, 1};
  f.result.loglik_trace = {-2.0, -1.0};
  f.result.k = 2;
  f.result.d = 4;
  const auto path = dir / "sel.json";
  write_selection(f, path);
  auto j = nlohmann::json::parse(testing::read_text(path));

  auto write_variant = [&](const nlohmann::json& v) {
    std::ofstream(path) << v.dump();
  };
  auto bad = j;
  bad["ordered_dims"] = {0, 1};
  write_variant(bad);
  CHECK_THROWS_AS(load_selection(path), FormatError);
  bad = j;
  bad["ordered_dims"] = {1, 5};
  write_variant(bad);
  CHECK_THROWS_AS(load_selection(path), FormatError);
  bad = j;
  bad["k"] = 3;
  write_variant(bad);
  CHECK_THROWS_AS(load_selection(path), FormatError);
  std::ofstream(path) << "{not json";
  CHECK_THROWS_AS(load_selection(path), FormatError);
  CHECK_THROWS_AS(load_selection(dir / "missing.json"), FormatError);
}

TEST_CASE("selection timestamp follows SOURCE_DATE_EPOCH") {
  ::unsetenv("SOURCE_DATE_EPOCH");
  CHECK(selection_timestamp() == "1970-01-01T00:00:00Z");
  ::setenv("SOURCE_DATE_EPOCH", "86400", 1);
  CHECK(selection_timestamp() == "1970-01-02T00:00:00Z");
  ::unsetenv("SOURCE_DATE_EPOCH");
}
