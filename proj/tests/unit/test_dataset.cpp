#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include "oracles.hpp"
#include "xlprobe/dataset.hpp"
#include "xlprobe/error.hpp"
#include "xlprobe/random.hpp"

using namespace xlprobe;
using xlprobe::testing::TempDir;

namespace {

Manifest small_manifest(std::size_t d, std::size_t n) {
  Manifest m;
  m.language = "eng";
  m.category = "Number";
  m.layer = 13;
  m.checkpoint_step = 1000;
  m.d = d;
  m.n = n;
  m.label_inventory = {"Sing", "Plur"};
  m.source = "unit";
  return m;
}

ProbeDataset with_lemmas(const std::vector<std::pair<std::string, Split>>& lemma_split) {
  const std::size_t n = lemma_split.size();
  std::vector<Record> records(n);
  for (std::size_t i = 0; i < n; ++i) {
    records[i].index = i;
    records[i].form = "f" + std::to_string(i);
    records[i].lemma = lemma_split[i].first;
    records[i].label_id = i % 2;
    records[i].split = lemma_split[i].second;
  }
  Matrix<float> emb(n, 2);
  for (std::size_t i = 0; i < n; ++i) emb(i, 0) = static_cast<float>(i);
  return ProbeDataset(small_manifest(2, n), std::move(records), std::move(emb));
}

void overwrite(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
}

}  // namespace

TEST_CASE("empty bundle round-trips and stays valid") {
  TempDir dir;
  const ProbeDataset empty(small_manifest(4, 0), {}, Matrix<float>(0, 4));
  write_bundle(empty, dir.path());
  const ProbeDataset back = load_bundle(dir.path());
  CHECK(back.size() == 0);
  CHECK(back.dim() == 4);
  CHECK(back == empty);
  CHECK(testing::read_bytes(dir / "embeddings.bin").size() == 16);
}

TEST_CASE("d=3, n=2 bundle encodes to 16 header bytes plus 24 payload bytes") {
  Matrix<float> emb(2, 3);
  emb(0, 0) = 1.0f;
  emb(1, 2) = -2.0f;
  std::vector<Record> records = {{0, "cat", "cat", 0, Split::train}, {1, "cats", "cat", 1, Split::train}};
  const ProbeDataset data(small_manifest(3, 2), records, emb);
  const auto bytes = encode_embeddings(data.embeddings());
  REQUIRE(bytes.size() == 40);
  const std::vector<std::uint8_t> header = {'I', 'P', 'E', 'M', 'B', '1', 0, 0, 2, 0, 0, 0, 3, 0, 0, 0};
  CHECK(std::equal(header.begin(), header.end(), bytes.begin()));
  // 1.0f = 0x3F800000, little-endian
  CHECK(bytes[16] == 0x00);
  CHECK(bytes[17] == 0x00);
  CHECK(bytes[18] == 0x80);
  CHECK(bytes[19] == 0x3F);
  // -2.0f = 0xC0000000 at row 1, col 2
  CHECK(bytes[36] == 0x00);
  CHECK(bytes[39] == 0xC0);

  TempDir dir;
  write_bundle(data, dir.path());
  CHECK(testing::read_bytes(dir / "embeddings.bin") == bytes);
  CHECK(testing::read_text(dir / "records.tsv") ==
        "index\tform\tlemma\tlabel_id\tsplit\n0\tcat\tcat\t0\ttrain\n1\tcats\tcat\t1\ttrain\n");
}

TEST_CASE("random bundles round-trip field for field and bit for bit") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ProbeDataset data = testing::random_dataset(37 + seed, 5 + seed, 3, seed, seed % 2 == 0);
    TempDir a, b;
    write_bundle(data, a.path());
    const ProbeDataset loaded = load_bundle(a.path());
    CHECK(loaded == data);
    write_bundle(loaded, b.path());
    for (const char* name : {"embeddings.bin", "records.tsv", "manifest.json"}) {
      CHECK(testing::read_bytes(a / name) == testing::read_bytes(b / name));
    }
  }
}

TEST_CASE("manifest.json carries exactly the documented keys in order") {
  TempDir dir;
  write_bundle(testing::random_dataset(4, 2, 2, 1), dir.path());
  const std::string text = testing::read_text(dir / "manifest.json");
  std::size_t pos = 0;
  for (const char* key : {"format_version", "language", "category", "layer", "checkpoint_step",
                          "d", "n", "label_inventory", "source"}) {
    const auto at = text.find('"' + std::string(key) + '"', pos);
    REQUIRE_MESSAGE(at != std::string::npos, key);
    pos = at;
  }
}

TEST_CASE("load_bundle reports the file and position of format problems") {
  const ProbeDataset data = testing::random_dataset(5, 3, 2, 7);
  TempDir dir;

  SUBCASE("records.tsv with 5 rows against an embeddings header of N=4") {
    write_bundle(data, dir.path());
    Matrix<float> four(4, 3);
    const auto bytes = encode_embeddings(four);
    std::ofstream(dir / "embeddings.bin", std::ios::binary)
        .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    try {
      load_bundle(dir.path());
      FAIL("expected a count mismatch");
    } catch (const FormatError& e) {
      CHECK(e.file().filename() == "embeddings.bin");
      CHECK(e.offset() == 8);
    }
  }

  SUBCASE("missing file") {
    write_bundle(data, dir.path());
    std::filesystem::remove(dir / "records.tsv");
    try {
      load_bundle(dir.path());
      FAIL("expected a missing-file error");
    } catch (const FormatError& e) {
      CHECK(e.file().filename() == "records.tsv");
    }
  }

  SUBCASE("bad magic") {
    write_bundle(data, dir.path());
    auto bytes = testing::read_bytes(dir / "embeddings.bin");
    bytes[5] = '2';
    std::ofstream(dir / "embeddings.bin", std::ios::binary)
        .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    try {
      load_bundle(dir.path());
      FAIL("expected a magic mismatch");
    } catch (const FormatError& e) {
      CHECK(e.offset() == 0);
    }
  }

  SUBCASE("non-finite value points at its byte offset") {
    write_bundle(data, dir.path());
    auto bytes = testing::read_bytes(dir / "embeddings.bin");
    const std::size_t offset = 16 + 4 * 7;
    const auto nan = std::bit_cast<std::uint32_t>(std::numeric_limits<float>::quiet_NaN());
    for (int b = 0; b < 4; ++b) bytes[offset + b] = static_cast<std::uint8_t>(nan >> (8 * b));
    std::ofstream(dir / "embeddings.bin", std::ios::binary)
        .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    try {
      load_bundle(dir.path());
      FAIL("expected a non-finite error");
    } catch (const FormatError& e) {
      CHECK(e.offset() == offset);
    }
  }

  SUBCASE("unknown label_id names the line") {
    write_bundle(data, dir.path());
    std::string tsv = testing::read_text(dir / "records.tsv");
    const auto third_row = tsv.find("\n2\t");
    REQUIRE(third_row != std::string::npos);
    const auto label_at = tsv.find('\t', tsv.find('\t', tsv.find('\t', third_row + 1) + 1) + 1);
    tsv.replace(label_at + 1, 1, "9");
    overwrite(dir / "records.tsv", tsv);
    try {
      load_bundle(dir.path());
      FAIL("expected a label error");
    } catch (const FormatError& e) {
      CHECK(e.file().filename() == "records.tsv");
      CHECK(e.offset() == 4);
    }
  }

  SUBCASE("manifest with an unexpected key") {
    write_bundle(data, dir.path());
    std::string json = testing::read_text(dir / "manifest.json");
    json.replace(json.find('{'), 1, "{\"extra\": 1,");
    overwrite(dir / "manifest.json", json);
    CHECK_THROWS_AS(load_bundle(dir.path()), FormatError);
  }

  SUBCASE("manifest n disagreeing with records") {
    write_bundle(data, dir.path());
    std::string json = testing::read_text(dir / "manifest.json");
    json.replace(json.find("\"n\": 5"), 6, "\"n\": 6");
    overwrite(dir / "manifest.json", json);
    CHECK_THROWS_AS(load_bundle(dir.path()), FormatError);
  }
}

TEST_CASE("invariants are enforced at construction and before writing") {
  Matrix<float> emb(1, 2);
  emb(0, 1) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(ProbeDataset(small_manifest(2, 1), {{0, "a", "a", 0, Split::train}}, emb),
                  InvalidInput);

  Matrix<float> ok(1, 2);
  CHECK_THROWS_AS(ProbeDataset(small_manifest(2, 1), {{0, "a", "a", 2, Split::train}}, ok),
                  InvalidInput);
  Manifest dup = small_manifest(2, 1);
  dup.label_inventory = {"x", "x"};
  CHECK_THROWS_AS(ProbeDataset(dup, {{0, "a", "a", 0, Split::train}}, ok), InvalidInput);
  CHECK_THROWS_AS(ProbeDataset(small_manifest(2, 2), {{0, "a", "a", 0, Split::train}}, ok),
                  InvalidInput);

  TempDir dir;
  const ProbeDataset tabbed(small_manifest(2, 1), {{0, "a\tb", "a", 0, Split::train}}, ok);
  CHECK_THROWS_AS(write_bundle(tabbed, dir / "out"), InvalidInput);
  CHECK_FALSE(std::filesystem::exists(dir / "out"));
}

TEST_CASE("dataset key names and split names") {
  CHECK(to_string(DatasetKey{"eng", "Number", 13, 2000}) == "eng_Number_L13_S2000");
  CHECK(parse_split("dev") == Split::dev);
  CHECK(to_string(Split::none) == "none");
  CHECK_THROWS_AS(parse_split("valid"), InvalidInput);
  const SplitRatios defaults;
  CHECK(defaults.train == 0.65);
  CHECK(defaults.dev == 0.15);
  CHECK(defaults.test == 0.20);
  CHECK_THROWS_AS((SplitRatios{0.5, 0.5, 0.1}.validate()), InvalidInput);
  CHECK_THROWS_AS((SplitRatios{1.0, 0.0, 0.0}.validate()), InvalidInput);
}

TEST_CASE("lemma split of 100 one-record lemmas at (0.8, 0.1, 0.1)") {
  const ProbeDataset data = testing::random_dataset(100, 2, 2, 3, false);
  const ProbeDataset split = lemma_disjoint_split(data, {0.8, 0.1, 0.1}, 42);
  std::map<Split, std::size_t> sizes;
  for (const auto& r : split.records()) ++sizes[r.split];

  const std::vector<std::size_t> lemma_sizes(100, 1);
  const std::vector<std::uint64_t> weights = {8, 1, 1};
  const auto expected = testing::greedy_split_sizes(lemma_sizes, weights);
  CHECK(sizes[Split::train] == expected[0]);
  CHECK(sizes[Split::dev] == expected[1]);
  CHECK(sizes[Split::test] == expected[2]);
  CHECK(std::abs(static_cast<long>(sizes[Split::train]) - 80) <= 1);
  CHECK(std::abs(static_cast<long>(sizes[Split::dev]) - 10) <= 1);
  CHECK(std::abs(static_cast<long>(sizes[Split::test]) - 10) <= 1);
}

TEST_CASE("lemma split with uneven lemma sizes follows the largest-deficit rule") {
  const ProbeDataset data = testing::random_dataset(300, 2, 2, 8, false, 23);
  const ProbeDataset split = lemma_disjoint_split(data, {0.65, 0.15, 0.20}, 5);
  std::map<Split, std::size_t> sizes;
  for (const auto& r : split.records()) ++sizes[r.split];
  CHECK(sizes[Split::train] + sizes[Split::dev] + sizes[Split::test] == 300);
  // Every lemma has 13 or 14 records, so each split is within one lemma of
  // its target.
  CHECK(std::abs(static_cast<double>(sizes[Split::train]) - 195.0) <= 14.0);
  CHECK(std::abs(static_cast<double>(sizes[Split::dev]) - 45.0) <= 14.0);
  CHECK(std::abs(static_cast<double>(sizes[Split::test]) - 60.0) <= 14.0);
}

TEST_CASE("lemma split errors and determinism") {
  CHECK_THROWS_AS(lemma_disjoint_split(testing::random_dataset(10, 2, 2, 1, false, 2), {}, 0),
                  InvalidInput);
  const ProbeDataset data = testing::random_dataset(60, 2, 2, 4, false, 17);
  CHECK(lemma_disjoint_split(data, {}, 9) == lemma_disjoint_split(data, {}, 9));
  bool any_difference = false;
  for (std::uint64_t seed = 10; seed < 20 && !any_difference; ++seed) {
    any_difference = !(lemma_disjoint_split(data, {}, 9) == lemma_disjoint_split(data, {}, seed));
  }
  CHECK(any_difference);
}

TEST_CASE("lemma-disjointness holds for random datasets") {
  Engine rng = make_engine(2024, 1);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 3 + uniform_below(rng, 200);
    const std::size_t lemmas = 3 + uniform_below(rng, n);
    const ProbeDataset data = testing::random_dataset(n, 2, 2, trial, false, lemmas);
    const ProbeDataset split = lemma_disjoint_split(data, {}, rng());
    std::map<std::string, Split> seen;
    for (const auto& r : split.records()) {
      CHECK(r.split != Split::none);
      const auto [it, inserted] = seen.emplace(r.lemma, r.split);
      if (!inserted) CHECK(it->second == r.split);
    }
    CHECK(split.embeddings() == data.embeddings());
  }
}

TEST_CASE("frequency filter examples") {
  std::vector<std::pair<std::string, Split>> rows;
  for (int i = 0; i < 30; ++i) rows.emplace_back("eat", Split::train);
  for (int i = 0; i < 5; ++i) rows.emplace_back("walk", Split::train);
  for (int i = 0; i < 20; ++i) rows.emplace_back("run", Split::dev);
  for (int i = 0; i < 19; ++i) rows.emplace_back("sit", Split::test);
  for (int i = 0; i < 25; ++i) rows.emplace_back("walk", Split::test);
  const ProbeDataset data = with_lemmas(rows);

  const ProbeDataset filtered = frequency_filter(data, 20);
  std::map<std::pair<std::string, Split>, std::size_t> counts;
  for (const auto& r : filtered.records()) ++counts[{r.lemma, r.split}];
  CHECK(counts[{"eat", Split::train}] == 30);
  CHECK(counts[{"walk", Split::train}] == 0);
  CHECK(counts[{"run", Split::dev}] == 20);
  CHECK(counts[{"sit", Split::test}] == 0);
  CHECK(counts[{"walk", Split::test}] == 25);
  CHECK(filtered.manifest().n == 75);
  CHECK(filtered.size() == 75);

  CHECK(frequency_filter(data, 0) == data);
  CHECK(frequency_filter(data, kDefaultLemmaThreshold) == filtered);
}

TEST_CASE("frequency filter is idempotent and keeps survivor order") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const ProbeDataset data =
        lemma_disjoint_split(testing::random_dataset(400, 3, 2, seed, false, 40), {}, seed);
    for (std::size_t threshold : {1, 5, 10, 12, 20}) {
      const ProbeDataset once = frequency_filter(data, threshold);
      CHECK(frequency_filter(once, threshold) == once);
      CHECK(once.size() <= data.size());
      std::size_t last = 0;
      for (std::size_t i = 0; i < once.size(); ++i) {
        const std::size_t original = once.records()[i].index;
        if (i > 0) CHECK(original > last);
        last = original;
        CHECK(once.records()[i] == data.records()[original]);
        const auto a = once.embedding(i);
        const auto b = data.embedding(original);
        CHECK(std::equal(a.begin(), a.end(), b.begin()));
      }
    }
  }
}
