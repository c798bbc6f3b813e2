#include "xlprobe/dataset.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "detail/io_util.hpp"
#include "xlprobe/error.hpp"
#include "xlprobe/random.hpp"

namespace xlprobe {

namespace fs = std::filesystem;

namespace {

using detail::get_u32;
using detail::put_u32;
using detail::read_file;

constexpr std::array<char, 8> kEmbeddingMagic = {'I', 'P', 'E', 'M', 'B', '1', '\0', '\0'};
constexpr std::size_t kEmbeddingHeaderBytes = 16;
constexpr const char* kRecordsHeader = "index\tform\tlemma\tlabel_id\tsplit";

template <class Int>
bool parse_int(std::string_view text, Int& out) {
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc{} && ptr == end;
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

Manifest parse_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path, 0, "cannot open file");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path, e.byte, "invalid JSON");
  }
  static const std::set<std::string> kKeys = {"format_version", "language", "category",
                                              "layer",          "checkpoint_step", "d",
                                              "n",              "label_inventory", "source"};
  if (!j.is_object()) throw FormatError(path, 0, "manifest must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!kKeys.contains(key)) throw FormatError(path, 0, "unexpected key '" + key + "'");
  }
  for (const auto& key : kKeys) {
    if (!j.contains(key)) throw FormatError(path, 0, "missing key '" + key + "'");
  }
  Manifest m;
  try {
    m.format_version = j.at("format_version").get<int>();
    m.language = j.at("language").get<std::string>();
    m.category = j.at("category").get<std::string>();
    m.layer = j.at("layer").get<int>();
    m.checkpoint_step = j.at("checkpoint_step").get<std::int64_t>();
    const auto d = j.at("d").get<std::int64_t>();
    const auto n = j.at("n").get<std::int64_t>();
    if (d <= 0) throw FormatError(path, 0, "d must be positive");
    if (n < 0) throw FormatError(path, 0, "n must be non-negative");
    m.d = static_cast<std::size_t>(d);
    m.n = static_cast<std::size_t>(n);
    m.label_inventory = j.at("label_inventory").get<std::vector<std::string>>();
    m.source = j.at("source").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path, 0, std::string("bad field type: ") + e.what());
  }
  if (m.format_version != kBundleFormatVersion) {
    throw FormatError(path, 0, "unsupported format_version " + std::to_string(m.format_version));
  }
  return m;
}

std::vector<Record> parse_records(const fs::path& path, std::size_t num_labels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path, 0, "cannot open file");
  std::vector<Record> records;
  std::string line;
  std::uint64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != kRecordsHeader) throw FormatError(path, line_no, "bad header");
      continue;
    }
    if (line.empty()) throw FormatError(path, line_no, "empty row");
    const auto fields = split_tabs(line);
    if (fields.size() != 5) throw FormatError(path, line_no, "expected 5 tab-separated fields");
    Record r;
    r.form = std::string(fields[1]);
    r.lemma = std::string(fields[2]);
    if (!parse_int(fields[0], r.index)) throw FormatError(path, line_no, "bad index");
    if (!parse_int(fields[3], r.label_id)) throw FormatError(path, line_no, "bad label_id");
    if (r.label_id >= num_labels) {
      throw FormatError(path, line_no, "label_id " + std::to_string(r.label_id) +
                                           " outside label_inventory");
    }
    try {
      r.split = parse_split(fields[4]);
    } catch (const InvalidInput&) {
      throw FormatError(path, line_no, "unknown split '" + std::string(fields[4]) + "'");
    }
    records.push_back(std::move(r));
  }
  if (line_no == 0) throw FormatError(path, 0, "missing header");
  return records;
}

Matrix<float> parse_embeddings(const fs::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < kEmbeddingHeaderBytes) throw FormatError(path, 0, "truncated header");
  if (!std::equal(kEmbeddingMagic.begin(), kEmbeddingMagic.end(), bytes.begin())) {
    throw FormatError(path, 0, "bad magic");
  }
  const std::size_t n = get_u32(bytes.data() + 8);
  const std::size_t d = get_u32(bytes.data() + 12);
  const std::size_t expected = kEmbeddingHeaderBytes + n * d * 4;
  if (bytes.size() != expected) {
    throw FormatError(path, std::min(bytes.size(), expected),
                      "payload size " + std::to_string(bytes.size() - kEmbeddingHeaderBytes) +
                          " does not match N*d*4 = " + std::to_string(n * d * 4));
  }
  Matrix<float> m(n, d);
  auto values = m.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t offset = kEmbeddingHeaderBytes + 4 * i;
    const float v = std::bit_cast<float>(get_u32(bytes.data() + offset));
    if (!std::isfinite(v)) throw FormatError(path, offset, "non-finite embedding value");
    values[i] = v;
  }
  return m;
}

void check_writable_text(std::string_view text, const char* field) {
  if (text.find_first_of("\t\n\r") != std::string_view::npos) {
    throw InvalidInput(std::string(field) + " contains a tab or newline: '" + std::string(text) +
                       "'");
  }
}

}  // namespace

std::string_view to_string(Split split) noexcept {
  switch (split) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
    case Split::none: return "none";
  }
  return "none";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "dev") return Split::dev;
  if (name == "test") return Split::test;
  if (name == "none") return Split::none;
  throw InvalidInput("unknown split '" + std::string(name) + "'");
}

std::string to_string(const DatasetKey& key) {
  return key.language + "_" + key.category + "_L" + std::to_string(key.layer) + "_S" +
         std::to_string(key.checkpoint_step);
}

ProbeDataset::ProbeDataset(Manifest manifest, std::vector<Record> records,
                           Matrix<float> embeddings)
    : manifest_(std::move(manifest)),
      records_(std::move(records)),
      embeddings_(std::move(embeddings)) {
  if (manifest_.format_version != kBundleFormatVersion) {
    throw InvalidInput("unsupported format_version");
  }
  if (manifest_.d == 0) throw InvalidInput("d must be positive");
  if (manifest_.n != records_.size() || embeddings_.rows() != records_.size()) {
    throw InvalidInput("count mismatch: manifest n=" + std::to_string(manifest_.n) +
                       ", records=" + std::to_string(records_.size()) +
                       ", embedding rows=" + std::to_string(embeddings_.rows()));
  }
  if (embeddings_.cols() != manifest_.d && !(records_.empty() && embeddings_.empty())) {
    throw InvalidInput("embedding width " + std::to_string(embeddings_.cols()) +
                       " does not match d=" + std::to_string(manifest_.d));
  }
  if (records_.empty()) embeddings_ = Matrix<float>(0, manifest_.d);
  std::set<std::string_view> seen;
  for (const auto& label : manifest_.label_inventory) {
    if (!seen.insert(label).second) throw InvalidInput("duplicate label '" + label + "'");
  }
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (records_[i].label_id >= manifest_.label_inventory.size()) {
      throw InvalidInput("record " + std::to_string(i) + " has label_id outside inventory");
    }
  }
  for (float v : embeddings_.values()) {
    if (!std::isfinite(v)) throw InvalidInput("non-finite embedding value");
  }
}

std::vector<std::size_t> ProbeDataset::rows_in(Split split) const {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < records_.size(); ++i) {
    if (records_[i].split == split) rows.push_back(i);
  }
  return rows;
}

bool ProbeDataset::splits_assigned() const noexcept {
  return std::none_of(records_.begin(), records_.end(),
                      [](const Record& r) { return r.split == Split::none; });
}

DataView view(const ProbeDataset& data, Split split) { return {&data, data.rows_in(split)}; }

ProbeDataset load_bundle(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw FormatError(dir, 0, "bundle directory not found");
  for (const char* name : {"manifest.json", "records.tsv", "embeddings.bin"}) {
    if (!fs::exists(dir / name)) throw FormatError(dir / name, 0, "missing file");
  }
  Manifest manifest = parse_manifest(dir / "manifest.json");
  std::vector<Record> records = parse_records(dir / "records.tsv", manifest.label_inventory.size());
  Matrix<float> embeddings = parse_embeddings(dir / "embeddings.bin");

  if (embeddings.rows() != records.size()) {
    throw FormatError(dir / "embeddings.bin", 8,
                      "header declares N=" + std::to_string(embeddings.rows()) +
                          " but records.tsv has " + std::to_string(records.size()) + " rows");
  }
  if (manifest.n != records.size()) {
    throw FormatError(dir / "manifest.json", 0,
                      "n=" + std::to_string(manifest.n) + " but records.tsv has " +
                          std::to_string(records.size()) + " rows");
  }
  if (embeddings.cols() != manifest.d) {
    throw FormatError(dir / "embeddings.bin", 12,
                      "header declares d=" + std::to_string(embeddings.cols()) +
                          " but manifest has d=" + std::to_string(manifest.d));
  }
  try {
    return ProbeDataset(std::move(manifest), std::move(records), std::move(embeddings));
  } catch (const FormatError&) {
    throw;
  } catch (const InvalidInput& e) {
    throw FormatError(dir / "manifest.json", 0, e.what());
  }
}

Manifest load_manifest(const fs::path& dir) { return parse_manifest(dir / "manifest.json"); }

std::vector<std::uint8_t> encode_embeddings(const Matrix<float>& embeddings) {
  std::vector<std::uint8_t> out(kEmbeddingMagic.begin(), kEmbeddingMagic.end());
  out.reserve(kEmbeddingHeaderBytes + embeddings.size() * 4);
  put_u32(out, static_cast<std::uint32_t>(embeddings.rows()));
  put_u32(out, static_cast<std::uint32_t>(embeddings.cols()));
  for (float v : embeddings.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

void write_bundle(const ProbeDataset& data, const fs::path& dir) {
  for (float v : data.embeddings().values()) {
    if (!std::isfinite(v)) throw InvalidInput("non-finite embedding value");
  }
  for (const auto& r : data.records()) {
    check_writable_text(r.form, "form");
    check_writable_text(r.lemma, "lemma");
  }
  detail::ensure_directory(dir);

  const Manifest& m = data.manifest();
  nlohmann::ordered_json j;
  j["format_version"] = m.format_version;
  j["language"] = m.language;
  j["category"] = m.category;
  j["layer"] = m.layer;
  j["checkpoint_step"] = m.checkpoint_step;
  j["d"] = m.d;
  j["n"] = m.n;
  j["label_inventory"] = m.label_inventory;
  j["source"] = m.source;
  detail::write_file(dir / "manifest.json", j.dump(2) + "\n");
  {
    std::ofstream out(dir / "records.tsv", std::ios::binary);
    out << kRecordsHeader << '\n';
    for (const auto& r : data.records()) {
      out << r.index << '\t' << r.form << '\t' << r.lemma << '\t' << r.label_id << '\t'
          << to_string(r.split) << '\n';
    }
    if (!out) throw Error("I/O failure writing " + (dir / "records.tsv").string());
  }
  detail::write_file(dir / "embeddings.bin", encode_embeddings(data.embeddings()));
}

void SplitRatios::validate() const {
  if (!(train > 0 && dev > 0 && test > 0)) throw InvalidInput("split ratios must be positive");
  if (std::abs(train + dev + test - 1.0) > 1e-9) {
    throw InvalidInput("split ratios must sum to 1");
  }
}

ProbeDataset lemma_disjoint_split(const ProbeDataset& data, const SplitRatios& ratios,
                                  std::uint64_t seed) {
  ratios.validate();
  // Distinct lemmas in order of first appearance, with their record counts.
  std::vector<std::string> lemmas;
  std::unordered_map<std::string, std::size_t> lemma_id;
  std::vector<std::size_t> lemma_count;
  for (const auto& r : data.records()) {
    auto [it, inserted] = lemma_id.try_emplace(r.lemma, lemmas.size());
    if (inserted) {
      lemmas.push_back(r.lemma);
      lemma_count.push_back(0);
    }
    ++lemma_count[it->second];
  }
  if (lemmas.size() < 3) {
    throw InvalidInput("need at least 3 distinct lemmas to populate train/dev/test, got " +
                       std::to_string(lemmas.size()));
  }

  std::vector<std::size_t> order(lemmas.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Engine rng = make_engine(seed, 0);
  shuffle(std::span<std::size_t>(order), rng);

  const std::array<double, 3> target = {ratios.train, ratios.dev, ratios.test};
  const std::array<Split, 3> splits = {Split::train, Split::dev, Split::test};
  const auto total = static_cast<double>(data.size());
  std::array<std::size_t, 3> assigned = {0, 0, 0};
  std::vector<Split> lemma_split(lemmas.size(), Split::none);
  for (std::size_t id : order) {
    std::size_t best = 0;
    double best_deficit = target[0] - static_cast<double>(assigned[0]) / total;
    for (std::size_t s = 1; s < 3; ++s) {
      const double deficit = target[s] - static_cast<double>(assigned[s]) / total;
      if (deficit > best_deficit) {
        best = s;
        best_deficit = deficit;
      }
    }
    lemma_split[id] = splits[best];
    assigned[best] += lemma_count[id];
  }

  std::vector<Record> records = data.records();
  for (auto& r : records) r.split = lemma_split[lemma_id.at(r.lemma)];
  return ProbeDataset(data.manifest(), std::move(records), data.embeddings());
}

ProbeDataset frequency_filter(const ProbeDataset& data, std::size_t threshold) {
  std::map<std::pair<Split, std::string_view>, std::size_t> counts;
  for (const auto& r : data.records()) ++counts[{r.split, r.lemma}];

  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& r = data.records()[i];
    if (counts.at({r.split, r.lemma}) >= threshold) keep.push_back(i);
  }
  if (keep.size() == data.size()) return data;

  Manifest manifest = data.manifest();
  manifest.n = keep.size();
  std::vector<Record> records;
  records.reserve(keep.size());
  Matrix<float> embeddings(keep.size(), data.dim());
  for (std::size_t out = 0; out < keep.size(); ++out) {
    records.push_back(data.records()[keep[out]]);
    const auto src = data.embedding(keep[out]);
    std::copy(src.begin(), src.end(), embeddings.row(out).begin());
  }
  return ProbeDataset(std::move(manifest), std::move(records), std::move(embeddings));
}

}  // namespace xlprobe
