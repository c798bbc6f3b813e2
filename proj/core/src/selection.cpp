#include "xlprobe/selection.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "detail/io_util.hpp"
#include "xlprobe/error.hpp"

namespace xlprobe {

namespace fs = std::filesystem;

namespace {

void check_dev(const LinearProbe& probe, const DataView& dev) {
  if (dev.data == nullptr || dev.empty()) throw InvalidInput("dev split is empty");
  if (dev.data->dim() != probe.dim()) throw InvalidInput("dataset and probe disagree on d");
}

double log_sum_exp(const double* z, std::size_t n) {
  double m = z[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, z[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(z[i] - m);
  return m + std::log(s);
}

// Logits of every dev example under `mask`, |dev| x |labels|.
Matrix<double> dev_logits(const LinearProbe& probe, const DataView& dev, const Mask& mask) {
  Matrix<double> logits(dev.size(), probe.num_labels());
  for (std::size_t i = 0; i < dev.size(); ++i) {
    const auto h = dev.data->embedding(dev.rows[i]);
    for (std::size_t c = 0; c < probe.num_labels(); ++c) {
      const auto w = probe.weights.row(c);
      double acc = 0.0;
      for (std::size_t j = 0; j < w.size(); ++j) {
        if (mask.contains(j)) acc += static_cast<double>(w[j]) * static_cast<double>(h[j]);
      }
      logits(i, c) = acc;
    }
  }
  return logits;
}

std::vector<double> candidates_from_logits(const LinearProbe& probe, const DataView& dev,
                                           const Mask& current, const Matrix<double>& logits) {
  const std::size_t d = probe.dim();
  const std::size_t num_labels = probe.num_labels();
  std::vector<double> out(d, -std::numeric_limits<double>::infinity());
  std::vector<double> z(num_labels);
  for (std::size_t j = 0; j < d; ++j) {
    if (current.contains(j)) continue;
    double total = 0.0;
    for (std::size_t i = 0; i < dev.size(); ++i) {
      const double hj = static_cast<double>(dev.data->embedding(dev.rows[i])[j]);
      for (std::size_t c = 0; c < num_labels; ++c) {
        z[c] = logits(i, c) + static_cast<double>(probe.weights(c, j)) * hj;
      }
      const std::size_t label = dev.data->records()[dev.rows[i]].label_id;
      total += z[label] - log_sum_exp(z.data(), num_labels);
    }
    out[j] = total;
  }
  return out;
}

std::uint64_t binomial_capped(std::uint64_t n, std::uint64_t k, std::uint64_t cap) {
  k = std::min(k, n - k);
  std::uint64_t result = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    // result * (n - k + i) / i stays integral at each step.
    const std::uint64_t numer = n - k + i;
    if (result > (std::numeric_limits<std::uint64_t>::max() / numer)) return cap + 1;
    result = result * numer / i;
    if (result > cap) return cap + 1;
  }
  return result;
}

nlohmann::ordered_json key_json(const DatasetKey& key) {
  nlohmann::ordered_json j;
  j["language"] = key.language;
  j["category"] = key.category;
  j["layer"] = key.layer;
  j["checkpoint_step"] = key.checkpoint_step;
  return j;
}

}  // namespace

std::vector<double> candidate_logliks(const LinearProbe& probe, const DataView& dev,
                                      const Mask& current) {
  check_dev(probe, dev);
  if (current.dim() != probe.dim()) throw InvalidInput("mask and probe disagree on d");
  return candidates_from_logits(probe, dev, current, dev_logits(probe, dev, current));
}

SelectionResult greedy_select(const LinearProbe& probe, const DataView& dev, std::size_t k) {
  check_dev(probe, dev);
  const std::size_t d = probe.dim();
  if (k == 0) throw InvalidInput("k must be at least 1");
  if (k > d) {
    throw InvalidInput("k=" + std::to_string(k) + " exceeds d=" + std::to_string(d));
  }

  SelectionResult result;
  result.k = k;
  result.d = d;
  result.dataset_key = dev.data->key();

  Mask current(d);
  Matrix<double> logits(dev.size(), probe.num_labels());
  for (std::size_t step = 0; step < k; ++step) {
    const auto scores = candidates_from_logits(probe, dev, current, logits);
    std::size_t best = d;
    for (std::size_t j = 0; j < d; ++j) {
      if (current.contains(j)) continue;
      if (best == d || scores[j] > scores[best]) best = j;
    }
    current.insert(best);
    result.ordered_dims.push_back(best);
    for (std::size_t i = 0; i < dev.size(); ++i) {
      const double hj = static_cast<double>(dev.data->embedding(dev.rows[i])[best]);
      for (std::size_t c = 0; c < probe.num_labels(); ++c) {
        logits(i, c) += static_cast<double>(probe.weights(c, best)) * hj;
      }
    }
    result.loglik_trace.push_back(-masked_nll(probe, dev, current));
  }
  return result;
}

SelectionResult greedy_select(const LinearProbe& probe, const ProbeDataset& data, std::size_t k) {
  return greedy_select(probe, view(data, Split::dev), k);
}

SelectionResult exhaustive_select(const LinearProbe& probe, const DataView& dev, std::size_t k,
                                  std::uint64_t* subsets_scanned) {
  check_dev(probe, dev);
  const std::size_t d = probe.dim();
  if (k == 0) throw InvalidInput("k must be at least 1");
  if (k > d) {
    throw InvalidInput("k=" + std::to_string(k) + " exceeds d=" + std::to_string(d));
  }
  if (binomial_capped(d, k, kExhaustiveLimit) > kExhaustiveLimit) {
    throw InvalidInput("C(" + std::to_string(d) + ", " + std::to_string(k) +
                       ") exceeds the exhaustive search limit");
  }

  std::vector<std::size_t> combo(k);
  for (std::size_t i = 0; i < k; ++i) combo[i] = i;
  std::vector<std::size_t> best_combo;
  double best_value = -std::numeric_limits<double>::infinity();
  std::uint64_t scanned = 0;
  while (true) {
    const double value = -masked_nll(probe, dev, Mask::from_indices(d, combo));
    ++scanned;
    if (best_combo.empty() || value > best_value) {
      best_value = value;
      best_combo = combo;
    }
    // Advance to the next combination in lexicographic order.
    std::size_t i = k;
    while (i > 0 && combo[i - 1] == d - k + (i - 1)) --i;
    if (i == 0) break;
    ++combo[i - 1];
    for (std::size_t t = i; t < k; ++t) combo[t] = combo[t - 1] + 1;
  }
  if (subsets_scanned != nullptr) *subsets_scanned = scanned;

  SelectionResult result;
  result.ordered_dims = std::move(best_combo);
  result.loglik_trace = {best_value};
  result.k = k;
  result.d = d;
  result.dataset_key = dev.data->key();
  return result;
}

Mask selection_to_mask(const SelectionResult& result, std::size_t d) {
  return Mask::from_indices(d, result.ordered_dims);
}

void write_selection(const SelectionFile& file, const fs::path& path) {
  const SelectionResult& r = file.result;
  nlohmann::ordered_json j;
  j["dataset_key"] = key_json(r.dataset_key);
  j["k"] = r.k;
  j["d"] = r.d;
  std::vector<std::size_t> one_based;
  for (std::size_t dim : r.ordered_dims) one_based.push_back(dim + 1);
  j["ordered_dims"] = one_based;
  j["loglik_trace"] = r.loglik_trace;
  j["probe_file"] = file.probe_file;
  j["created_at"] = file.created_at;
  if (path.has_parent_path()) detail::ensure_directory(path.parent_path());
  detail::write_file(path, j.dump(2) + "\n");
}

SelectionFile load_selection(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path, 0, "cannot open file");
  SelectionFile file;
  try {
    const auto j = nlohmann::json::parse(in);
    const auto& key = j.at("dataset_key");
    SelectionResult& r = file.result;
    r.dataset_key.language = key.at("language").get<std::string>();
    r.dataset_key.category = key.at("category").get<std::string>();
    r.dataset_key.layer = key.at("layer").get<int>();
    r.dataset_key.checkpoint_step = key.at("checkpoint_step").get<std::int64_t>();
    r.k = j.at("k").get<std::size_t>();
    r.d = j.at("d").get<std::size_t>();
    for (auto dim : j.at("ordered_dims").get<std::vector<std::int64_t>>()) {
      if (dim < 1 || static_cast<std::size_t>(dim) > r.d) {
        throw FormatError(path, 0, "ordered_dims entry " + std::to_string(dim) +
                                       " outside [1, " + std::to_string(r.d) + "]");
      }
      r.ordered_dims.push_back(static_cast<std::size_t>(dim - 1));
    }
    r.loglik_trace = j.at("loglik_trace").get<std::vector<double>>();
    file.probe_file = j.at("probe_file").get<std::string>();
    file.created_at = j.at("created_at").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path, 0, std::string("malformed selection.json: ") + e.what());
  }
  if (file.result.ordered_dims.size() != file.result.k) {
    throw FormatError(path, 0, "ordered_dims length does not match k");
  }
  return file;
}

std::string selection_timestamp() {
  std::time_t t = 0;
  if (const char* env = std::getenv("SOURCE_DATE_EPOCH")) {
    long long v = 0;
    const char* end = env + std::char_traits<char>::length(env);
    if (auto [p, ec] = std::from_chars(env, end, v); ec == std::errc{} && p == end) {
      t = static_cast<std::time_t>(v);
    }
  }
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace xlprobe
