#include "xlprobe/overlap.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include <json.hpp>

#include "detail/io_util.hpp"
#include "xlprobe/csv.hpp"
#include "xlprobe/error.hpp"

namespace xlprobe {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kExactLimit = std::uint64_t{1} << 53;

__extension__ using u128 = unsigned __int128;

// C(n, r) when it is at most `cap`, otherwise nullopt.
std::optional<std::uint64_t> binomial_upto(std::uint64_t n, std::uint64_t r, std::uint64_t cap) {
  if (r > n) return 0;
  r = std::min(r, n - r);
  u128 acc = 1;
  for (std::uint64_t i = 1; i <= r; ++i) {
    acc = acc * (n - r + i) / i;
    if (acc > cap) return std::nullopt;
  }
  return static_cast<std::uint64_t>(acc);
}

double log_binomial(double n, double r) {
  return std::lgamma(n + 1.0) - std::lgamma(r + 1.0) - std::lgamma(n - r + 1.0);
}

void check_hypergeom_args(std::size_t d, std::size_t k, std::size_t m) {
  if (!(m <= k && k <= d)) {
    throw InvalidInput("hypergeometric tail needs 0 <= m <= k <= d, got d=" + std::to_string(d) +
                       " k=" + std::to_string(k) + " m=" + std::to_string(m));
  }
}

nlohmann::ordered_json matrix_rows(const Matrix<double>& m) {
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    rows.push_back(std::vector<double>(m.row(i).begin(), m.row(i).end()));
  }
  return rows;
}

Matrix<double> parse_rows(const nlohmann::json& j, std::size_t n, const fs::path& path) {
  if (!j.is_array() || j.size() != n) throw FormatError(path, 0, "matrix has wrong row count");
  Matrix<double> m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = j[i].get<std::vector<double>>();
    if (row.size() != n) throw FormatError(path, 0, "matrix has wrong column count");
    std::copy(row.begin(), row.end(), m.row(i).begin());
  }
  return m;
}

}  // namespace

double OverlapMatrix::threshold() const {
  const std::size_t n = languages.size();
  const std::size_t pairs = n * (n - 1) / 2;
  return bonferroni && pairs > 0 ? alpha / static_cast<double>(pairs) : alpha;
}

std::optional<std::size_t> OverlapMatrix::index_of(const std::string& language) const {
  const auto it = std::find(languages.begin(), languages.end(), language);
  if (it == languages.end()) return std::nullopt;
  return static_cast<std::size_t>(it - languages.begin());
}

double overlap_rate(const SelectionResult& a, const SelectionResult& b) {
  if (a.k != b.k) {
    throw InvalidInput("selections have different k (" + std::to_string(a.k) + " vs " +
                       std::to_string(b.k) + ")");
  }
  if (a.d != b.d) {
    throw InvalidInput("selections have different d (" + std::to_string(a.d) + " vs " +
                       std::to_string(b.d) + ")");
  }
  if (a.k == 0) throw InvalidInput("overlap rate of empty selections");
  const std::set<std::size_t> left(a.ordered_dims.begin(), a.ordered_dims.end());
  std::size_t shared = 0;
  for (std::size_t dim : std::set<std::size_t>(b.ordered_dims.begin(), b.ordered_dims.end())) {
    shared += left.contains(dim) ? 1 : 0;
  }
  return static_cast<double>(shared) / static_cast<double>(a.k);
}

double hypergeom_log_pvalue(std::size_t d, std::size_t k, std::size_t m) {
  check_hypergeom_args(d, k, m);
  const std::size_t lowest = 2 * k > d ? 2 * k - d : 0;
  if (m <= lowest) return 0.0;
  if (binomial_upto(d, k, kExactLimit)) return std::log(hypergeom_pvalue(d, k, m));

  const double log_total = log_binomial(static_cast<double>(d), static_cast<double>(k));
  std::vector<double> terms;
  for (std::size_t i = m; i <= k; ++i) {
    terms.push_back(log_binomial(static_cast<double>(k), static_cast<double>(i)) +
                    log_binomial(static_cast<double>(d - k), static_cast<double>(k - i)) -
                    log_total);
  }
  const double peak = *std::max_element(terms.begin(), terms.end());
  double sum = 0.0;
  for (double t : terms) sum += std::exp(t - peak);
  return std::min(0.0, peak + std::log(sum));
}

double hypergeom_pvalue(std::size_t d, std::size_t k, std::size_t m) {
  check_hypergeom_args(d, k, m);
  const std::size_t lowest = 2 * k > d ? 2 * k - d : 0;
  if (m <= lowest) return 1.0;
  if (const auto total = binomial_upto(d, k, kExactLimit)) {
    // Vandermonde: every term is bounded by the total, so all integer
    // arithmetic below is exact and the final division is correctly rounded.
    std::uint64_t tail = 0;
    for (std::size_t i = m; i <= k; ++i) {
      tail += *binomial_upto(k, i, kExactLimit) * *binomial_upto(d - k, k - i, kExactLimit);
    }
    return static_cast<double>(tail) / static_cast<double>(*total);
  }
  return std::exp(hypergeom_log_pvalue(d, k, m));
}

OverlapMatrix pairwise_matrix(std::span<const SelectionResult> selections, double alpha,
                              bool bonferroni) {
  if (selections.size() < 2) throw InvalidInput("overlap needs at least 2 languages");
  if (!(alpha > 0 && alpha < 1)) throw InvalidInput("alpha must lie in (0, 1)");
  const SelectionResult& first = selections.front();
  std::set<std::string> seen;
  for (const auto& s : selections) {
    const auto& key = s.dataset_key;
    if (s.k != first.k || s.d != first.d || key.category != first.dataset_key.category ||
        key.layer != first.dataset_key.layer ||
        key.checkpoint_step != first.dataset_key.checkpoint_step) {
      throw InvalidInput("selection for " + to_string(key) +
                         " disagrees with " + to_string(first.dataset_key) +
                         " on k, d, category, layer or checkpoint");
    }
    if (!seen.insert(key.language).second) {
      throw InvalidInput("language '" + key.language + "' supplied twice");
    }
  }

  OverlapMatrix out;
  out.category = first.dataset_key.category;
  out.layer = first.dataset_key.layer;
  out.checkpoint_step = first.dataset_key.checkpoint_step;
  out.k = first.k;
  out.d = first.d;
  out.alpha = alpha;
  out.bonferroni = bonferroni;
  const std::size_t n = selections.size();
  for (const auto& s : selections) out.languages.push_back(s.dataset_key.language);
  out.rates = Matrix<double>(n, n);
  out.pvalues = Matrix<double>(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    out.rates(i, i) = 1.0;
    out.pvalues(i, i) = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double rate = overlap_rate(selections[i], selections[j]);
      const auto shared = static_cast<std::size_t>(std::llround(rate * static_cast<double>(out.k)));
      const double p = hypergeom_pvalue(out.d, out.k, shared);
      out.rates(i, j) = out.rates(j, i) = rate;
      out.pvalues(i, j) = out.pvalues(j, i) = p;
    }
  }
  return out;
}

OverlapMatrix pairwise_matrix(const std::map<std::string, SelectionResult>& by_language,
                              double alpha, bool bonferroni) {
  std::vector<SelectionResult> selections;
  for (const auto& [language, selection] : by_language) {
    if (selection.dataset_key.language != language) {
      throw InvalidInput("selection keyed '" + language + "' belongs to '" +
                         selection.dataset_key.language + "'");
    }
    selections.push_back(selection);
  }
  return pairwise_matrix(selections, alpha, bonferroni);
}

double average_rate(const OverlapMatrix& matrix) {
  const std::size_t n = matrix.num_languages();
  if (n < 2) throw InvalidInput("average overlap needs at least 2 languages");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      sum += matrix.rates(i, j);
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

OverlapSeries layer_average_series(std::span<const OverlapMatrix> matrices,
                                   std::span<const int> layers,
                                   const std::optional<LanguagePair>& pair) {
  if (layers.empty()) throw InvalidInput("no layers requested");
  if (matrices.empty()) throw InvalidInput("no overlap matrices supplied");
  const std::string& category = matrices.front().category;
  // step -> layer -> value
  std::map<std::int64_t, std::map<int, double>> table;
  for (const auto& m : matrices) {
    if (m.category != category) {
      throw InvalidInput("series mixes categories '" + category + "' and '" + m.category + "'");
    }
    if (std::find(layers.begin(), layers.end(), m.layer) == layers.end()) continue;
    double value;
    if (pair) {
      const auto a = m.index_of(pair->first);
      const auto b = m.index_of(pair->second);
      if (!a || !b) {
        throw InvalidInput("pair " + pair->first + "-" + pair->second + " missing from " +
                           category + " layer " + std::to_string(m.layer) + " step " +
                           std::to_string(m.checkpoint_step));
      }
      value = m.rates(*a, *b);
    } else {
      value = average_rate(m);
    }
    if (!table[m.checkpoint_step].emplace(m.layer, value).second) {
      throw InvalidInput("duplicate matrix for layer " + std::to_string(m.layer) + " step " +
                         std::to_string(m.checkpoint_step));
    }
  }

  OverlapSeries series;
  series.category = category;
  series.layers.assign(layers.begin(), layers.end());
  series.pair = pair;
  for (const auto& [step, by_layer] : table) {
    double sum = 0.0;
    for (int layer : layers) {
      const auto it = by_layer.find(layer);
      if (it == by_layer.end()) {
        throw InvalidInput("checkpoint " + std::to_string(step) + " of " + category +
                           " has no matrix for layer " + std::to_string(layer));
      }
      sum += it->second;
    }
    series.checkpoint_steps.push_back(step);
    series.values.push_back(sum / static_cast<double>(layers.size()));
  }
  if (series.checkpoint_steps.empty()) {
    throw InvalidInput("no matrices for the requested layers in " + category);
  }
  return series;
}

OverlapSeries category_average(std::span<const OverlapSeries> series) {
  if (series.empty()) throw InvalidInput("no series to average");
  std::map<std::int64_t, std::pair<double, std::size_t>> by_step;
  OverlapSeries out;
  out.layers = series.front().layers;
  out.pair = series.front().pair;
  for (std::size_t s = 0; s < series.size(); ++s) {
    const OverlapSeries& in = series[s];
    if (in.layers != out.layers || in.pair != out.pair) {
      throw InvalidInput("cannot average series over different layers or pairs");
    }
    if (in.checkpoint_steps.size() != in.values.size()) {
      throw InvalidInput("series " + in.category + " has mismatched steps and values");
    }
    out.category += (s == 0 ? "" : "+") + in.category;
    for (std::size_t i = 0; i < in.values.size(); ++i) {
      auto& acc = by_step[in.checkpoint_steps[i]];
      acc.first += in.values[i];
      acc.second += 1;
    }
  }
  for (const auto& [step, acc] : by_step) {
    if (acc.second != series.size()) continue;
    out.checkpoint_steps.push_back(step);
    out.values.push_back(acc.first / static_cast<double>(acc.second));
  }
  if (out.checkpoint_steps.empty()) throw InvalidInput("series share no checkpoint steps");
  return out;
}

void write_overlap_csv(std::ostream& out, std::span<const OverlapMatrix> matrices, bool header) {
  if (header) out << "category,layer,checkpoint_step,lang_a,lang_b,rate,p_value,significant\n";
  for (const auto& m : matrices) {
    for (std::size_t i = 0; i < m.num_languages(); ++i) {
      for (std::size_t j = i + 1; j < m.num_languages(); ++j) {
        out << m.category << ',' << m.layer << ',' << m.checkpoint_step << ',' << m.languages[i]
            << ',' << m.languages[j] << ',' << format_number(m.rates(i, j)) << ','
            << format_number(m.pvalues(i, j)) << ',' << (m.significant(i, j) ? 1 : 0) << '\n';
      }
    }
  }
}

std::string matrix_file_name(const OverlapMatrix& matrix) {
  return matrix.category + "_L" + std::to_string(matrix.layer) + "_S" +
         std::to_string(matrix.checkpoint_step) + ".json";
}

void write_matrix_json(const OverlapMatrix& matrix, const fs::path& path) {
  nlohmann::ordered_json j;
  j["languages"] = matrix.languages;
  j["category"] = matrix.category;
  j["layer"] = matrix.layer;
  j["checkpoint_step"] = matrix.checkpoint_step;
  j["k"] = matrix.k;
  j["d"] = matrix.d;
  j["alpha"] = matrix.alpha;
  j["bonferroni"] = matrix.bonferroni;
  j["rates"] = matrix_rows(matrix.rates);
  j["pvalues"] = matrix_rows(matrix.pvalues);
  auto significant = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < matrix.num_languages(); ++i) {
    std::vector<int> row;
    for (std::size_t c = 0; c < matrix.num_languages(); ++c) {
      row.push_back(i != c && matrix.significant(i, c) ? 1 : 0);
    }
    significant.push_back(row);
  }
  j["significant"] = significant;
  if (path.has_parent_path()) detail::ensure_directory(path.parent_path());
  detail::write_file(path, j.dump(2) + "\n");
}

OverlapMatrix load_matrix_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(path, 0, "cannot open file");
  OverlapMatrix m;
  try {
    const auto j = nlohmann::json::parse(in);
    m.languages = j.at("languages").get<std::vector<std::string>>();
    m.category = j.at("category").get<std::string>();
    m.layer = j.at("layer").get<int>();
    m.checkpoint_step = j.at("checkpoint_step").get<std::int64_t>();
    m.k = j.at("k").get<std::size_t>();
    m.d = j.at("d").get<std::size_t>();
    m.alpha = j.at("alpha").get<double>();
    m.bonferroni = j.at("bonferroni").get<bool>();
    m.rates = parse_rows(j.at("rates"), m.languages.size(), path);
    m.pvalues = parse_rows(j.at("pvalues"), m.languages.size(), path);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path, 0, std::string("malformed overlap matrix: ") + e.what());
  }
  return m;
}

}  // namespace xlprobe
