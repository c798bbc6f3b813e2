#include "xlprobe/analysis.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <tuple>

#include <boost/math/special_functions/beta.hpp>
#include <json.hpp>

#include "detail/io_util.hpp"
#include "xlprobe/csv.hpp"
#include "xlprobe/error.hpp"

namespace xlprobe {

namespace {

template <class T>
T parse_field(const std::string& text, const std::filesystem::path& path, std::uint64_t line,
              const char* what) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) {
    throw FormatError(path, line, std::string("bad ") + what + " '" + text + "'");
  }
  return value;
}

// Pearson on the joined points, with the shared report fields filled in.
CorrelationReport finish(CorrelationMode mode, std::span<const MetricSeries> metrics,
                         std::vector<ScatterPoint> points) {
  CorrelationReport report;
  report.mode = mode;
  report.task = metrics.front().task;
  report.model_tag = metrics.front().model_tag;
  report.metric_name = metrics.front().metric_name;
  if (points.size() < 3) {
    throw InvalidInput("correlation needs at least 3 joined points, got " +
                       std::to_string(points.size()));
  }
  std::vector<double> x, y;
  for (const auto& pt : points) {
    x.push_back(pt.overlap);
    y.push_back(pt.metric);
  }
  const PearsonResult pr = pearson(x, y);
  report.r = pr.r;
  report.p = pr.p;
  report.n = pr.n;
  report.band = significance_band(pr.p);
  report.points = std::move(points);
  return report;
}

void check_same_group(std::span<const MetricSeries> metrics) {
  if (metrics.empty()) throw InvalidInput("no metric series supplied");
  for (const auto& m : metrics) {
    if (m.task != metrics.front().task || m.model_tag != metrics.front().model_tag) {
      throw InvalidInput("metric series mix tasks or model tags");
    }
  }
}

std::string format_fixed3(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::string format_pvalue(double p) {
  char buf[64];
  if (p >= 0.001) {
    std::snprintf(buf, sizeof buf, "%.3f", p);
  } else {
    std::snprintf(buf, sizeof buf, "%.3e", p);
  }
  return buf;
}

}  // namespace

PearsonResult pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw InvalidInput("pearson: length mismatch (" + std::to_string(x.size()) + " vs " +
                       std::to_string(y.size()) + ")");
  }
  const std::size_t n = x.size();
  if (n < 3) throw InvalidInput("pearson: need at least 3 points, got " + std::to_string(n));
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) {
      throw InvalidInput("pearson: non-finite input");
    }
  }
  auto constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double e) { return e == v.front(); });
  };
  // Rounding in the mean can leave a constant series with a tiny nonzero
  // spread, so test for it directly.
  if (constant(x) || constant(y)) throw InvalidInput("pearson: zero variance");

  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw InvalidInput("pearson: zero variance");

  double r = sxy / (std::sqrt(sxx) * std::sqrt(syy));
  // An exactly affine pair of series lands within rounding noise of +-1;
  // the correctly rounded coefficient of such data is +-1 itself.
  const double snap = 8.0 * static_cast<double>(n) * std::numeric_limits<double>::epsilon();
  if (1.0 - std::abs(r) <= snap) r = std::copysign(1.0, r);

  PearsonResult out;
  out.r = r;
  out.n = n;
  if (std::abs(r) == 1.0) {
    out.p = 0.0;
  } else {
    // Two-sided Student-t tail with n-2 dof, written as the regularised
    // incomplete beta I_{1-r^2}((n-2)/2, 1/2).
    const double df = static_cast<double>(n - 2);
    const double one_minus_r2 = (1.0 - r) * (1.0 + r);
    out.p = std::clamp(boost::math::ibeta(df / 2.0, 0.5, one_minus_r2), 0.0, 1.0);
  }
  return out;
}

Band significance_band(double p) {
  if (p < 0.001) return Band::high;
  if (p < 0.05) return Band::significant;
  return Band::none;
}

std::string_view to_string(Band band) noexcept {
  switch (band) {
    case Band::high: return "p<0.001";
    case Band::significant: return "p<0.05";
    case Band::none: return "none";
  }
  return "none";
}

std::string_view to_string(CorrelationMode mode) noexcept {
  return mode == CorrelationMode::average ? "average" : "pairwise";
}

std::vector<MetricSeries> load_metrics_csv(const std::filesystem::path& path) {
  const CsvTable table = read_csv(path);
  auto column = [&](std::string_view name) {
    const auto it = std::find(table.header.begin(), table.header.end(), name);
    if (it == table.header.end()) {
      throw FormatError(path, 1, "missing column '" + std::string(name) + "'");
    }
    return static_cast<std::size_t>(it - table.header.begin());
  };
  const std::size_t c_tag = column("model_tag");
  const std::size_t c_task = column("task");
  const std::size_t c_lang = column("target_language");
  const std::size_t c_step = column("checkpoint_step");
  const std::size_t c_metric = column("metric_name");
  const std::size_t c_value = column("value");

  using Key = std::tuple<std::string, std::string, std::string, std::string>;
  std::map<Key, std::map<std::int64_t, double>> grouped;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto& row = table.rows[i];
    const std::uint64_t line = i + 2;
    const auto step = parse_field<std::int64_t>(row[c_step], path, line, "checkpoint_step");
    const auto value = parse_field<double>(row[c_value], path, line, "value");
    if (!std::isfinite(value)) throw FormatError(path, line, "non-finite metric value");
    auto& series = grouped[{row[c_tag], row[c_task], row[c_lang], row[c_metric]}];
    if (!series.emplace(step, value).second) {
      throw FormatError(path, line, "duplicate checkpoint_step " + std::to_string(step));
    }
  }
  std::vector<MetricSeries> out;
  for (const auto& [key, points] : grouped) {
    MetricSeries s;
    std::tie(s.model_tag, s.task, s.target_language, s.metric_name) = key;
    s.points.assign(points.begin(), points.end());
    out.push_back(std::move(s));
  }
  return out;
}

JoinedPoints join_average(const OverlapSeries& overlap, std::span<const MetricSeries> metrics) {
  check_same_group(metrics);
  std::map<std::int64_t, std::pair<double, std::size_t>> metric_by_step;
  for (const auto& series : metrics) {
    for (const auto& [step, value] : series.points) {
      auto& acc = metric_by_step[step];
      acc.first += value;
      acc.second += 1;
    }
  }
  std::map<std::int64_t, double> overlap_by_step;
  for (std::size_t i = 0; i < overlap.checkpoint_steps.size(); ++i) {
    overlap_by_step[overlap.checkpoint_steps[i]] = overlap.values[i];
  }

  JoinedPoints out;
  for (const auto& [step, value] : overlap_by_step) {
    const auto it = metric_by_step.find(step);
    if (it == metric_by_step.end()) {
      out.dropped_steps.push_back(step);
      continue;
    }
    out.points.push_back(
        {"", step, value, it->second.first / static_cast<double>(it->second.second)});
  }
  for (const auto& [step, acc] : metric_by_step) {
    if (!overlap_by_step.contains(step)) out.dropped_steps.push_back(step);
  }
  std::sort(out.dropped_steps.begin(), out.dropped_steps.end());
  return out;
}

JoinedPoints join_pairwise(const std::map<std::string, OverlapSeries>& overlap_by_target,
                           std::span<const MetricSeries> metrics) {
  check_same_group(metrics);
  JoinedPoints out;
  std::set<std::int64_t> dropped;
  for (const auto& series : metrics) {
    const auto it = overlap_by_target.find(series.target_language);
    if (it == overlap_by_target.end()) continue;
    const OverlapSeries& ov = it->second;
    std::map<std::int64_t, double> overlap_by_step;
    for (std::size_t i = 0; i < ov.checkpoint_steps.size(); ++i) {
      overlap_by_step[ov.checkpoint_steps[i]] = ov.values[i];
    }
    std::set<std::int64_t> metric_steps;
    for (const auto& [step, value] : series.points) {
      metric_steps.insert(step);
      const auto hit = overlap_by_step.find(step);
      if (hit == overlap_by_step.end()) {
        dropped.insert(step);
        continue;
      }
      out.points.push_back({series.target_language, step, hit->second, value});
    }
    for (const auto& [step, value] : overlap_by_step) {
      if (!metric_steps.contains(step)) dropped.insert(step);
    }
  }
  out.dropped_steps.assign(dropped.begin(), dropped.end());
  return out;
}

CorrelationReport correlate_average(const OverlapSeries& overlap,
                                    std::span<const MetricSeries> metrics) {
  JoinedPoints joined = join_average(overlap, metrics);
  CorrelationReport report = finish(CorrelationMode::average, metrics, std::move(joined.points));
  report.dropped_steps = std::move(joined.dropped_steps);
  return report;
}

CorrelationReport correlate_pairwise(const std::map<std::string, OverlapSeries>& overlap_by_target,
                                     std::span<const MetricSeries> metrics) {
  JoinedPoints joined = join_pairwise(overlap_by_target, metrics);
  std::vector<LanguageCorrelation> per_language;
  for (const auto& series : metrics) {
    if (!overlap_by_target.contains(series.target_language)) continue;
    std::vector<double> x, y;
    for (const auto& pt : joined.points) {
      if (pt.language != series.target_language) continue;
      x.push_back(pt.overlap);
      y.push_back(pt.metric);
    }
    LanguageCorrelation lc;
    lc.language = series.target_language;
    lc.n = x.size();
    try {
      lc.result = pearson(x, y);
    } catch (const InvalidInput&) {
      lc.result.reset();
    }
    per_language.push_back(std::move(lc));
  }
  CorrelationReport report = finish(CorrelationMode::pairwise, metrics, std::move(joined.points));
  report.dropped_steps = std::move(joined.dropped_steps);
  report.per_language = std::move(per_language);
  return report;
}

std::string format_cell(double r, double p) {
  return format_fixed3(r) + " (p=" + format_pvalue(p) + ")";
}

void write_correlation_table(std::ostream& out, std::span<const CorrelationReport> reports) {
  std::set<std::pair<std::string, std::string>> columns;  // (task, mode)
  std::map<std::string, std::map<std::pair<std::string, std::string>, const CorrelationReport*>>
      rows;
  for (const auto& r : reports) {
    const std::pair<std::string, std::string> col{r.task, std::string(to_string(r.mode))};
    columns.insert(col);
    rows[r.model_tag][col] = &r;
  }
  out << "model_tag";
  for (const auto& [task, mode] : columns) {
    for (const char* field : {"r", "p", "n", "band", "cell"}) {
      out << ',' << task << '_' << mode << '_' << field;
    }
  }
  out << '\n';
  for (const auto& [tag, cells] : rows) {
    out << tag;
    for (const auto& col : columns) {
      const auto it = cells.find(col);
      if (it == cells.end()) {
        out << ",,,,,";
        continue;
      }
      const CorrelationReport& r = *it->second;
      out << ',' << format_number(r.r) << ',' << format_number(r.p) << ',' << r.n << ','
          << to_string(r.band) << ',' << format_cell(r.r, r.p);
    }
    out << '\n';
  }
}

void write_correlation_json(const std::filesystem::path& path,
                            std::span<const CorrelationReport> reports) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : reports) {
    nlohmann::ordered_json j;
    j["mode"] = to_string(r.mode);
    j["task"] = r.task;
    j["model_tag"] = r.model_tag;
    j["metric_name"] = r.metric_name;
    j["r"] = r.r;
    j["p_value"] = r.p;
    j["n"] = r.n;
    j["significance_band"] = to_string(r.band);
    j["cell"] = format_cell(r.r, r.p);
    j["dropped_steps"] = r.dropped_steps;
    if (r.mode == CorrelationMode::pairwise) {
      auto langs = nlohmann::ordered_json::array();
      for (const auto& lc : r.per_language) {
        nlohmann::ordered_json l;
        l["language"] = lc.language;
        l["n"] = lc.n;
        if (lc.result) {
          l["r"] = lc.result->r;
          l["p_value"] = lc.result->p;
        } else {
          l["r"] = nullptr;
          l["p_value"] = nullptr;
        }
        langs.push_back(l);
      }
      j["per_language"] = langs;
    }
    arr.push_back(j);
  }
  if (path.has_parent_path()) detail::ensure_directory(path.parent_path());
  detail::write_file(path, arr.dump(2) + "\n");
}

}  // namespace xlprobe
