#include "config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "xlprobe/csv.hpp"
#include "xlprobe/error.hpp"

namespace xlprobe::cli {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(std::string_view value) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= value.size()) {
    const auto pos = value.find(',', start);
    const auto item = trim(value.substr(start, pos == std::string_view::npos ? std::string_view::npos
                                                                             : pos - start));
    if (!item.empty()) out.push_back(item);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
T parse_value(const std::string& text, const std::string& where) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) {
    throw InvalidInput(where + ": cannot parse '" + text + "'");
  }
  return value;
}

bool parse_bool(const std::string& text, const std::string& where) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw InvalidInput(where + ": expected a boolean, got '" + text + "'");
}

template <class T>
std::vector<T> parse_list(const std::string& text, const std::string& where) {
  std::vector<T> out;
  for (const auto& item : split_list(text)) out.push_back(parse_value<T>(item, where));
  return out;
}

SplitRatios ratios_from(const std::vector<double>& v, const std::string& where) {
  if (v.size() != 3) throw InvalidInput(where + ": ratios need three values (train, dev, test)");
  return {v[0], v[1], v[2]};
}

template <class T>
std::string join(const std::vector<T>& items) {
  std::ostringstream out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i > 0) out << ", ";
    if constexpr (std::is_same_v<T, double>) {
      out << format_number(items[i]);
    } else {
      out << items[i];
    }
  }
  return out.str();
}

void set_key(RunConfig& c, const std::string& key, const std::string& value,
             const std::string& where) {
  if (key == "bundle_roots") {
    c.bundle_roots.clear();
    for (const auto& p : split_list(value)) c.bundle_roots.emplace_back(p);
  } else if (key == "languages") {
    c.languages = split_list(value);
  } else if (key == "categories") {
    c.categories = split_list(value);
  } else if (key == "layers") {
    c.layers = parse_list<int>(value, where);
  } else if (key == "k") {
    c.k = parse_value<std::size_t>(value, where);
  } else if (key == "learning_rate") {
    c.train.learning_rate = parse_value<double>(value, where);
  } else if (key == "epochs") {
    c.train.epochs = parse_value<std::size_t>(value, where);
  } else if (key == "batch_size") {
    c.train.batch_size = parse_value<std::size_t>(value, where);
  } else if (key == "masks_per_example") {
    c.train.masks_per_example = parse_value<std::size_t>(value, where);
  } else if (key == "inclusion_prob") {
    c.train.inclusion_prob = parse_value<double>(value, where);
  } else if (key == "patience") {
    c.train.patience = parse_value<std::size_t>(value, where);
  } else if (key == "alpha") {
    c.alpha = parse_value<double>(value, where);
  } else if (key == "bonferroni") {
    c.bonferroni = parse_bool(value, where);
  } else if (key == "threshold") {
    c.threshold = parse_value<std::size_t>(value, where);
  } else if (key == "ratios") {
    c.ratios = ratios_from(parse_list<double>(value, where), where);
  } else if (key == "out") {
    c.out = value;
  } else if (key == "seed") {
    c.seed = parse_value<std::uint64_t>(value, where);
  } else if (key == "jobs") {
    c.jobs = parse_value<std::size_t>(value, where);
  } else if (key == "pivot") {
    c.pivot = value;
  } else if (key == "model_tag") {
    c.model_tag = value;
  } else if (key == "metrics") {
    if (value.empty()) {
      c.metrics.reset();
    } else {
      c.metrics = value;
    }
  } else if (key == "heatmap_layer") {
    c.heatmap_layer = parse_value<int>(value, where);
  } else if (key == "heatmap_step") {
    if (value.empty()) {
      c.heatmap_step.reset();
    } else {
      c.heatmap_step = parse_value<std::int64_t>(value, where);
    }
  } else {
    throw InvalidInput(where + ": unknown key '" + key + "'");
  }
}

}  // namespace

void apply_config_text(RunConfig& config, std::string_view text, std::string_view origin) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = std::string(origin) + ":" + std::to_string(line_no);
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string content = trim(line);
    if (content.empty()) continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos) throw InvalidInput(where + ": expected 'key = value'");
    set_key(config, trim(std::string_view(content).substr(0, eq)),
            trim(std::string_view(content).substr(eq + 1)), where);
  }
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("config file not found: " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  apply_config_text(config, text.str(), path.string());
}

void apply_overrides(RunConfig& c, const Overrides& o) {
  if (o.bundle_roots) c.bundle_roots.assign(o.bundle_roots->begin(), o.bundle_roots->end());
  if (o.languages) c.languages = *o.languages;
  if (o.categories) c.categories = *o.categories;
  if (o.layers) c.layers = *o.layers;
  if (o.k) c.k = *o.k;
  if (o.learning_rate) c.train.learning_rate = *o.learning_rate;
  if (o.epochs) c.train.epochs = *o.epochs;
  if (o.batch_size) c.train.batch_size = *o.batch_size;
  if (o.masks_per_example) c.train.masks_per_example = *o.masks_per_example;
  if (o.inclusion_prob) c.train.inclusion_prob = *o.inclusion_prob;
  if (o.patience) c.train.patience = *o.patience;
  if (o.alpha) c.alpha = *o.alpha;
  if (o.bonferroni) c.bonferroni = *o.bonferroni;
  if (o.threshold) c.threshold = *o.threshold;
  if (o.ratios) c.ratios = ratios_from(*o.ratios, "--ratios");
  if (o.out) c.out = *o.out;
  if (o.seed) c.seed = *o.seed;
  if (o.jobs) c.jobs = *o.jobs;
  if (o.pivot) c.pivot = *o.pivot;
  if (o.model_tag) c.model_tag = *o.model_tag;
  if (o.metrics) c.metrics = *o.metrics;
  if (o.heatmap_layer) c.heatmap_layer = *o.heatmap_layer;
  if (o.heatmap_step) c.heatmap_step = *o.heatmap_step;
}

void validate(const RunConfig& c) {
  if (c.k == 0) throw InvalidInput("k must be at least 1");
  if (c.layers.empty()) throw InvalidInput("at least one layer is required");
  if (c.categories.empty()) throw InvalidInput("at least one category is required");
  if (!(c.alpha > 0 && c.alpha < 1)) throw InvalidInput("alpha must lie in (0, 1)");
  if (c.jobs == 0) throw InvalidInput("jobs must be at least 1");
  c.ratios.validate();
  c.train.validate();
  for (const auto& root : c.bundle_roots) {
    if (!std::filesystem::is_directory(root)) {
      throw InvalidInput("bundle root not found: " + root.string());
    }
  }
  if (c.metrics && !std::filesystem::is_regular_file(*c.metrics)) {
    throw InvalidInput("metrics file not found: " + c.metrics->string());
  }
}

RunConfig resolve_config(const std::optional<std::filesystem::path>& config_path,
                         const Overrides& overrides) {
  RunConfig config;
  if (config_path) {
    apply_config_file(config, *config_path);
  } else if (const char* env = std::getenv(kConfigEnvVar); env != nullptr && *env != '\0') {
    apply_config_file(config, env);
  }
  apply_overrides(config, overrides);
  config.train.seed = config.seed;
  validate(config);
  return config;
}

std::string describe(const RunConfig& c) {
  std::vector<std::string> roots;
  for (const auto& p : c.bundle_roots) roots.push_back(p.string());
  std::ostringstream out;
  out << "bundle_roots = " << join(roots) << '\n'
      << "languages = " << join(c.languages) << '\n'
      << "categories = " << join(c.categories) << '\n'
      << "layers = " << join(c.layers) << '\n'
      << "k = " << c.k << '\n'
      << "learning_rate = " << format_number(c.train.learning_rate) << '\n'
      << "epochs = " << c.train.epochs << '\n'
      << "batch_size = " << c.train.batch_size << '\n'
      << "masks_per_example = " << c.train.masks_per_example << '\n'
      << "inclusion_prob = " << format_number(c.train.inclusion_prob) << '\n'
      << "patience = " << c.train.patience << '\n'
      << "alpha = " << format_number(c.alpha) << '\n'
      << "bonferroni = " << (c.bonferroni ? "true" : "false") << '\n'
      << "threshold = " << c.threshold << '\n'
      << "ratios = " << join(std::vector<double>{c.ratios.train, c.ratios.dev, c.ratios.test})
      << '\n'
      << "out = " << c.out.string() << '\n'
      << "seed = " << c.seed << '\n'
      << "jobs = " << c.jobs << '\n'
      << "pivot = " << c.pivot << '\n'
      << "model_tag = " << c.model_tag << '\n'
      << "metrics = " << (c.metrics ? c.metrics->string() : "") << '\n'
      << "heatmap_layer = " << c.heatmap_layer << '\n'
      << "heatmap_step = " << (c.heatmap_step ? std::to_string(*c.heatmap_step) : "") << '\n';
  return out.str();
}

}  // namespace xlprobe::cli
