#include "xlprobe/probe.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "detail/io_util.hpp"
#include "xlprobe/error.hpp"

namespace xlprobe {

namespace fs = std::filesystem;

namespace {

constexpr std::array<char, 8> kWeightsMagic = {'I', 'P', 'W', 'G', 'T', '1', '\0', '\0'};
constexpr std::size_t kWeightsHeaderBytes = 16;
constexpr int kProbeFormatVersion = 1;

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEpsilon = 1e-8;

// RNG streams derived from TrainConfig::seed.
constexpr std::uint64_t kShuffleStream = 1;
constexpr std::uint64_t kMaskStream = 2;
constexpr std::uint64_t kDevMaskStream = 3;

void check_shapes(std::size_t d, std::span<const float> h, const Mask& mask) {
  if (h.size() != d) {
    throw InvalidInput("embedding has " + std::to_string(h.size()) + " dims, probe expects " +
                       std::to_string(d));
  }
  if (mask.dim() != d) {
    throw InvalidInput("mask has " + std::to_string(mask.dim()) + " dims, probe expects " +
                       std::to_string(d));
  }
}

template <class T>
void masked_logits(const Matrix<T>& weights, std::span<const float> h, const Mask& mask,
                   std::vector<double>& logits) {
  logits.assign(weights.rows(), 0.0);
  for (std::size_t c = 0; c < weights.rows(); ++c) {
    const auto w = weights.row(c);
    double acc = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (mask.contains(j)) acc += static_cast<double>(w[j]) * static_cast<double>(h[j]);
    }
    logits[c] = acc;
  }
}

double log_sum_exp(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

Params to_params(const Matrix<float>& w) {
  Params p(w.rows(), w.cols());
  std::copy(w.values().begin(), w.values().end(), p.values().begin());
  return p;
}

Matrix<float> to_float(const Params& p) {
  Matrix<float> w(p.rows(), p.cols());
  std::transform(p.values().begin(), p.values().end(), w.values().begin(),
                 [](double v) { return static_cast<float>(v); });
  return w;
}

void check_view(const DataView& view, const char* what) {
  if (view.data == nullptr) throw InvalidInput(std::string(what) + " has no dataset");
}

// Dev NLL under a fixed set of masks: sum over examples of the mean
// cross-entropy over that example's masks.
double dev_objective(const Params& weights, const ProbeDataset& data,
                     const std::vector<std::size_t>& rows,
                     const std::vector<std::vector<Mask>>& masks) {
  double total = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = data.records()[rows[i]];
    double example = 0.0;
    for (const auto& mask : masks[i]) {
      example += cross_entropy(weights, data.embedding(rows[i]), mask, r.label_id);
    }
    total += example / static_cast<double>(masks[i].size());
  }
  return total;
}

nlohmann::ordered_json manifest_json(const Manifest& m) {
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
  return j;
}

}  // namespace

Mask Mask::full(std::size_t d) {
  Mask m(d);
  std::fill(m.bits_.begin(), m.bits_.end(), 1);
  return m;
}

Mask Mask::from_indices(std::size_t d, std::span<const std::size_t> indices) {
  Mask m(d);
  for (std::size_t j : indices) {
    if (j >= d) {
      throw InvalidInput("dimension index " + std::to_string(j + 1) + " outside [1, " +
                         std::to_string(d) + "]");
    }
    m.insert(j);
  }
  return m;
}

std::size_t Mask::count() const noexcept {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

std::vector<std::size_t> Mask::indices() const {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < bits_.size(); ++j) {
    if (bits_[j]) out.push_back(j);
  }
  return out;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) {
    throw InvalidInput("learning_rate must be positive");
  }
  if (epochs == 0) throw InvalidInput("epochs must be positive");
  if (batch_size == 0) throw InvalidInput("batch_size must be positive");
  if (masks_per_example == 0) throw InvalidInput("masks_per_example must be positive");
  if (!(inclusion_prob > 0 && inclusion_prob < 1)) {
    throw InvalidInput("inclusion_prob must lie strictly inside (0, 1)");
  }
}

LinearProbe zero_probe(const ProbeDataset& data) {
  LinearProbe probe;
  probe.weights = Matrix<float>(data.num_labels(), data.dim());
  probe.labels = data.manifest().label_inventory;
  probe.manifest = data.manifest();
  return probe;
}

std::vector<double> forward(const LinearProbe& probe, std::span<const float> h, const Mask& mask) {
  check_shapes(probe.dim(), h, mask);
  std::vector<double> z;
  masked_logits(probe.weights, h, mask, z);
  const double lse = log_sum_exp(z);
  for (double& v : z) v = std::exp(v - lse);
  return z;
}

double masked_log_prob(const LinearProbe& probe, std::span<const float> h, const Mask& mask,
                       std::size_t label) {
  check_shapes(probe.dim(), h, mask);
  if (label >= probe.num_labels()) throw InvalidInput("label outside probe inventory");
  std::vector<double> z;
  masked_logits(probe.weights, h, mask, z);
  return z[label] - log_sum_exp(z);
}

double masked_nll(const LinearProbe& probe, const DataView& data, const Mask& mask) {
  check_view(data, "view");
  if (data.empty()) throw InvalidInput("masked_nll over an empty split");
  if (data.data->dim() != probe.dim()) throw InvalidInput("dataset and probe disagree on d");
  if (mask.dim() != probe.dim()) throw InvalidInput("mask and probe disagree on d");
  std::vector<double> z;
  double nll = 0.0;
  for (std::size_t row : data.rows) {
    masked_logits(probe.weights, data.data->embedding(row), mask, z);
    const std::size_t label = data.data->records()[row].label_id;
    nll -= z[label] - log_sum_exp(z);
  }
  return nll;
}

double masked_nll(const LinearProbe& probe, const ProbeDataset& data, Split split,
                  const Mask& mask) {
  return masked_nll(probe, view(data, split), mask);
}

Mask sample_mask(std::size_t d, double inclusion_prob, Engine& rng) {
  Mask m(d);
  for (std::size_t j = 0; j < d; ++j) {
    if (bernoulli(rng, inclusion_prob)) m.insert(j);
  }
  return m;
}

double binary_entropy(double p) {
  if (p <= 0.0 || p >= 1.0) return 0.0;
  return -p * std::log(p) - (1.0 - p) * std::log1p(-p);
}

LowerBound lower_bound_estimate(const LinearProbe& probe, const DataView& data,
                                const TrainConfig& config, std::size_t num_samples, Engine& rng) {
  check_view(data, "view");
  if (num_samples == 0) throw InvalidInput("num_samples must be at least 1");
  if (!(config.inclusion_prob > 0 && config.inclusion_prob < 1)) {
    throw InvalidInput("inclusion_prob must lie strictly inside (0, 1)");
  }
  const std::size_t d = probe.dim();
  LowerBound lb;
  lb.num_examples = data.size();
  lb.num_samples = num_samples;
  lb.log_prior_per_example = -static_cast<double>(d) * std::log(2.0);
  lb.entropy_per_example = static_cast<double>(d) * binary_entropy(config.inclusion_prob);
  if (data.empty()) return lb;

  // Welford accumulation of the per-sample totals.
  double mean = 0.0;
  double m2 = 0.0;
  for (std::size_t s = 0; s < num_samples; ++s) {
    const Mask mask = sample_mask(d, config.inclusion_prob, rng);
    const double value = -masked_nll(probe, data, mask);
    const double delta = value - mean;
    mean += delta / static_cast<double>(s + 1);
    m2 += delta * (value - mean);
  }
  lb.data_term = mean;
  if (num_samples > 1) {
    const double variance = m2 / static_cast<double>(num_samples - 1);
    lb.standard_error = std::sqrt(variance / static_cast<double>(num_samples));
  }
  return lb;
}

LowerBound lower_bound_estimate(const LinearProbe& probe, const ProbeDataset& data, Split split,
                                const TrainConfig& config, std::size_t num_samples, Engine& rng) {
  return lower_bound_estimate(probe, view(data, split), config, num_samples, rng);
}

double cross_entropy(const Params& weights, std::span<const float> h, const Mask& mask,
                     std::size_t label, Params* grad, double scale) {
  check_shapes(weights.cols(), h, mask);
  std::vector<double> z;
  masked_logits(weights, h, mask, z);
  const double lse = log_sum_exp(z);
  const double loss = lse - z[label];
  if (grad != nullptr) {
    for (std::size_t c = 0; c < weights.rows(); ++c) {
      const double residual = std::exp(z[c] - lse) - (c == label ? 1.0 : 0.0);
      const double coef = scale * residual;
      auto g = grad->row(c);
      for (std::size_t j = 0; j < g.size(); ++j) {
        if (mask.contains(j)) g[j] += coef * static_cast<double>(h[j]);
      }
    }
  }
  return loss;
}

double batch_loss(const Params& weights, const ProbeDataset& data,
                  std::span<const MaskedExample> batch, Params* grad) {
  if (batch.empty()) throw InvalidInput("empty batch");
  if (grad != nullptr) *grad = Params(weights.rows(), weights.cols());
  const double scale = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& ex : batch) {
    total += cross_entropy(weights, data.embedding(ex.row), ex.mask,
                           data.records()[ex.row].label_id, grad, scale);
  }
  return total * scale;
}

LinearProbe train(const DataView& train_set, const DataView& dev_set, const TrainConfig& config) {
  config.validate();
  check_view(train_set, "train set");
  check_view(dev_set, "dev set");
  if (train_set.empty()) throw InvalidInput("train split is empty");
  if (dev_set.empty()) throw InvalidInput("dev split is empty");
  const ProbeDataset& train_data = *train_set.data;
  const ProbeDataset& dev_data = *dev_set.data;
  if (train_data.dim() != dev_data.dim() ||
      train_data.manifest().label_inventory != dev_data.manifest().label_inventory) {
    throw InvalidInput("train and dev sets disagree on d or label inventory");
  }
  if (train_data.num_labels() < 2) {
    throw InvalidInput("a trainable dataset needs at least 2 labels");
  }

  const std::size_t d = train_data.dim();
  const std::size_t num_labels = train_data.num_labels();
  Params weights(num_labels, d);
  Params first_moment(num_labels, d);
  Params second_moment(num_labels, d);
  Params grad(num_labels, d);

  Engine shuffle_rng = make_engine(config.seed, kShuffleStream);
  Engine mask_rng = make_engine(config.seed, kMaskStream);
  Engine dev_rng = make_engine(config.seed, kDevMaskStream);

  std::vector<std::vector<Mask>> dev_masks(dev_set.size());
  for (auto& masks : dev_masks) {
    for (std::size_t m = 0; m < config.masks_per_example; ++m) {
      masks.push_back(sample_mask(d, config.inclusion_prob, dev_rng));
    }
  }

  Params best = weights;
  double best_dev = dev_objective(weights, dev_data, dev_set.rows, dev_masks);
  TrainSummary summary;
  std::size_t stale = 0;
  std::uint64_t step = 0;
  std::vector<std::size_t> order = train_set.rows;
  std::vector<MaskedExample> batch;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle(std::span<std::size_t>(order), shuffle_rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < stop; ++i) {
        for (std::size_t m = 0; m < config.masks_per_example; ++m) {
          batch.push_back({order[i], sample_mask(d, config.inclusion_prob, mask_rng)});
        }
      }
      const double loss = batch_loss(weights, train_data, batch, &grad);
      if (!std::isfinite(loss)) {
        throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) +
                              ", step " + std::to_string(step + 1) +
                              "; try a smaller learning_rate");
      }
      epoch_loss += loss * static_cast<double>(stop - start);

      ++step;
      const double correction1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(step));
      const double correction2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(step));
      auto w = weights.values();
      auto g = grad.values();
      auto m1 = first_moment.values();
      auto m2 = second_moment.values();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m1[i] = kAdamBeta1 * m1[i] + (1.0 - kAdamBeta1) * g[i];
        m2[i] = kAdamBeta2 * m2[i] + (1.0 - kAdamBeta2) * g[i] * g[i];
        const double m_hat = m1[i] / correction1;
        const double v_hat = m2[i] / correction2;
        w[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + kAdamEpsilon);
      }
    }
    summary.epochs_run = epoch;
    summary.final_train_loss = epoch_loss / static_cast<double>(order.size());

    const double dev = dev_objective(weights, dev_data, dev_set.rows, dev_masks);
    if (!std::isfinite(dev)) {
      throw DivergenceError("non-finite dev loss at epoch " + std::to_string(epoch));
    }
    if (dev < best_dev) {
      best_dev = dev;
      best = weights;
      summary.best_epoch = epoch;
      stale = 0;
    } else if (config.patience > 0 && ++stale >= config.patience) {
      break;
    }
  }

  LinearProbe probe;
  probe.weights = to_float(best);
  probe.labels = train_data.manifest().label_inventory;
  probe.manifest = train_data.manifest();
  probe.config = config;
  summary.best_dev_nll = dev_objective(to_params(probe.weights), dev_data, dev_set.rows, dev_masks);
  probe.summary = summary;
  return probe;
}

LinearProbe train(const ProbeDataset& data, const TrainConfig& config) {
  return train(view(data, Split::train), view(data, Split::dev), config);
}

void write_probe(const LinearProbe& probe, const fs::path& dir) {
  if (probe.weights.rows() != probe.labels.size()) {
    throw InvalidInput("weight rows do not match label inventory");
  }
  for (float v : probe.weights.values()) {
    if (!std::isfinite(v)) throw InvalidInput("non-finite probe weight");
  }
  detail::ensure_directory(dir);

  nlohmann::ordered_json j;
  j["format_version"] = kProbeFormatVersion;
  j["manifest"] = manifest_json(probe.manifest);
  j["label_inventory"] = probe.labels;
  j["d"] = probe.dim();
  nlohmann::ordered_json cfg;
  cfg["learning_rate"] = probe.config.learning_rate;
  cfg["epochs"] = probe.config.epochs;
  cfg["batch_size"] = probe.config.batch_size;
  cfg["masks_per_example"] = probe.config.masks_per_example;
  cfg["inclusion_prob"] = probe.config.inclusion_prob;
  cfg["seed"] = probe.config.seed;
  cfg["patience"] = probe.config.patience;
  j["train_config"] = cfg;
  nlohmann::ordered_json summary;
  summary["epochs_run"] = probe.summary.epochs_run;
  summary["best_epoch"] = probe.summary.best_epoch;
  summary["final_train_loss"] = probe.summary.final_train_loss;
  summary["best_dev_nll"] = probe.summary.best_dev_nll;
  j["training"] = summary;
  j["weights_file"] = "weights.bin";
  detail::write_file(dir / "probe.json", j.dump(2) + "\n");

  std::vector<std::uint8_t> bytes(kWeightsMagic.begin(), kWeightsMagic.end());
  detail::put_u32(bytes, static_cast<std::uint32_t>(probe.weights.rows()));
  detail::put_u32(bytes, static_cast<std::uint32_t>(probe.weights.cols()));
  for (float v : probe.weights.values()) detail::put_u32(bytes, std::bit_cast<std::uint32_t>(v));
  detail::write_file(dir / "weights.bin", bytes);
}

LinearProbe load_probe(const fs::path& dir) {
  const fs::path json_path = dir / "probe.json";
  const fs::path weights_path = dir / "weights.bin";
  if (!fs::exists(json_path)) throw FormatError(json_path, 0, "missing file");
  if (!fs::exists(weights_path)) throw FormatError(weights_path, 0, "missing file");

  LinearProbe probe;
  try {
    std::ifstream in(json_path);
    const auto j = nlohmann::json::parse(in);
    if (j.at("format_version").get<int>() != kProbeFormatVersion) {
      throw FormatError(json_path, 0, "unsupported format_version");
    }
    const auto& m = j.at("manifest");
    probe.manifest.format_version = m.at("format_version").get<int>();
    probe.manifest.language = m.at("language").get<std::string>();
    probe.manifest.category = m.at("category").get<std::string>();
    probe.manifest.layer = m.at("layer").get<int>();
    probe.manifest.checkpoint_step = m.at("checkpoint_step").get<std::int64_t>();
    probe.manifest.d = m.at("d").get<std::size_t>();
    probe.manifest.n = m.at("n").get<std::size_t>();
    probe.manifest.label_inventory = m.at("label_inventory").get<std::vector<std::string>>();
    probe.manifest.source = m.at("source").get<std::string>();
    probe.labels = j.at("label_inventory").get<std::vector<std::string>>();
    const auto& cfg = j.at("train_config");
    probe.config.learning_rate = cfg.at("learning_rate").get<double>();
    probe.config.epochs = cfg.at("epochs").get<std::size_t>();
    probe.config.batch_size = cfg.at("batch_size").get<std::size_t>();
    probe.config.masks_per_example = cfg.at("masks_per_example").get<std::size_t>();
    probe.config.inclusion_prob = cfg.at("inclusion_prob").get<double>();
    probe.config.seed = cfg.at("seed").get<std::uint64_t>();
    probe.config.patience = cfg.at("patience").get<std::size_t>();
    const auto& s = j.at("training");
    probe.summary.epochs_run = s.at("epochs_run").get<std::size_t>();
    probe.summary.best_epoch = s.at("best_epoch").get<std::size_t>();
    probe.summary.final_train_loss = s.at("final_train_loss").get<double>();
    probe.summary.best_dev_nll = s.at("best_dev_nll").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(json_path, 0, std::string("malformed probe.json: ") + e.what());
  }

  const auto bytes = detail::read_file(weights_path);
  if (bytes.size() < kWeightsHeaderBytes ||
      !std::equal(kWeightsMagic.begin(), kWeightsMagic.end(), bytes.begin())) {
    throw FormatError(weights_path, 0, "bad magic");
  }
  const std::size_t rows = detail::get_u32(bytes.data() + 8);
  const std::size_t cols = detail::get_u32(bytes.data() + 12);
  if (bytes.size() != kWeightsHeaderBytes + rows * cols * 4) {
    throw FormatError(weights_path, 8, "payload size does not match header");
  }
  if (rows != probe.labels.size()) {
    throw FormatError(weights_path, 8, "row count does not match label inventory");
  }
  if (cols != probe.manifest.d) {
    throw FormatError(weights_path, 12, "column count does not match manifest d");
  }
  probe.weights = Matrix<float>(rows, cols);
  auto values = probe.weights.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t offset = kWeightsHeaderBytes + 4 * i;
    values[i] = std::bit_cast<float>(detail::get_u32(bytes.data() + offset));
    if (!std::isfinite(values[i])) throw FormatError(weights_path, offset, "non-finite weight");
  }
  return probe;
}

}  // namespace xlprobe
