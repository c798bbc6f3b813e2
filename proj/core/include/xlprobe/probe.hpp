#pragma once

// Latent-subset linear probe.
//
// p(label | h, C) = softmax(W h_C), where h_C zeroes every dimension outside
// the subset C. Training maximises the masked log-likelihood under subsets
// drawn from a fixed-rate Bernoulli distribution over dimensions, which is
// the data term of the variational lower bound; the prior and entropy terms
// are constants for a fixed rate and are reported separately.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "xlprobe/dataset.hpp"
#include "xlprobe/matrix.hpp"
#include "xlprobe/random.hpp"

namespace xlprobe {

/// Subset of dimensions {0..d-1}. Indices are 0-based in memory and 1-based
/// in every file format.
class Mask {
 public:
  Mask() = default;
  explicit Mask(std::size_t d) : bits_(d, 0) {}

  static Mask full(std::size_t d);
  /// Throws InvalidInput for indices >= d.
  static Mask from_indices(std::size_t d, std::span<const std::size_t> indices);

  std::size_t dim() const noexcept { return bits_.size(); }
  std::size_t count() const noexcept;
  bool contains(std::size_t j) const { return bits_[j] != 0; }
  void insert(std::size_t j) { bits_[j] = 1; }
  void erase(std::size_t j) { bits_[j] = 0; }
  /// Ascending.
  std::vector<std::size_t> indices() const;

  bool operator==(const Mask&) const = default;

 private:
  std::vector<std::uint8_t> bits_;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t epochs = 50;
  std::size_t batch_size = 256;
  std::size_t masks_per_example = 1;
  double inclusion_prob = 0.5;
  std::uint64_t seed = 0;
  /// Evaluations without dev improvement before stopping; 0 disables
  /// early stopping.
  std::size_t patience = 5;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct TrainSummary {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  /// Mean masked cross-entropy per training example over the last epoch.
  double final_train_loss = 0.0;
  /// Dev masked NLL (sum over examples, mean over the fixed dev masks) of
  /// the returned weights.
  double best_dev_nll = 0.0;

  bool operator==(const TrainSummary&) const = default;
};

struct LinearProbe {
  /// |labels| x d.
  Matrix<float> weights;
  std::vector<std::string> labels;
  /// Echo of the manifest of the training bundle.
  Manifest manifest;
  TrainConfig config;
  TrainSummary summary;

  std::size_t dim() const noexcept { return weights.cols(); }
  std::size_t num_labels() const noexcept { return weights.rows(); }
  bool operator==(const LinearProbe&) const = default;
};

/// Untrained probe with all-zero weights for the dataset's label inventory.
LinearProbe zero_probe(const ProbeDataset& data);

/// softmax(W h_C). Logits accumulate over ascending dimension index.
std::vector<double> forward(const LinearProbe& probe, std::span<const float> h, const Mask& mask);

/// log p(label | h_C).
double masked_log_prob(const LinearProbe& probe, std::span<const float> h, const Mask& mask,
                       std::size_t label);

/// -sum_n log p(label_n | h_C^(n)) over the view, in row order.
double masked_nll(const LinearProbe& probe, const DataView& data, const Mask& mask);
double masked_nll(const LinearProbe& probe, const ProbeDataset& data, Split split,
                  const Mask& mask);

Mask sample_mask(std::size_t d, double inclusion_prob, Engine& rng);

/// Binary entropy in nats.
double binary_entropy(double p);

struct LowerBound {
  /// Monte Carlo estimate of sum_n E_{C~q}[log p(label_n | h_n, C)].
  double data_term = 0.0;
  /// Standard error of data_term across mask samples.
  double standard_error = 0.0;
  /// log p(C) under the uniform prior over all subsets: -d log 2.
  double log_prior_per_example = 0.0;
  /// H(q) for a fixed-rate Bernoulli q: d * H_b(inclusion_prob).
  double entropy_per_example = 0.0;
  std::size_t num_examples = 0;
  std::size_t num_samples = 0;

  double total() const {
    return data_term +
           static_cast<double>(num_examples) * (log_prior_per_example + entropy_per_example);
  }
};

/// Each sample draws one mask shared by every example in the split.
LowerBound lower_bound_estimate(const LinearProbe& probe, const DataView& data,
                                const TrainConfig& config, std::size_t num_samples, Engine& rng);
LowerBound lower_bound_estimate(const LinearProbe& probe, const ProbeDataset& data, Split split,
                                const TrainConfig& config, std::size_t num_samples, Engine& rng);

/// Parameters in double precision, used during training.
using Params = Matrix<double>;

/// Masked softmax cross-entropy -log softmax(W h_C)[label] for one example.
/// When `grad` is non-null, adds scale * dLoss/dW to it.
double cross_entropy(const Params& weights, std::span<const float> h, const Mask& mask,
                     std::size_t label, Params* grad = nullptr, double scale = 1.0);

struct MaskedExample {
  std::size_t row;
  Mask mask;
};

/// Mean cross-entropy over `batch` and its gradient (same shape as weights).
double batch_loss(const Params& weights, const ProbeDataset& data,
                  std::span<const MaskedExample> batch, Params* grad);

/// Trains from zero weights with Adam on mini-batches of masked examples and
/// early stopping on the dev masked NLL. Returns the best-dev weights.
/// Deterministic for a given config.seed. Throws DivergenceError on a
/// non-finite loss.
LinearProbe train(const DataView& train_set, const DataView& dev_set, const TrainConfig& config);
/// Uses the train and dev splits of `data`.
LinearProbe train(const ProbeDataset& data, const TrainConfig& config);

/// probe.json + weights.bin ("IPWGT1\0\0", u32-LE rows, u32-LE cols,
/// row-major float32-LE).
void write_probe(const LinearProbe& probe, const std::filesystem::path& dir);
LinearProbe load_probe(const std::filesystem::path& dir);

}  // namespace xlprobe
