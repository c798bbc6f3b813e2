#include "commands.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <thread>
#include <tuple>

#include "xlprobe/csv.hpp"
#include "xlprobe/error.hpp"
#include "xlprobe/random.hpp"
#include "xlprobe/selection.hpp"
#include "xlprobe/synth.hpp"

namespace xlprobe::cli {

namespace {

std::ofstream open_output(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_output(path);
  out << text;
}

bool contains(const std::vector<std::string>& items, const std::string& item) {
  return std::find(items.begin(), items.end(), item) != items.end();
}

std::string join_layers(const std::vector<int>& layers) {
  std::string out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i > 0) out += '+';
    out += std::to_string(layers[i]);
  }
  return out;
}

std::map<std::string, std::vector<OverlapMatrix>> by_category(
    const std::vector<OverlapMatrix>& matrices, const std::vector<std::string>& categories) {
  std::map<std::string, std::vector<OverlapMatrix>> out;
  for (const auto& m : matrices) {
    if (categories.empty() || contains(categories, m.category)) out[m.category].push_back(m);
  }
  for (const auto& c : categories) {
    if (!out.contains(c)) throw InvalidInput("no overlap matrices for category '" + c + "'");
  }
  if (out.empty()) throw InvalidInput("no overlap matrices");
  return out;
}

std::vector<OverlapSeries> per_category_series(
    const std::map<std::string, std::vector<OverlapMatrix>>& grouped, const std::vector<int>& layers) {
  std::vector<OverlapSeries> out;
  for (const auto& [category, mats] : grouped) out.push_back(layer_average_series(mats, layers));
  return out;
}

}  // namespace

std::size_t prepare_bundle(const fs::path& in, const fs::path& out, const SplitRatios& ratios,
                           std::size_t threshold, std::uint64_t seed) {
  const ProbeDataset raw = load_bundle(in);
  const ProbeDataset prepared = frequency_filter(lemma_disjoint_split(raw, ratios, seed), threshold);
  if (prepared.size() == 0) {
    throw InvalidInput("no record of " + in.string() + " survives the lemma threshold of " +
                       std::to_string(threshold));
  }
  write_bundle(prepared, out);
  return prepared.size();
}

LinearProbe train_bundle(const fs::path& bundle, const fs::path& probe_dir,
                         const TrainConfig& config) {
  const ProbeDataset data = load_bundle(bundle);
  if (!data.splits_assigned()) {
    throw InvalidInput(bundle.string() + " has records without a split; run prepare first");
  }
  LinearProbe probe = train(data, config);
  write_probe(probe, probe_dir);
  return probe;
}

SelectionResult select_bundle(const fs::path& bundle, const fs::path& probe_dir, std::size_t k,
                              const fs::path& out_json, const std::string& probe_file) {
  const ProbeDataset data = load_bundle(bundle);
  const LinearProbe probe = load_probe(probe_dir);
  if (probe.manifest.key() != data.key()) {
    throw InvalidInput("probe was trained on " + to_string(probe.manifest.key()) +
                       ", not on " + to_string(data.key()));
  }
  if (probe.dim() != data.dim() || probe.labels != data.manifest().label_inventory) {
    throw InvalidInput("probe shape does not match bundle " + bundle.string());
  }
  SelectionFile file;
  file.result = greedy_select(probe, data, k);
  file.probe_file = probe_file;
  file.created_at = selection_timestamp();
  write_selection(file, out_json);
  return file.result;
}

std::vector<fs::path> collect_json_files(const std::vector<fs::path>& inputs) {
  std::vector<fs::path> out;
  for (const auto& input : inputs) {
    if (fs::is_directory(input)) {
      for (const auto& entry : fs::recursive_directory_iterator(input)) {
        if (entry.is_regular_file() && entry.path().extension() == ".json") {
          out.push_back(entry.path());
        }
      }
    } else if (fs::is_regular_file(input)) {
      out.push_back(input);
    } else {
      throw InvalidInput("no such file or directory: " + input.string());
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<OverlapMatrix> compute_overlap(const std::vector<fs::path>& selection_inputs,
                                           double alpha, bool bonferroni, const fs::path& out_dir,
                                           std::ostream& log) {
  const auto files = collect_json_files(selection_inputs);
  if (files.empty()) throw InvalidInput("no selection files found");

  using GroupKey = std::tuple<std::string, int, std::int64_t>;
  std::map<GroupKey, std::map<std::string, SelectionResult>> groups;
  for (const auto& file : files) {
    SelectionFile sel = load_selection(file);
    const DatasetKey& key = sel.result.dataset_key;
    auto& group = groups[{key.category, key.layer, key.checkpoint_step}];
    if (!group.emplace(key.language, std::move(sel.result)).second) {
      throw InvalidInput("two selections for " + to_string(key) + " (second: " + file.string() +
                         ")");
    }
  }

  std::vector<OverlapMatrix> matrices;
  for (const auto& [key, by_language] : groups) {
    if (by_language.size() < 2) {
      log << "skipping " << std::get<0>(key) << " layer " << std::get<1>(key) << " step "
          << std::get<2>(key) << ": only one language\n";
      continue;
    }
    matrices.push_back(pairwise_matrix(by_language, alpha, bonferroni));
  }
  if (matrices.empty()) throw InvalidInput("no group has selections for two or more languages");

  auto csv = open_output(out_dir / "overlap.csv");
  write_overlap_csv(csv, matrices);
  for (const auto& m : matrices) write_matrix_json(m, out_dir / "matrices" / matrix_file_name(m));
  return matrices;
}

std::vector<OverlapMatrix> load_overlap_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw InvalidInput("no such directory: " + dir.string());
  const fs::path source = fs::is_directory(dir / "matrices") ? dir / "matrices" : dir;
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(source)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw InvalidInput("no overlap matrices in " + source.string());
  std::vector<OverlapMatrix> out;
  for (const auto& f : files) out.push_back(load_matrix_json(f));
  return out;
}

OverlapInputs overlap_inputs(const std::vector<OverlapMatrix>& matrices,
                             const CorrelateOptions& options) {
  const auto grouped = by_category(matrices, options.categories);
  OverlapInputs out;
  out.per_category = per_category_series(grouped, options.layers);
  out.average = category_average(out.per_category);

  std::set<std::string> languages;
  for (const auto& [category, mats] : grouped) {
    for (const auto& m : mats) languages.insert(m.languages.begin(), m.languages.end());
  }
  if (!languages.contains(options.pivot)) {
    throw InvalidInput("pivot language '" + options.pivot + "' is absent from the overlap data");
  }
  for (const auto& target : languages) {
    if (target == options.pivot) continue;
    const LanguagePair pair{options.pivot, target};
    std::vector<OverlapSeries> series;
    for (const auto& [category, mats] : grouped) {
      std::vector<OverlapMatrix> with_pair;
      for (const auto& m : mats) {
        if (m.index_of(options.pivot) && m.index_of(target)) with_pair.push_back(m);
      }
      if (!with_pair.empty()) series.push_back(layer_average_series(with_pair, options.layers, pair));
    }
    if (!series.empty()) out.pairwise.emplace(target, category_average(series));
  }
  return out;
}

std::vector<std::vector<MetricSeries>> metric_groups(const std::vector<MetricSeries>& metrics,
                                                     const std::string& model_tag) {
  std::set<std::string> tags;
  for (const auto& m : metrics) tags.insert(m.model_tag);
  std::string tag = model_tag;
  if (tag.empty()) {
    if (tags.size() != 1) {
      std::string list;
      for (const auto& t : tags) list += (list.empty() ? "" : ", ") + t;
      throw InvalidInput("metrics hold several model tags (" + list + "); choose one with --model-tag");
    }
    tag = *tags.begin();
  } else if (!tags.contains(tag)) {
    throw InvalidInput("no metrics for model tag '" + tag + "'");
  }
  std::map<std::pair<std::string, std::string>, std::vector<MetricSeries>> grouped;
  for (const auto& m : metrics) {
    if (m.model_tag == tag) grouped[{m.task, m.metric_name}].push_back(m);
  }
  std::vector<std::vector<MetricSeries>> out;
  for (auto& [key, series] : grouped) out.push_back(std::move(series));
  return out;
}

std::vector<CorrelationReport> correlate_outputs(const std::vector<OverlapMatrix>& matrices,
                                                 const std::vector<MetricSeries>& metrics,
                                                 const CorrelateOptions& options,
                                                 const fs::path& out_dir) {
  const OverlapInputs inputs = overlap_inputs(matrices, options);
  std::vector<CorrelationReport> reports;
  for (const auto& group : metric_groups(metrics, options.model_tag)) {
    reports.push_back(correlate_average(inputs.average, group));
    reports.push_back(correlate_pairwise(inputs.pairwise, group));
  }
  write_correlation_json(out_dir / "correlation.json", reports);
  auto table = open_output(out_dir / "table.csv");
  write_correlation_table(table, reports);
  return reports;
}

void write_report(const std::vector<OverlapMatrix>& matrices,
                  const std::vector<MetricSeries>* metrics, const ReportOptions& options,
                  const fs::path& out_dir) {
  const auto& copts = options.correlate;
  const auto grouped = by_category(matrices, copts.categories);
  const std::string layers = join_layers(copts.layers);

  {
    auto out = open_output(out_dir / "trajectory.csv");
    out << "category,layers,checkpoint_step,overlap\n";
    for (const auto& s : per_category_series(grouped, copts.layers)) {
      for (std::size_t i = 0; i < s.values.size(); ++i) {
        out << s.category << ',' << layers << ',' << s.checkpoint_steps[i] << ','
            << format_number(s.values[i]) << '\n';
      }
    }
  }

  {
    std::vector<const OverlapMatrix*> sorted;
    for (const auto& [category, mats] : grouped) {
      for (const auto& m : mats) sorted.push_back(&m);
    }
    std::sort(sorted.begin(), sorted.end(), [](const OverlapMatrix* a, const OverlapMatrix* b) {
      return std::tie(a->category, a->layer, a->checkpoint_step) <
             std::tie(b->category, b->layer, b->checkpoint_step);
    });
    auto out = open_output(out_dir / "layer_trajectory.csv");
    out << "category,layer,checkpoint_step,overlap\n";
    for (const auto* m : sorted) {
      out << m->category << ',' << m->layer << ',' << m->checkpoint_step << ','
          << format_number(average_rate(*m)) << '\n';
    }
  }

  {
    auto out = open_output(out_dir / "heatmap.csv");
    out << "category,layer,checkpoint_step,lang_a,lang_b,rate,p_value,significant\n";
    for (const auto& [category, mats] : grouped) {
      const OverlapMatrix* chosen = nullptr;
      for (const auto& m : mats) {
        if (m.layer != options.heatmap_layer) continue;
        if (options.heatmap_step) {
          if (m.checkpoint_step == *options.heatmap_step) chosen = &m;
        } else if (chosen == nullptr || m.checkpoint_step > chosen->checkpoint_step) {
          chosen = &m;
        }
      }
      if (chosen == nullptr) {
        if (options.heatmap_step) {
          throw InvalidInput("no " + category + " matrix at layer " +
                             std::to_string(options.heatmap_layer) + " step " +
                             std::to_string(*options.heatmap_step));
        }
        continue;
      }
      const OverlapMatrix& m = *chosen;
      write_overlap_csv(out, std::span(&m, 1), false);
    }
  }

  if (metrics == nullptr) return;
  const OverlapInputs inputs = overlap_inputs(matrices, copts);
  auto scatter = open_output(out_dir / "scatter.csv");
  auto average = open_output(out_dir / "average.csv");
  scatter << "model_tag,task,metric_name,language,checkpoint_step,overlap,metric\n";
  average << "model_tag,task,metric_name,checkpoint_step,overlap,metric\n";
  for (const auto& group : metric_groups(*metrics, copts.model_tag)) {
    const MetricSeries& head = group.front();
    const std::string prefix = head.model_tag + ',' + head.task + ',' + head.metric_name + ',';
    for (const auto& pt : join_average(inputs.average, group).points) {
      average << prefix << pt.checkpoint_step << ',' << format_number(pt.overlap) << ','
              << format_number(pt.metric) << '\n';
    }
    for (const auto& pt : join_pairwise(inputs.pairwise, group).points) {
      scatter << prefix << pt.language << ',' << pt.checkpoint_step << ','
              << format_number(pt.overlap) << ',' << format_number(pt.metric) << '\n';
    }
  }
}

std::vector<fs::path> synth_bundles(const SynthOptions& o, const fs::path& out) {
  if (o.languages.empty() || o.categories.empty() || o.layers.empty() || o.checkpoints.empty()) {
    throw InvalidInput("synth needs at least one language, category, layer and checkpoint");
  }
  if (o.shared.size() != 1 && o.shared.size() != o.checkpoints.size()) {
    throw InvalidInput("give one shared fraction, or one per checkpoint");
  }
  for (double f : o.shared) {
    if (!(f >= 0.0 && f <= 1.0)) throw InvalidInput("shared fractions must lie in [0, 1]");
  }
  if (o.k_true == 0 || 2 * o.k_true > o.d) {
    throw InvalidInput("synth needs 0 < k_true <= d/2");
  }
  if (o.lemma_group == 0) throw InvalidInput("lemma group size must be positive");

  std::vector<fs::path> dirs;
  for (const auto& category : o.categories) {
    for (int layer : o.layers) {
      for (std::size_t c = 0; c < o.checkpoints.size(); ++c) {
        const std::int64_t step = o.checkpoints[c];
        const double fraction = o.shared.size() == 1 ? o.shared[0] : o.shared[c];
        const auto n_shared = static_cast<std::size_t>(std::llround(fraction * o.k_true));

        Engine base_rng = make_engine(
            o.seed, stable_hash(category + '|' + std::to_string(layer) + '|' + std::to_string(step)));
        std::vector<std::size_t> perm(o.d);
        for (std::size_t j = 0; j < o.d; ++j) perm[j] = j;
        shuffle(std::span(perm), base_rng);
        const std::vector<std::size_t> base(perm.begin(), perm.begin() + o.k_true);
        const std::vector<std::size_t> rest(perm.begin() + o.k_true, perm.end());

        for (const auto& language : o.languages) {
          const DatasetKey key{language, category, layer, step};
          const std::string name = to_string(key);
          Engine rng = make_engine(o.seed, stable_hash(name));
          std::vector<std::size_t> shared = base;
          std::vector<std::size_t> own = rest;
          shuffle(std::span(shared), rng);
          shuffle(std::span(own), rng);

          PlantedSpec spec;
          spec.d = o.d;
          spec.k_true = o.k_true;
          spec.planted_dims.assign(shared.begin(), shared.begin() + n_shared);
          spec.planted_dims.insert(spec.planted_dims.end(), own.begin(),
                                   own.begin() + (o.k_true - n_shared));
          spec.n_per_class = o.n_per_class;
          spec.num_labels = o.num_labels;
          spec.class_separation = o.separation;
          spec.noise_std = o.noise;
          spec.seed = derive_seed(o.seed, stable_hash(name));
          spec.ratios = o.ratios;
          spec.language = language;
          spec.category = category;
          spec.layer = layer;
          spec.checkpoint_step = step;
          ProbeDataset data = generate_planted(spec).data;

          if (o.raw || o.lemma_group > 1) {
            std::vector<Record> records = data.records();
            for (std::size_t i = 0; i < records.size(); ++i) {
              if (o.lemma_group > 1) records[i].lemma = "lemma" + std::to_string(i / o.lemma_group);
              if (o.raw) records[i].split = Split::none;
            }
            data = ProbeDataset(data.manifest(), std::move(records), data.embeddings());
          }
          dirs.push_back(out / name);
          write_bundle(data, dirs.back());
        }
      }
    }
  }
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

std::vector<fs::path> find_bundles(const std::vector<fs::path>& roots) {
  std::vector<fs::path> out;
  for (const auto& root : roots) {
    if (!fs::is_directory(root)) throw InvalidInput("bundle root not found: " + root.string());
    if (fs::is_regular_file(root / "manifest.json")) out.push_back(root);
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
      if (entry.is_directory() && fs::is_regular_file(entry.path() / "manifest.json")) {
        out.push_back(entry.path());
      }
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void run_pipeline(const RunConfig& config, std::ostream& log) {
  if (config.bundle_roots.empty()) throw InvalidInput("no bundle roots configured");
  std::map<DatasetKey, fs::path> bundles;
  for (const auto& dir : find_bundles(config.bundle_roots)) {
    const Manifest m = load_manifest(dir);
    if (!config.languages.empty() && !contains(config.languages, m.language)) continue;
    if (!contains(config.categories, m.category)) continue;
    if (std::find(config.layers.begin(), config.layers.end(), m.layer) == config.layers.end()) {
      continue;
    }
    if (const auto [it, inserted] = bundles.emplace(m.key(), dir); !inserted) {
      throw InvalidInput("bundles " + it->second.string() + " and " + dir.string() +
                         " share the key " + to_string(m.key()));
    }
  }
  if (bundles.empty()) throw InvalidInput("no bundle matches the configured languages, categories and layers");

  const fs::path& out = config.out;
  fs::create_directories(out);
  write_text(out / "config.txt", describe(config));

  const std::vector<std::pair<DatasetKey, fs::path>> jobs(bundles.begin(), bundles.end());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> done{0};
  std::mutex log_mutex;

  auto process = [&](const DatasetKey& key, const fs::path& dir) {
    const std::string name = to_string(key);
    const std::uint64_t seed = derive_seed(config.seed, stable_hash(name));
    ProbeDataset data = load_bundle(dir);
    if (!data.splits_assigned()) {
      data = frequency_filter(lemma_disjoint_split(data, config.ratios, seed), config.threshold);
      write_bundle(data, out / "prepared" / name);
    }
    TrainConfig train_config = config.train;
    train_config.seed = seed;
    const LinearProbe probe = train(data, train_config);
    write_probe(probe, out / "probes" / name);
    SelectionFile file;
    file.result = greedy_select(probe, data, config.k);
    file.probe_file = "probes/" + name;
    file.created_at = selection_timestamp();
    write_selection(file, out / "selections" / (name + ".json"));

    const std::lock_guard lock(log_mutex);
    log << '[' << ++done << '/' << jobs.size() << "] " << name
        << ": epochs=" << probe.summary.epochs_run
        << " dev_nll=" << format_number(probe.summary.best_dev_nll) << '\n';
  };
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        process(jobs[i].first, jobs[i].second);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    const std::size_t workers = std::min(config.jobs, jobs.size());
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  const auto matrices =
      compute_overlap({out / "selections"}, config.alpha, config.bonferroni, out / "overlap", log);

  ReportOptions report;
  report.correlate.layers = config.layers;
  report.correlate.pivot = config.pivot;
  report.correlate.model_tag = config.model_tag;
  report.heatmap_layer = config.heatmap_layer;
  report.heatmap_step = config.heatmap_step;
  if (config.metrics) {
    const auto metrics = load_metrics_csv(*config.metrics);
    correlate_outputs(matrices, metrics, report.correlate, out / "correlation");
    write_report(matrices, &metrics, report, out / "report");
  } else {
    write_report(matrices, nullptr, report, out / "report");
  }
}

}  // namespace xlprobe::cli
