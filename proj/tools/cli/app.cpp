#include "app.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "commands.hpp"
#include "config.hpp"
#include "xlprobe/csv.hpp"
#include "xlprobe/error.hpp"

namespace xlprobe::cli {

namespace {

void report_error(std::ostream& err, const char* kind, const std::string& message,
                  const FormatError* format = nullptr) {
  nlohmann::ordered_json body;
  body["kind"] = kind;
  body["message"] = message;
  if (format != nullptr) {
    body["file"] = format->file().string();
    body["offset"] = format->offset();
  }
  nlohmann::ordered_json doc;
  doc["error"] = body;
  err << doc.dump() << '\n';
}

void add_overrides(CLI::App& app, std::optional<std::string>& config_path, Overrides& o) {
  app.add_option("--config", config_path,
                 std::string("Run config file (default: $") + kConfigEnvVar + ")");
  app.add_option("--bundle-root", o.bundle_roots, "Directories searched for bundles")
      ->delimiter(',');
  app.add_option("--languages", o.languages, "Languages to process (default: all found)")
      ->delimiter(',');
  app.add_option("--categories", o.categories, "Categories (default: Number,Gender,POS)")
      ->delimiter(',');
  app.add_option("--layers", o.layers, "Layers (default: 13,17)")->delimiter(',');
  app.add_option("--k", o.k, "Dimensions to select (default: 50)");
  app.add_option("--lr", o.learning_rate, "Adam learning rate (default: 1e-3)");
  app.add_option("--epochs", o.epochs, "Maximum training epochs (default: 50)");
  app.add_option("--batch-size", o.batch_size, "Minibatch size (default: 256)");
  app.add_option("--masks", o.masks_per_example, "Masks sampled per example (default: 1)");
  app.add_option("--inclusion-prob", o.inclusion_prob, "Mask inclusion probability (default: 0.5)");
  app.add_option("--patience", o.patience, "Early-stopping patience, 0 disables (default: 5)");
  app.add_option("--alpha", o.alpha, "Significance level (default: 0.05)");
  app.add_option("--bonferroni", o.bonferroni, "Divide alpha by the number of pairs");
  app.add_option("--threshold", o.threshold, "Minimum lemma frequency per split (default: 20)");
  app.add_option("--ratios", o.ratios, "train,dev,test fractions (default: 0.65,0.15,0.2)")
      ->delimiter(',');
  app.add_option("--out", o.out, "Output path");
  app.add_option("--seed", o.seed, "Random seed (default: 0)");
  app.add_option("--jobs", o.jobs, "Parallel workers for run (default: 1)");
  app.add_option("--pivot", o.pivot, "Pivot language for pairwise correlation (default: eng)");
  app.add_option("--model-tag", o.model_tag, "Model tag selected from the metrics file");
  app.add_option("--metrics", o.metrics, "Downstream metrics CSV");
  app.add_option("--heatmap-layer", o.heatmap_layer, "Layer of the heatmap table (default: 17)");
  app.add_option("--heatmap-step", o.heatmap_step, "Checkpoint of the heatmap table (default: last)");
}

CorrelateOptions correlate_options(const RunConfig& c, const std::vector<std::string>& categories) {
  CorrelateOptions o;
  o.layers = c.layers;
  o.pivot = c.pivot;
  o.model_tag = c.model_tag;
  o.categories = categories;
  return o;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-lingual probing: latent-subset probes, neuron selection, overlap "
               "statistics and transfer correlations."};
  app.name("xlprobe");
  app.require_subcommand(1);
  app.fallthrough();

  std::optional<std::string> config_path;
  Overrides overrides;
  add_overrides(app, config_path, overrides);
  std::function<void(const RunConfig&)> action;

  auto* prepare = app.add_subcommand("prepare", "Assign lemma-disjoint splits and filter rare lemmas");
  std::string prepare_in;
  prepare->add_option("--in", prepare_in, "Input bundle directory")->required();
  prepare->callback([&] {
    action = [&](const RunConfig& c) {
      const auto kept = prepare_bundle(prepare_in, c.out, c.ratios, c.threshold, c.seed);
      out << "prepared " << c.out.string() << ": " << kept << " records\n";
    };
  });

  auto* train_cmd = app.add_subcommand("train", "Train a latent-subset probe on one bundle");
  std::string train_bundle_dir;
  train_cmd->add_option("--bundle", train_bundle_dir, "Bundle directory")->required();
  train_cmd->callback([&] {
    action = [&](const RunConfig& c) {
      const LinearProbe probe = train_bundle(train_bundle_dir, c.out, c.train);
      out << "trained " << c.out.string() << ": epochs=" << probe.summary.epochs_run
          << " best_epoch=" << probe.summary.best_epoch
          << " dev_nll=" << format_number(probe.summary.best_dev_nll) << '\n';
    };
  });

  auto* select = app.add_subcommand("select", "Greedy dimension selection with a trained probe");
  std::string select_bundle_dir, select_probe;
  select->add_option("--bundle", select_bundle_dir, "Bundle directory")->required();
  select->add_option("--probe", select_probe, "Probe directory")->required();
  select->callback([&] {
    action = [&](const RunConfig& c) {
      const auto result = select_bundle(select_bundle_dir, select_probe, c.k, c.out, select_probe);
      out << "selected " << result.k << " of " << result.d << " dimensions -> " << c.out.string()
          << '\n';
    };
  });

  auto* overlap = app.add_subcommand("overlap", "Pairwise overlap matrices from selection files");
  std::vector<std::string> selection_inputs;
  overlap->add_option("--selections,selections", selection_inputs,
                      "Selection files or directories")
      ->required();
  overlap->callback([&] {
    action = [&](const RunConfig& c) {
      const std::vector<fs::path> inputs(selection_inputs.begin(), selection_inputs.end());
      const auto matrices = compute_overlap(inputs, c.alpha, c.bonferroni, c.out, err);
      out << "wrote " << matrices.size() << " overlap matrices to " << c.out.string() << '\n';
    };
  });

  auto* correlate = app.add_subcommand("correlate", "Correlate overlap trajectories with metrics");
  std::string correlate_overlap;
  std::vector<std::string> correlate_categories;
  correlate->add_option("--overlap", correlate_overlap, "Output directory of the overlap step")
      ->required();
  correlate->add_option("--category", correlate_categories,
                        "Restrict to these categories (default: average all)")
      ->delimiter(',');
  correlate->callback([&] {
    action = [&](const RunConfig& c) {
      if (!c.metrics) throw InvalidInput("correlate needs --metrics");
      const auto reports = correlate_outputs(load_overlap_dir(correlate_overlap),
                                             load_metrics_csv(*c.metrics),
                                             correlate_options(c, correlate_categories), c.out);
      for (const auto& r : reports) {
        out << r.task << ' ' << to_string(r.mode) << ": " << format_cell(r.r, r.p) << " n=" << r.n
            << '\n';
      }
    };
  });

  auto* report = app.add_subcommand("report", "Write figure-ready CSV tables");
  std::string report_overlap;
  std::vector<std::string> report_categories;
  report->add_option("--overlap", report_overlap, "Output directory of the overlap step")
      ->required();
  report->add_option("--category", report_categories, "Restrict to these categories")
      ->delimiter(',');
  report->callback([&] {
    action = [&](const RunConfig& c) {
      ReportOptions options;
      options.correlate = correlate_options(c, report_categories);
      options.heatmap_layer = c.heatmap_layer;
      options.heatmap_step = c.heatmap_step;
      const auto matrices = load_overlap_dir(report_overlap);
      if (c.metrics) {
        const auto metrics = load_metrics_csv(*c.metrics);
        write_report(matrices, &metrics, options, c.out);
      } else {
        write_report(matrices, nullptr, options, c.out);
      }
      out << "wrote report tables to " << c.out.string() << '\n';
    };
  });

  auto* synth = app.add_subcommand("synth", "Generate planted-signal bundles");
  SynthOptions synth_options;
  synth->add_option("--checkpoints", synth_options.checkpoints, "Checkpoint steps")
      ->delimiter(',')
      ->capture_default_str();
  synth->add_option("--d", synth_options.d, "Embedding dimension")->capture_default_str();
  synth->add_option("--k-true", synth_options.k_true, "Planted dimensions per bundle")
      ->capture_default_str();
  synth->add_option("--n-per-class", synth_options.n_per_class, "Records per label")
      ->capture_default_str();
  synth->add_option("--labels", synth_options.num_labels, "Number of labels")->capture_default_str();
  synth->add_option("--separation", synth_options.separation, "Class mean separation")
      ->capture_default_str();
  synth->add_option("--noise", synth_options.noise, "Noise standard deviation")
      ->capture_default_str();
  synth->add_option("--shared", synth_options.shared,
                    "Planted fraction shared across languages, per checkpoint")
      ->delimiter(',');
  synth->add_flag("--raw", synth_options.raw, "Leave splits unassigned");
  synth->add_option("--lemma-group", synth_options.lemma_group, "Records per lemma")
      ->capture_default_str();
  synth->callback([&] {
    action = [&](const RunConfig& c) {
      if (overrides.languages) synth_options.languages = c.languages;
      synth_options.categories = c.categories;
      synth_options.layers = c.layers;
      synth_options.seed = c.seed;
      synth_options.ratios = c.ratios;
      const auto dirs = synth_bundles(synth_options, c.out);
      out << "wrote " << dirs.size() << " bundles to " << c.out.string() << '\n';
    };
  });

  auto* run = app.add_subcommand("run", "Full pipeline over every configured bundle");
  run->callback([&] {
    action = [&](const RunConfig& c) {
      run_pipeline(c, err);
      out << "pipeline outputs in " << c.out.string() << '\n';
    };
  });

  auto* show = app.add_subcommand("config", "Print the effective configuration");
  show->callback([&] { action = [&](const RunConfig& c) { out << describe(c); }; });

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      if (e.get_exit_code() == 0) return app.exit(e, out, err);
      report_error(err, "usage", e.what());
      return 2;
    }
    std::optional<fs::path> path;
    if (config_path) path = *config_path;
    const RunConfig config = resolve_config(path, overrides);
    action(config);
    return 0;
  } catch (const FormatError& e) {
    report_error(err, "format", e.what(), &e);
    return 2;
  } catch (const InvalidInput& e) {
    report_error(err, "invalid_input", e.what());
    return 2;
  } catch (const DivergenceError& e) {
    report_error(err, "divergence", e.what());
    return 1;
  } catch (const std::exception& e) {
    report_error(err, "internal", e.what());
    return 1;
  }
}

}  // namespace xlprobe::cli
