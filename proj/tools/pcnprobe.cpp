// pcnprobe: run a condition, summarise finished runs, or diagnose a model.
//
//   pcnprobe run --condition c5-langevin --scale desk --dataset synthetic --out runs/c5
//   pcnprobe diagnose --checkpoint runs/c1/checkpoints/epoch_005.pcnp --out runs/diag
//   pcnprobe summarize runs/c1 runs/c3 --csv gaps.csv
//
// Flags override values read from --config (INI, one section per subcommand).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pcnprobe/cli/runner.hpp"

namespace {

using pcnprobe::ExperimentConfig;

struct Overrides {
  std::string condition = "c1-det-pc";
  std::string scale = "full";
  std::string dataset = "cifar10";
  std::optional<int> epochs, decoder_epochs, steps, mcpc_samples;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> subset, eval_count, batch_size;
  std::optional<double> latent_lr, latent_momentum, weight_lr, weight_decay, decoder_lr, sigma_train;
  std::optional<double> synth_noise, synth_ratio;
  std::optional<std::string> eval_sigma, dataset_path, checkpoint;
  std::optional<std::vector<int>> checkpoint_epochs;
  std::string out = "runs/out";
  bool deterministic = true;
  bool verbose = false;
};

void add_shared(CLI::App* app, Overrides& o) {
  app->add_option("--seed", o.seed, "Root seed (default 42)");
  app->add_option("--dataset", o.dataset, "cifar10 or synthetic")->capture_default_str();
  app->add_option("--dataset-path", o.dataset_path,
                  std::string("CIFAR-10 binary directory (default $") + pcnprobe::kDataEnv + ")");
  app->add_option("--eval-count", o.eval_count, "Test images to evaluate");
  app->add_option("--batch-size", o.batch_size, "Batch size");
  app->add_option("--steps", o.steps, "Settle steps T");
  app->add_option("--latent-lr", o.latent_lr, "Settle learning rate");
  app->add_option("--latent-momentum", o.latent_momentum, "Settle momentum");
  app->add_option("--eval-sigma", o.eval_sigma, "Comma-separated evaluation noise levels");
  app->add_option("--synth-noise", o.synth_noise, "Synthetic pixel noise");
  app->add_option("--synth-ratio", o.synth_ratio, "Synthetic signal-to-noise ratio");
  app->add_option("--out", o.out, "Output directory")->capture_default_str();
  app->add_flag("--deterministic,!--no-deterministic", o.deterministic, "Reproducible mode (always on here)");
  app->add_flag("--verbose", o.verbose, "Extra decomposition columns and progress output");
}

ExperimentConfig resolve(const Overrides& o, pcnprobe::Condition condition) {
  using namespace pcnprobe;
  ExperimentConfig c = preset(condition);
  apply_scale(c, parse_scale(o.scale));
  c.dataset = parse_dataset(o.dataset);
  auto set = [](auto& dst, const auto& src) {
    if (src) dst = *src;
  };
  set(c.epochs, o.epochs);
  set(c.decoder_epochs, o.decoder_epochs);
  set(c.steps, o.steps);
  set(c.mcpc_samples, o.mcpc_samples);
  set(c.seed, o.seed);
  set(c.subset, o.subset);
  set(c.eval_count, o.eval_count);
  set(c.batch_size, o.batch_size);
  set(c.latent_lr, o.latent_lr);
  set(c.latent_momentum, o.latent_momentum);
  set(c.weight_lr, o.weight_lr);
  set(c.weight_decay, o.weight_decay);
  set(c.decoder_lr, o.decoder_lr);
  set(c.sigma_train, o.sigma_train);
  set(c.synth_noise, o.synth_noise);
  set(c.synth_ratio, o.synth_ratio);
  set(c.dataset_path, o.dataset_path);
  set(c.checkpoint_in, o.checkpoint);
  set(c.checkpoint_epochs, o.checkpoint_epochs);
  if (o.eval_sigma) c.eval_sigmas = parse_sigma_list(*o.eval_sigma);
  c.out_dir = o.out;
  c.deterministic = o.deterministic;
  c.verbose = o.verbose;
  validate(c);
  return c;
}

int execute(const ExperimentConfig& cfg) {
  if (cfg.verbose) std::cerr << pcnprobe::to_json(cfg).dump(2) << "\n";
  const auto outcome = pcnprobe::run_experiment(cfg, &std::cerr);
  if (!outcome.ok) {
    std::cerr << "pcnprobe: " << outcome.error << "\n";
    return 1;
  }
  std::cout << "wrote " << cfg.out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Predictive coding energy-probe lab"};
  app.set_config("--config", "", "INI file with [run] / [diagnose] sections");
  app.require_subcommand(1);

  Overrides run_o;
  auto* run = app.add_subcommand("run", "Train and evaluate one condition");
  run->add_option("--condition", run_o.condition,
                  "c1-det-pc, c2-diagnose, c3-bp-decoder, c4-bp, c5-langevin or c6-mcpc")
      ->capture_default_str();
  run->add_option("--scale", run_o.scale, "full, desk or ci")->capture_default_str();
  run->add_option("--epochs", run_o.epochs, "Training epochs (BP epochs for c3)");
  run->add_option("--decoder-epochs", run_o.decoder_epochs, "c3 decoder epochs");
  run->add_option("--subset", run_o.subset, "Training images (0 = whole split)");
  run->add_option("--weight-lr", run_o.weight_lr, "AdamW learning rate");
  run->add_option("--weight-decay", run_o.weight_decay, "AdamW weight decay");
  run->add_option("--decoder-lr", run_o.decoder_lr, "AdamW learning rate for the c3 decoder");
  run->add_option("--sigma-train", run_o.sigma_train, "Langevin noise during training");
  run->add_option("--mcpc-samples", run_o.mcpc_samples, "MCPC samples M (c6)");
  run->add_option("--checkpoint-epochs", run_o.checkpoint_epochs, "Epochs to checkpoint and evaluate")
      ->delimiter(',');
  run->add_option("--checkpoint", run_o.checkpoint, "Model to diagnose (c2 only)");
  add_shared(run, run_o);

  Overrides diag_o;
  auto* diag = app.add_subcommand("diagnose", "No-op and decomposition report for a checkpoint or fresh model");
  diag->add_option("--checkpoint", diag_o.checkpoint, "Checkpoint file (default: fresh initialisation)");
  add_shared(diag, diag_o);

  std::vector<std::string> dirs;
  std::string csv_out;
  auto* summ = app.add_subcommand("summarize", "Structural vs softmax AUROC2 gap per run");
  summ->add_option("dirs", dirs, "Run directories")->required();
  summ->add_option("--csv", csv_out, "Also write the table as CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto cfg = resolve(run_o, pcnprobe::parse_condition(run_o.condition));
      return execute(cfg);
    }
    if (*diag) {
      diag_o.scale = "full";
      const auto cfg = resolve(diag_o, pcnprobe::Condition::c2_diagnose);
      return execute(cfg);
    }
    std::vector<std::filesystem::path> paths(dirs.begin(), dirs.end());
    const auto summary = pcnprobe::summarize_runs(paths);
    std::cout << pcnprobe::summary_table(summary);
    if (!csv_out.empty()) {
      std::ofstream out(csv_out);
      if (!out) throw std::runtime_error("cannot write " + csv_out);
      out << pcnprobe::summary_csv(summary);
    }
    return summary.rows.empty() ? 1 : 0;
  } catch (const pcnprobe::ConfigError& e) {
    std::cerr << "pcnprobe: invalid configuration: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "pcnprobe: " << e.what() << "\n";
    return 1;
  }
}
