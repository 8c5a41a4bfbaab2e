#pragma once

// Experiment configuration: the six condition presets, scale factors and
// validation.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace pcnprobe {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Condition { c1_det_pc, c2_diagnose, c3_bp_decoder, c4_bp, c5_langevin, c6_mcpc };
enum class Scale { full, desk, ci };
enum class DatasetSource { cifar10, synthetic };

inline const std::vector<std::pair<Condition, std::string>>& condition_names() {
  static const std::vector<std::pair<Condition, std::string>> names{
      {Condition::c1_det_pc, "c1-det-pc"},     {Condition::c2_diagnose, "c2-diagnose"},
      {Condition::c3_bp_decoder, "c3-bp-decoder"}, {Condition::c4_bp, "c4-bp"},
      {Condition::c5_langevin, "c5-langevin"}, {Condition::c6_mcpc, "c6-mcpc"}};
  return names;
}

inline std::string to_string(Condition c) {
  for (const auto& [k, v] : condition_names())
    if (k == c) return v;
  return "unknown";
}

inline Condition parse_condition(const std::string& s) {
  for (const auto& [k, v] : condition_names())
    if (v == s || v.substr(0, 2) == s) return k;
  throw ConfigError("unknown condition '" + s + "'");
}

inline std::string to_string(Scale s) { return s == Scale::full ? "full" : s == Scale::desk ? "desk" : "ci"; }
inline Scale parse_scale(const std::string& s) {
  if (s == "full") return Scale::full;
  if (s == "desk") return Scale::desk;
  if (s == "ci") return Scale::ci;
  throw ConfigError("unknown scale '" + s + "' (full, desk or ci)");
}

inline std::string to_string(DatasetSource d) { return d == DatasetSource::cifar10 ? "cifar10" : "synthetic"; }
inline DatasetSource parse_dataset(const std::string& s) {
  if (s == "cifar10") return DatasetSource::cifar10;
  if (s == "synthetic") return DatasetSource::synthetic;
  throw ConfigError("unknown dataset '" + s + "' (cifar10 or synthetic)");
}

inline std::vector<double> parse_sigma_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw ConfigError("bad sigma value '" + item + "'");
    out.push_back(v);
  }
  return out;
}

/// Shortest round-tripping decimal form; keeps CSVs stable across runs.
inline std::string format_number(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct ExperimentConfig {
  Condition condition = Condition::c1_det_pc;
  Scale scale = Scale::full;
  int epochs = 25;
  int decoder_epochs = 0;  // c3 only
  std::uint64_t seed = 42;
  DatasetSource dataset = DatasetSource::cifar10;
  std::string dataset_path;
  std::size_t subset = 0;  // training images, 0 = whole split
  std::size_t eval_count = 1280;
  std::size_t batch_size = 128;
  int steps = 13;  // T
  double latent_lr = 5e-2;
  double latent_momentum = 0.5;
  double weight_lr = 1e-4;
  double weight_decay = 1e-4;
  double decoder_lr = 1e-4;  // c3 decoder phase
  double sigma_train = 0.0;
  int mcpc_samples = 1;  // M; > 1 selects MCPC training
  std::vector<double> eval_sigmas{0.0};
  std::vector<int> checkpoint_epochs;  // empty = final epoch only
  std::string checkpoint_in;           // c2: model to diagnose (empty = fresh init)
  std::string out_dir = "runs/out";
  bool deterministic = true;
  bool verbose = false;
  // synthetic generator
  double synth_noise = 1.0;
  double synth_ratio = 2.69;

  bool trains_pc() const {
    return condition == Condition::c1_det_pc || condition == Condition::c5_langevin ||
           condition == Condition::c6_mcpc;
  }
  bool has_structural_probe() const { return condition != Condition::c4_bp; }

  /// Epochs at which probes run, ascending, always including the last.
  std::vector<int> evaluation_epochs() const {
    std::vector<int> out;
    for (const int e : checkpoint_epochs)
      if (e >= 1 && e < epochs) out.push_back(e);
    out.push_back(epochs);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }
};

/// Presets at full scale: the reference protocol for each condition.
inline ExperimentConfig preset(Condition c) {
  ExperimentConfig cfg;
  cfg.condition = c;
  switch (c) {
    case Condition::c1_det_pc:
      cfg.epochs = 25;
      cfg.checkpoint_epochs = {5, 10, 15, 20, 25};
      break;
    case Condition::c2_diagnose:
      cfg.epochs = 0;
      break;
    case Condition::c3_bp_decoder:
      cfg.epochs = 5;
      cfg.decoder_epochs = 5;
      break;
    case Condition::c4_bp:
      cfg.epochs = 25;
      cfg.checkpoint_epochs = {5, 10, 15, 20, 25};
      break;
    case Condition::c5_langevin:
    case Condition::c6_mcpc:
      cfg.epochs = 10;
      cfg.steps = 50;
      cfg.latent_lr = 1e-2;
      cfg.sigma_train = 1e-2;
      cfg.eval_sigmas = c == Condition::c5_langevin ? std::vector<double>{0.0, 1e-3, 1e-2, 1e-1, 1.0}
                                                    : std::vector<double>{0.0, 1e-2};
      cfg.mcpc_samples = c == Condition::c6_mcpc ? 10 : 1;
      break;
  }
  return cfg;
}

/// desk: 10k training images, short schedules. ci: 1k images, one epoch,
/// 256 evaluation images. Applied to a preset before flag overrides.
inline void apply_scale(ExperimentConfig& cfg, Scale s) {
  cfg.scale = s;
  if (s == Scale::full) return;
  const bool desk = s == Scale::desk;
  cfg.subset = desk ? 10000 : 1000;
  cfg.eval_count = desk ? 1280 : 256;
  switch (cfg.condition) {
    case Condition::c1_det_pc:
      cfg.epochs = desk ? 5 : 1;
      cfg.checkpoint_epochs = desk ? std::vector<int>{1, 2, 3, 4, 5} : std::vector<int>{1};
      break;
    case Condition::c2_diagnose:
      break;
    case Condition::c3_bp_decoder:
      cfg.epochs = desk ? 5 : 1;
      cfg.decoder_epochs = desk ? 5 : 1;
      break;
    case Condition::c4_bp:
      cfg.epochs = desk ? 5 : 1;
      cfg.checkpoint_epochs = desk ? std::vector<int>{1, 2, 3, 4, 5} : std::vector<int>{1};
      break;
    case Condition::c5_langevin:
    case Condition::c6_mcpc:
      cfg.epochs = desk ? 2 : 1;
      cfg.checkpoint_epochs.clear();
      break;
  }
}

inline void validate(const ExperimentConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (c.epochs < 0 || c.decoder_epochs < 0) fail("epochs must be non-negative");
  if (c.condition != Condition::c2_diagnose && c.epochs == 0) fail(to_string(c.condition) + " needs at least one epoch");
  if (c.condition == Condition::c3_bp_decoder && c.decoder_epochs == 0) fail("c3-bp-decoder needs decoder epochs");
  if (c.condition != Condition::c3_bp_decoder && c.decoder_epochs != 0) fail("decoder epochs only apply to c3-bp-decoder");
  if (c.batch_size == 0) fail("batch size must be positive");
  if (c.eval_count == 0) fail("evaluation set must be non-empty");
  if (c.steps < 0) fail("settle steps must be non-negative");
  if (c.latent_lr < 0 || c.weight_lr < 0 || c.weight_decay < 0 || c.decoder_lr < 0) fail("learning rates and decay must be non-negative");
  if (c.sigma_train < 0) fail("training noise must be non-negative");
  if (c.eval_sigmas.empty()) fail("at least one evaluation sigma is required");
  for (const double s : c.eval_sigmas)
    if (!(s >= 0)) fail("evaluation sigma must be non-negative");
  if (c.mcpc_samples < 1) fail("MCPC sample count must be at least 1");
  if (c.mcpc_samples > c.steps + 1) fail("MCPC sample count exceeds the settle trajectory");
  if (c.mcpc_samples > 1 && c.condition != Condition::c6_mcpc) fail("MCPC samples only apply to c6-mcpc");
  if (!c.trains_pc() && c.sigma_train > 0) fail("training noise only applies to PC conditions");
  if (c.condition == Condition::c4_bp && (c.eval_sigmas.size() != 1 || c.eval_sigmas[0] != 0.0)) {
    fail("c4-bp has no structural probe; evaluation sigmas do not apply");
  }
  if (!c.checkpoint_in.empty() && c.condition != Condition::c2_diagnose) fail("--checkpoint only applies to c2-diagnose");
  if (c.out_dir.empty()) fail("output directory required");
  if (c.synth_noise < 0 || c.synth_ratio < 0) fail("synthetic noise and ratio must be non-negative");
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"condition", to_string(c.condition)},
          {"scale", to_string(c.scale)},
          {"epochs", c.epochs},
          {"decoder_epochs", c.decoder_epochs},
          {"seed", c.seed},
          {"dataset", to_string(c.dataset)},
          {"dataset_path", c.dataset_path},
          {"subset", c.subset},
          {"eval_count", c.eval_count},
          {"batch_size", c.batch_size},
          {"steps", c.steps},
          {"latent_lr", c.latent_lr},
          {"latent_momentum", c.latent_momentum},
          {"weight_lr", c.weight_lr},
          {"weight_decay", c.weight_decay},
          {"decoder_lr", c.decoder_lr},
          {"sigma_train", c.sigma_train},
          {"mcpc_samples", c.mcpc_samples},
          {"eval_sigmas", c.eval_sigmas},
          {"checkpoint_epochs", c.checkpoint_epochs},
          {"checkpoint_in", c.checkpoint_in},
          {"out_dir", c.out_dir},
          {"deterministic", c.deterministic},
          {"verbose", c.verbose},
          {"synth_noise", c.synth_noise},
          {"synth_ratio", c.synth_ratio}};
}

/// The resolved config as a [run] section that `pcnprobe --config` accepts.
inline std::string to_ini(const ExperimentConfig& c) {
  std::ostringstream out;
  auto kv = [&](const char* key, const std::string& value) { out << key << "=" << value << "\n"; };
  auto quoted = [](const std::string& v) { return "\"" + v + "\""; };
  auto joined = [](const auto& values) {
    std::string s;
    for (const auto& v : values) s += (s.empty() ? "" : ",") + format_number(static_cast<double>(v));
    return s;
  };
  out << "[run]\n";
  kv("condition", quoted(to_string(c.condition)));
  kv("scale", quoted(to_string(c.scale)));
  kv("epochs", std::to_string(c.epochs));
  kv("decoder-epochs", std::to_string(c.decoder_epochs));
  kv("seed", std::to_string(c.seed));
  kv("dataset", quoted(to_string(c.dataset)));
  if (!c.dataset_path.empty()) kv("dataset-path", quoted(c.dataset_path));
  kv("subset", std::to_string(c.subset));
  kv("eval-count", std::to_string(c.eval_count));
  kv("batch-size", std::to_string(c.batch_size));
  kv("steps", std::to_string(c.steps));
  kv("latent-lr", format_number(c.latent_lr));
  kv("latent-momentum", format_number(c.latent_momentum));
  kv("weight-lr", format_number(c.weight_lr));
  kv("weight-decay", format_number(c.weight_decay));
  kv("decoder-lr", format_number(c.decoder_lr));
  kv("sigma-train", format_number(c.sigma_train));
  kv("mcpc-samples", std::to_string(c.mcpc_samples));
  kv("eval-sigma", quoted(joined(c.eval_sigmas)));
  if (!c.checkpoint_epochs.empty()) kv("checkpoint-epochs", quoted(joined(c.checkpoint_epochs)));
  if (!c.checkpoint_in.empty()) kv("checkpoint", quoted(c.checkpoint_in));
  kv("out", quoted(c.out_dir));
  kv("deterministic", c.deterministic ? "true" : "false");
  kv("verbose", c.verbose ? "true" : "false");
  kv("synth-noise", format_number(c.synth_noise));
  kv("synth-ratio", format_number(c.synth_ratio));
  return out.str();
}

}  // namespace pcnprobe
