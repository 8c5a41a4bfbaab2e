#pragma once

// End-to-end execution of one condition and the summary across runs.
//
// Output directory layout:
//   results.csv         condition,epoch,probe,sigma,n_eval,accuracy,auroc2,seed
//   probe_records.csv   epoch,sigma,image_index,probe,predicted,margin,correct
//   decomposition.csv   final evaluation epoch, sigma = 0
//   noop.json           settle telemetry at the final epoch, per sigma
//   config.json, manifest.json, checkpoints/epoch_NNN.pcnp

#include <bit>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "json.hpp"
#include "pcnprobe/audit/audit.hpp"
#include "pcnprobe/cli/config.hpp"
#include "pcnprobe/data/data.hpp"
#include "pcnprobe/engine/training.hpp"
#include "pcnprobe/metrics/metrics.hpp"
#include "pcnprobe/model/checkpoint.hpp"

namespace pcnprobe {

inline constexpr const char* kCodeVersion = "pcnprobe 1.0.0";
inline constexpr const char* kDataEnv = "PCNPROBE_DATA";

using json = nlohmann::json;

inline std::string sha256_hex(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed for " + path.string());
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int{digest[i]};
  return out.str();
}

struct ResultRow {
  std::string condition;
  int epoch = 0;
  ProbeKind probe = ProbeKind::structural;
  double sigma = 0.0;
  std::size_t n_eval = 0;
  double accuracy = 0.0;
  std::optional<double> auroc2;
  std::uint64_t seed = 0;
};

inline const char* kResultsHeader = "condition,epoch,probe,sigma,n_eval,accuracy,auroc2,seed";

inline std::string csv_line(const ResultRow& r) {
  return r.condition + "," + std::to_string(r.epoch) + "," + to_string(r.probe) + "," + format_number(r.sigma) + "," +
         std::to_string(r.n_eval) + "," + format_number(r.accuracy) + "," +
         (r.auroc2 ? format_number(*r.auroc2) : std::string("NA")) + "," + std::to_string(r.seed);
}

/// Parses results.csv; throws DataError on a malformed file.
inline std::vector<ResultRow> read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kResultsHeader) throw DataError(path.string() + ": bad header");
  std::vector<ResultRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected 8 fields");
    try {
      ResultRow r;
      r.condition = f[0];
      r.epoch = std::stoi(f[1]);
      if (f[2] != "structural" && f[2] != "softmax") throw std::invalid_argument("probe");
      r.probe = f[2] == "structural" ? ProbeKind::structural : ProbeKind::softmax;
      r.sigma = std::stod(f[3]);
      r.n_eval = std::stoul(f[4]);
      r.accuracy = std::stod(f[5]);
      if (f[6] != "NA") r.auroc2 = std::stod(f[6]);
      r.seed = std::stoull(f[7]);
      rows.push_back(r);
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": malformed row");
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Data

struct RunData {
  Dataset train;
  Dataset eval;
};

inline std::filesystem::path dataset_root(const ExperimentConfig& cfg) {
  if (!cfg.dataset_path.empty()) return cfg.dataset_path;
  if (const char* env = std::getenv(kDataEnv)) return env;
  return {};
}

inline RunData load_run_data(const ExperimentConfig& cfg) {
  RunData d;
  if (cfg.dataset == DatasetSource::cifar10) {
    const auto root = dataset_root(cfg);
    if (root.empty()) throw DataError(std::string("no dataset path: pass --dataset-path or set ") + kDataEnv);
    d.eval = load_cifar10(root, Split::test).head(cfg.eval_count);
    if (cfg.condition != Condition::c2_diagnose) {
      d.train = load_cifar10(root, Split::train);
      if (cfg.subset > 0) d.train = d.train.head(std::min(cfg.subset, d.train.size()));
    }
    return d;
  }
  SynthConfig sc;
  sc.seed = cfg.seed;
  sc.noise = cfg.synth_noise;
  sc.signal_ratio = cfg.synth_ratio;
  sc.count = cfg.eval_count;
  d.eval = synth_dataset(sc, Split::test);
  if (cfg.condition != Condition::c2_diagnose) {
    sc.count = cfg.subset > 0 ? cfg.subset : 50000;
    d.train = synth_dataset(sc, Split::train);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Evaluation

struct SigmaEvaluation {
  double sigma = 0.0;
  std::vector<ProbeRecord> records;
  NoopReport noop;
  std::vector<DecompositionRecord> decomposition;
};

struct Evaluation {
  int epoch = 0;
  std::vector<ProbeRecord> softmax;
  std::vector<SigmaEvaluation> structural;  // one per eval sigma
};

inline SettleConfig eval_settle_config(const ExperimentConfig& cfg, double sigma) {
  SettleConfig s;
  s.steps = cfg.steps;
  s.learning_rate = cfg.latent_lr;
  s.momentum = cfg.latent_momentum;
  s.sigma = sigma;
  s.telemetry = true;
  return s;
}

/// Evaluation noise depends on (seed, sigma) only, not on the sigma's position
/// in the list.
inline RngStream eval_noise_root(std::uint64_t seed, double sigma) {
  return RngStream(seed).derive(0xE7A1, std::bit_cast<std::uint64_t>(sigma));
}

inline Evaluation evaluate(const PcnModel<float>& model, const Dataset& eval, const ExperimentConfig& cfg, int epoch) {
  Evaluation ev;
  ev.epoch = epoch;
  const bool structural = cfg.has_structural_probe();
  if (structural) {
    for (const double s : cfg.eval_sigmas) ev.structural.push_back({s, {}, {}, {}});
  }
  std::vector<std::vector<SettleTelemetry>> telemetry(ev.structural.size());
  for (const auto& idx : sequential_batches(eval.size(), cfg.batch_size)) {
    const Dataset batch = eval.select(idx);
    const auto ff = encoder_forward(model.encoder, batch.images);
    auto soft = softmax_probe(ff[3], batch.labels, idx);
    ev.softmax.insert(ev.softmax.end(), soft.begin(), soft.end());
    for (std::size_t j = 0; j < ev.structural.size(); ++j) {
      auto& se = ev.structural[j];
      const auto kway = kway_settle_energies(model.generative, ff, eval_settle_config(cfg, se.sigma),
                                             eval_noise_root(cfg.seed, se.sigma), idx);
      auto recs = structural_probe(kway, batch.labels, idx);
      se.records.insert(se.records.end(), recs.begin(), recs.end());
      auto dec = decompose_batch(kway, ff[3], batch.labels, idx);
      se.decomposition.insert(se.decomposition.end(), dec.begin(), dec.end());
      telemetry[j].insert(telemetry[j].end(), kway.telemetry.begin(), kway.telemetry.end());
    }
  }
  for (std::size_t j = 0; j < ev.structural.size(); ++j) ev.structural[j].noop = noop_report(telemetry[j]);
  return ev;
}

inline std::vector<ResultRow> result_rows(const Evaluation& ev, const ExperimentConfig& cfg) {
  std::vector<ResultRow> rows;
  auto row = [&](ProbeKind k, double sigma, const std::vector<ProbeRecord>& recs) {
    const auto m = summarize_records(recs);
    rows.push_back({to_string(cfg.condition), ev.epoch, k, sigma, m.n, m.accuracy, m.auroc2, cfg.seed});
  };
  for (const auto& se : ev.structural) row(ProbeKind::structural, se.sigma, se.records);
  row(ProbeKind::softmax, 0.0, ev.softmax);
  return rows;
}

inline json noop_json(const NoopReport& r) {
  const auto [mv_lo, mv_hi] = NoopReport::range(r.movement);
  const auto [mse_lo, mse_hi] = NoopReport::range(r.mse);
  const auto [g_lo, g_hi] = NoopReport::range(r.gradient);
  return {{"settles", r.settles},
          {"mean_abs_movement", r.movement},
          {"mean_abs_movement_range", {mv_lo, mv_hi}},
          {"latent_gradient", r.gradient},
          {"latent_gradient_range", {g_lo, g_hi}},
          {"mse_to_feedforward", r.mse},
          {"mse_to_feedforward_range", {mse_lo, mse_hi}},
          {"energy_initial", r.energy_initial},
          {"energy_final", r.energy_final},
          {"relative_energy_decrease", r.relative_energy_decrease},
          {"fraction_energy_nonincreasing", r.fraction_nonincreasing}};
}

// ---------------------------------------------------------------------------
// Run

struct RunOutcome {
  bool ok = false;
  std::string error;
  std::vector<ResultRow> rows;
  std::vector<Evaluation> evaluations;
  std::vector<std::pair<std::string, std::string>> digests;  // relative path, sha256
};

namespace detail {

class PhaseClock {
 public:
  template <typename F>
  auto time(const std::string& name, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    struct Record {
      PhaseClock* self;
      std::string name;
      std::chrono::steady_clock::time_point t0;
      ~Record() {
        self->seconds_[name] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      }
    } rec{this, name, t0};
    return f();
  }
  const std::map<std::string, double>& seconds() const { return seconds_; }

 private:
  std::map<std::string, double> seconds_;
};

inline std::string epoch_tag(int epoch) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "epoch_%03d", epoch);
  return buf;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

}  // namespace detail

/// Executes the configured condition, writing every artefact into
/// cfg.out_dir. Never throws for run-time failures: the manifest records the
/// cause and the outcome carries it.
inline RunOutcome run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  validate(cfg);
  RunOutcome outcome;
  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir / "checkpoints");
  detail::PhaseClock clock;
  std::vector<std::string> files;
  auto say = [&](const std::string& m) {
    if (log) *log << m << std::endl;
  };

  try {
    detail::write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
    files.push_back("config.json");
    detail::write_text(dir / "config.ini", to_ini(cfg));
    files.push_back("config.ini");
    const RunData data = clock.time("load", [&] { return load_run_data(cfg); });
    say("data: " + std::to_string(data.train.size()) + " train, " + std::to_string(data.eval.size()) + " eval (" +
        to_string(cfg.dataset) + ")");

    PcnModel<float> model = PcnModel<float>::initialised(cfg.seed);
    if (!cfg.checkpoint_in.empty()) load_model(model, load_checkpoint(cfg.checkpoint_in));
    auto opt = make_adamw<float>(cfg.weight_lr, cfg.weight_decay);
    auto dec_opt = make_adamw<float>(cfg.decoder_lr, cfg.weight_decay);

    PcTrainConfig pc;
    pc.settle.steps = cfg.steps;
    pc.settle.learning_rate = cfg.latent_lr;
    pc.settle.momentum = cfg.latent_momentum;
    pc.settle.sigma = cfg.sigma_train;
    pc.mode = cfg.condition == Condition::c6_mcpc ? PcMode::mcpc : PcMode::final_state;
    pc.mcpc_samples = cfg.mcpc_samples;

    std::ostringstream results, records;
    results << kResultsHeader << "\n";
    records << "epoch,sigma,image_index,probe,predicted,margin,correct\n";
    json epoch_log = json::array();

    auto save = [&](int epoch) {
      auto entries = model_entries(model);
      append_optimizer(entries, "weights", opt);
      if (cfg.condition == Condition::c3_bp_decoder) append_optimizer(entries, "decoder", dec_opt);
      const std::string rel = "checkpoints/" + detail::epoch_tag(epoch) + ".pcnp";
      save_checkpoint((dir / rel).string(), entries);
      files.push_back(rel);
    };
    auto probe = [&](int epoch) {
      auto ev = clock.time("evaluate", [&] { return evaluate(model, data.eval, cfg, epoch); });
      for (const auto& r : result_rows(ev, cfg)) {
        results << csv_line(r) << "\n";
        outcome.rows.push_back(r);
        say("epoch " + std::to_string(r.epoch) + " " + to_string(r.probe) + " sigma=" + format_number(r.sigma) +
            " acc=" + format_number(r.accuracy) + " auroc2=" + (r.auroc2 ? format_number(*r.auroc2) : "NA"));
      }
      auto dump = [&](double sigma, const std::vector<ProbeRecord>& recs) {
        for (const auto& p : recs) {
          records << epoch << "," << format_number(sigma) << "," << p.image_index << "," << to_string(p.probe) << ","
                  << p.predicted << "," << format_number(p.margin) << "," << (p.correct ? 1 : 0) << "\n";
        }
      };
      for (const auto& se : ev.structural) dump(se.sigma, se.records);
      dump(0.0, ev.softmax);
      outcome.evaluations.push_back(std::move(ev));
    };

    const auto eval_epochs = cfg.evaluation_epochs();
    auto is_eval_epoch = [&](int e) { return std::find(eval_epochs.begin(), eval_epochs.end(), e) != eval_epochs.end(); };

    if (cfg.condition == Condition::c2_diagnose) {
      probe(0);
    }
    for (int e = 1; e <= cfg.epochs; ++e) {
      EpochStats st;
      clock.time("train", [&] {
        if (cfg.trains_pc()) {
          st = train_epoch_pc(model, opt, data.train, pc, cfg.batch_size, cfg.seed, static_cast<std::uint64_t>(e));
        } else {
          st = train_epoch_bp(model.encoder, opt, data.train, cfg.batch_size, cfg.seed, static_cast<std::uint64_t>(e));
        }
        return 0;
      });
      epoch_log.push_back({{"phase", cfg.trains_pc() ? "pc" : "bp"},
                           {"epoch", e},
                           {"readout_loss", st.readout_loss},
                           {"generative_loss", st.generative_loss},
                           {"alignment_loss", st.alignment_loss},
                           {"train_accuracy", st.accuracy}});
      say("train epoch " + std::to_string(e) + " readout=" + format_number(st.readout_loss) +
          " generative=" + format_number(st.generative_loss) + " acc=" + format_number(st.accuracy));
      if (cfg.condition == Condition::c3_bp_decoder && e == cfg.epochs) {
        for (int d = 1; d <= cfg.decoder_epochs; ++d) {
          const auto ds = clock.time("decoder", [&] {
            return train_epoch_decoder(model.encoder, model.generative, dec_opt, data.train, cfg.batch_size,
                                       cfg.seed, static_cast<std::uint64_t>(1000 + d));
          });
          epoch_log.push_back({{"phase", "decoder"}, {"epoch", d}, {"reconstruction_loss", ds.generative_loss}});
          say("decoder epoch " + std::to_string(d) + " reconstruction=" + format_number(ds.generative_loss));
        }
      }
      if (is_eval_epoch(e)) {
        save(e);
        probe(e);
      }
    }

    detail::write_text(dir / "results.csv", results.str());
    detail::write_text(dir / "probe_records.csv", records.str());
    files.insert(files.end(), {"results.csv", "probe_records.csv"});

    const Evaluation& last = outcome.evaluations.back();
    json noop = {{"epoch", last.epoch}, {"steps", cfg.steps}, {"latent_lr", cfg.latent_lr}, {"by_sigma", json::array()}};
    for (const auto& se : last.structural) {
      json entry = noop_json(se.noop);
      entry["sigma"] = se.sigma;
      entry["max_layer_movement"] = NoopReport::range(se.noop.movement).second;
      noop["by_sigma"].push_back(entry);
    }
    noop["training"] = epoch_log;
    if (!last.structural.empty()) {
      // decomposition at deterministic evaluation when available, else the first sigma
      const SigmaEvaluation* det = &last.structural.front();
      for (const auto& se : last.structural)
        if (se.sigma == 0.0) det = &se;
      std::ostringstream dec;
      dec << "image_index,first,second,energy_margin,logsoftmax_margin,residual,structural_correct,softmax_correct";
      if (cfg.verbose) {
        dec << ",softmax_first,softmax_second,energy_gap_softmax_ranked,logsoftmax_margin_softmax_ranked";
      }
      dec << "\n";
      for (const auto& r : det->decomposition) {
        dec << r.image_index << "," << r.first << "," << r.second << "," << format_number(r.energy_margin) << ","
            << format_number(r.logsoftmax_margin) << "," << format_number(r.residual) << ","
            << (r.structural_correct ? 1 : 0) << "," << (r.softmax_correct ? 1 : 0);
        if (cfg.verbose) {
          dec << "," << r.softmax_first << "," << r.softmax_second << "," << format_number(r.energy_gap_softmax_ranked)
              << "," << format_number(r.logsoftmax_margin_softmax_ranked);
        }
        dec << "\n";
      }
      detail::write_text(dir / "decomposition.csv", dec.str());
      files.push_back("decomposition.csv");
      const auto corr = residual_correlation(det->decomposition);
      auto opt_json = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
      noop["decomposition"] = {{"sigma", det->sigma},
                               {"corr_residual_correct", opt_json(corr.residual)},
                               {"corr_logsoftmax_correct", opt_json(corr.logsoftmax)}};
    }
    detail::write_text(dir / "noop.json", noop.dump(2) + "\n");
    files.push_back("noop.json");
    outcome.ok = true;
  } catch (const std::exception& e) {
    outcome.error = e.what();
    say(std::string("run failed: ") + e.what());
  }

  json manifest;
  manifest["code_version"] = kCodeVersion;
  manifest["config"] = to_json(cfg);
  manifest["status"] = outcome.ok ? "ok" : "failed";
  if (!outcome.ok) manifest["error"] = outcome.error;
  manifest["phase_seconds"] = clock.seconds();
  manifest["files"] = json::array();
  for (const auto& f : files) {
    if (!fs::exists(dir / f)) continue;
    const std::string digest = sha256_hex(dir / f);
    outcome.digests.emplace_back(f, digest);
    manifest["files"].push_back({{"path", f}, {"sha256", digest}, {"bytes", fs::file_size(dir / f)}});
  }
  detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  return outcome;
}

// ---------------------------------------------------------------------------
// Summary: structural minus softmax AUROC2 at each run's final epoch.

struct SummaryRow {
  std::string run;
  std::string condition;
  int epoch = 0;
  double sigma = 0.0;
  std::optional<double> probe_auroc2;
  std::optional<double> softmax_auroc2;
  std::optional<double> delta;
};

struct Summary {
  std::vector<SummaryRow> rows;
  std::vector<std::string> errors;  // one per run that could not be read
};

inline Summary summarize_runs(const std::vector<std::filesystem::path>& dirs) {
  Summary s;
  for (const auto& dir : dirs) {
    std::vector<ResultRow> rows;
    try {
      rows = read_results_csv(dir / "results.csv");
      if (rows.empty()) throw DataError((dir / "results.csv").string() + ": no rows");
    } catch (const std::exception& e) {
      s.errors.push_back(dir.string() + ": " + e.what());
      continue;
    }
    int last = 0;
    for (const auto& r : rows) last = std::max(last, r.epoch);
    std::optional<double> softmax;
    for (const auto& r : rows)
      if (r.epoch == last && r.probe == ProbeKind::softmax) softmax = r.auroc2;
    for (const auto& r : rows) {
      if (r.epoch != last || r.probe != ProbeKind::structural) continue;
      SummaryRow out{dir.string(), r.condition, r.epoch, r.sigma, r.auroc2, softmax, std::nullopt};
      if (r.auroc2 && softmax) out.delta = *r.auroc2 - *softmax;
      s.rows.push_back(out);
    }
  }
  return s;
}

inline std::string summary_csv(const Summary& s) {
  auto cell = [](const std::optional<double>& v) { return v ? format_number(*v) : std::string("NA"); };
  std::ostringstream out;
  out << "run,condition,epoch,sigma,probe_auroc2,softmax_auroc2,delta\n";
  for (const auto& r : s.rows) {
    out << r.run << "," << r.condition << "," << r.epoch << "," << format_number(r.sigma) << "," << cell(r.probe_auroc2)
        << "," << cell(r.softmax_auroc2) << "," << cell(r.delta) << "\n";
  }
  return out.str();
}

inline std::string summary_table(const Summary& s) {
  auto cell = [](const std::optional<double>& v, int prec) {
    if (!v) return std::string("NA");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%+.*f", prec, *v);
    return std::string(buf);
  };
  std::ostringstream out;
  out << std::left << std::setw(16) << "condition" << std::right << std::setw(7) << "epoch" << std::setw(8) << "sigma"
      << std::setw(10) << "probe" << std::setw(10) << "softmax" << std::setw(9) << "delta" << "\n";
  for (const auto& r : s.rows) {
    out << std::left << std::setw(16) << r.condition << std::right << std::setw(7) << r.epoch << std::setw(8)
        << format_number(r.sigma) << std::setw(10) << cell(r.probe_auroc2, 4).substr(1) << std::setw(10)
        << cell(r.softmax_auroc2, 4).substr(1) << std::setw(9) << cell(r.delta, 3) << "\n";
  }
  for (const auto& e : s.errors) out << "error: " << e << "\n";
  return out.str();
}

}  // namespace pcnprobe
