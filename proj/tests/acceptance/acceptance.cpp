// Acceptance criteria 1-10. Prints one line per criterion:
//
//   criterion N: PASS|FAIL|SKIP  <detail>
//
// Exit status: 1 if anything failed, 77 if something was skipped, else 0.
// Criteria 3-6 and the desk comparison of 7 need the CIFAR-10 binary batches
// (--data or PCNPROBE_DATA). Criterion 10 and the identity half of 8 fall back
// to the synthetic dataset when CIFAR-10 is absent.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "../support/gradient_suite.hpp"
#include "../support/oracles.hpp"
#include "CLI11.hpp"
#include "pcnprobe/cli/runner.hpp"

using namespace pcnprobe;
using namespace pcnprobe::testing;
namespace fs = std::filesystem;

namespace {

enum class Status { pass, fail, skip };

struct Verdict {
  Status status = Status::pass;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// The first failing check becomes the verdict detail.
class Checks {
 public:
  void require(bool ok, const std::string& what) {
    if (!ok && failed_.empty()) failed_ = what;
  }
  Verdict verdict(const std::string& summary) const {
    if (!failed_.empty()) return {Status::fail, failed_};
    return {Status::pass, summary};
  }

 private:
  std::string failed_;
};

// ---------------------------------------------------------------------------
// Run artefacts

struct RunView {
  fs::path dir;
  ExperimentConfig cfg;
  RunOutcome outcome;
  double seconds = 0.0;

  std::vector<ResultRow> rows() const { return read_results_csv(dir / "results.csv"); }
  int last_epoch() const {
    int e = 0;
    for (const auto& r : rows()) e = std::max(e, r.epoch);
    return e;
  }
  std::optional<ResultRow> row(int epoch, ProbeKind probe, double sigma) const {
    for (const auto& r : rows())
      if (r.epoch == epoch && r.probe == probe && r.sigma == sigma) return r;
    return std::nullopt;
  }
  nlohmann::json noop() const {
    std::ifstream in(dir / "noop.json");
    return nlohmann::json::parse(in);
  }
};

struct DecompRow {
  double energy_margin, logsoftmax_margin, residual;
};

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("missing " + p.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<std::string>> out;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<DecompRow> read_decomposition(const fs::path& dir) {
  std::vector<DecompRow> out;
  for (const auto& f : read_csv(dir / "decomposition.csv")) out.push_back({std::stod(f[3]), std::stod(f[4]), std::stod(f[5])});
  return out;
}

/// image_index -> predicted class for one (epoch, sigma, probe) cell.
std::map<std::size_t, int> predictions(const fs::path& dir, int epoch, double sigma, const std::string& probe) {
  std::map<std::size_t, int> out;
  for (const auto& f : read_csv(dir / "probe_records.csv"))
    if (std::stoi(f[0]) == epoch && std::stod(f[1]) == sigma && f[3] == probe) out[std::stoul(f[2])] = std::stoi(f[4]);
  return out;
}

class Lab {
 public:
  Lab(fs::path work, std::optional<fs::path> cifar, Scale scale) : work_(std::move(work)), cifar_(std::move(cifar)), scale_(scale) {}

  bool has_cifar() const { return cifar_.has_value(); }
  std::string dataset_name() const { return has_cifar() ? "cifar10" : "synthetic"; }

  /// Runs (once per tag) the condition at the configured scale.
  const RunView& run(Condition c, const std::string& tag) {
    if (auto it = runs_.find(tag); it != runs_.end()) return it->second;
    ExperimentConfig cfg = preset(c);
    apply_scale(cfg, scale_);
    if (has_cifar()) {
      cfg.dataset = DatasetSource::cifar10;
      cfg.dataset_path = cifar_->string();
    } else {
      cfg.dataset = DatasetSource::synthetic;
      if (cfg.subset == 0) cfg.subset = 10000;
    }
    cfg.out_dir = (work_ / tag).string();
    fs::remove_all(cfg.out_dir);
    std::cerr << "[acceptance] running " << tag << " (" << to_string(c) << ", " << to_string(scale_) << ", "
              << dataset_name() << ")" << std::endl;
    RunView v{cfg.out_dir, cfg, {}, 0.0};
    const auto t0 = std::chrono::steady_clock::now();
    v.outcome = run_experiment(cfg, &std::cerr);
    v.seconds = seconds_since(t0);
    if (!v.outcome.ok) throw std::runtime_error(tag + " failed: " + v.outcome.error);
    return runs_.emplace(tag, std::move(v)).first->second;
  }

  std::vector<const RunView*> finished() const {
    std::vector<const RunView*> out;
    for (const auto& [tag, v] : runs_) out.push_back(&v);
    return out;
  }

 private:
  fs::path work_;
  std::optional<fs::path> cifar_;
  Scale scale_;
  std::map<std::string, RunView> runs_;
};

const char* kNeedsCifar = "needs CIFAR-10 binary batches (--data or PCNPROBE_DATA)";

// ---------------------------------------------------------------------------
// Criteria

Verdict criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t checked = 0;
  double worst32 = 0.0, worst64 = 0.0;
  std::string failed;
  auto absorb = [&](const std::vector<GradSuiteResult>& rs, double& worst, const char* mode) {
    for (const auto& r : rs) {
      ++checked;
      worst = std::max(worst, r.worst);
      if (!r.passed && failed.empty()) failed = r.name + " (" + mode + ") worst error " + fmt(r.worst);
    }
  };
  absorb(run_grad_suite(primitive_cases<float>(), 1e-2, 101), worst32, "32-bit");
  absorb(run_grad_suite(primitive_cases<double>(), 1e-4, 102), worst64, "64-bit");
  const auto [p32, p64] = run_param_suite(parameter_cases(), 1e-2, 1e-4, 103);
  absorb(p32, worst32, "32-bit");
  absorb(p64, worst64, "64-bit");
  const double secs = seconds_since(t0);
  Checks c;
  c.require(failed.empty(), failed);
  c.require(secs < 60.0, "runtime " + fmt(secs, 3) + " s exceeds 60 s");
  return c.verdict(std::to_string(checked) + " gradient checks at 5 points; worst 32-bit " + fmt(worst32, 2) +
                   ", 64-bit " + fmt(worst64, 2) + "; " + fmt(secs, 3) + " s");
}

Verdict criterion2() {
  const auto t0 = std::chrono::steady_clock::now();
  RngStream rng(201);
  std::size_t auroc_mismatch = 0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.below(50);
    std::vector<double> m(n);
    std::vector<bool> correct(n);
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = t % 2 ? std::round(rng.uniform(0.0, 4.0)) : rng.normal();
      correct[i] = rng.uniform() < 0.6;
    }
    const auto got = auroc2(m, correct);
    const double want = oracle::pair_auroc(m, correct);
    if (want < 0 ? got.has_value() : (!got || *got != want)) ++auroc_mismatch;
  }

  auto model = PcnModel<float>::initialised(202);
  double worst = 0.0;
  for (int cfg = 0; cfg < 100; ++cfg) {
    RngStream sub = rng.derive(static_cast<std::uint64_t>(cfg));
    model.generative.g3_bias = normal_tensor<float>(Shape{256}, sub, 0.1);
    const double scale = sub.uniform(0.1, 1.5);
    std::array<Tensor, kLatentLayers> z;
    for (std::size_t l = 0; l < kLatentLayers; ++l) z[l] = normal_tensor<float>(batched(1, latent_shape(l)), sub, scale);
    const std::size_t k = sub.below(kClasses);
    const Tensor y = one_hot_rows<float>(1, k);
    std::vector<double> target(kClasses, 0.0);
    target[k] = 1.0;
    const double got = energy(model, LatentState<float>(z), &y)[0].total;
    const double want = oracle::energy(model.generative, oracle::image_latents(z, 0), target);
    worst = std::max(worst, std::abs(got - want) / std::max(1.0, std::abs(want)));
  }
  const double secs = seconds_since(t0);
  Checks c;
  c.require(auroc_mismatch == 0, std::to_string(auroc_mismatch) + " of 200 AUROC2 sets differ from pair enumeration");
  c.require(worst <= 1e-5, "energy differs from the direct formula by " + fmt(worst, 3));
  c.require(secs < 60.0, "runtime " + fmt(secs, 3) + " s exceeds 60 s");
  return c.verdict("200/200 AUROC2 sets exact; energy worst relative error " + fmt(worst, 2) + " over 100 configs; " +
                   fmt(secs, 3) + " s");
}

Verdict criterion3(Lab& lab) {
  if (!lab.has_cifar()) return {Status::skip, kNeedsCifar};
  const auto& run = lab.run(Condition::c1_det_pc, "c1_a");
  const auto entry = run.noop()["by_sigma"][0];
  Checks c;
  c.require(run.cfg.epochs >= 3, "fewer than 3 training epochs");
  c.require(run.cfg.steps == 13, "settle is not T = 13");
  double mv = 0.0, mse = 0.0;
  for (int l = 0; l < 3; ++l) {
    mv = std::max(mv, entry["mean_abs_movement"][l].get<double>());
    mse = std::max(mse, entry["mse_to_feedforward"][l].get<double>());
  }
  const double dec = entry["relative_energy_decrease"];
  c.require(mv < 1e-2, "mean |dh| " + fmt(mv, 3) + " >= 1e-2");
  c.require(mse < 1e-4, "settled-vs-ff MSE " + fmt(mse, 3) + " >= 1e-4");
  c.require(dec < 1e-2, "relative energy decrease " + fmt(dec, 3) + " >= 1%");
  c.require(run.seconds < 1800.0, "runtime " + fmt(run.seconds, 4) + " s exceeds 30 min");
  return c.verdict("max mean |dh| " + fmt(mv, 3) + ", max MSE " + fmt(mse, 3) + ", energy decrease " +
                   fmt(100 * dec, 3) + "%; " + fmt(run.seconds, 4) + " s");
}

Verdict criterion4(Lab& lab) {
  if (!lab.has_cifar()) return {Status::skip, kNeedsCifar};
  const auto& run = lab.run(Condition::c1_det_pc, "c1_a");
  Checks c;
  std::string gaps;
  for (const int e : run.cfg.evaluation_epochs()) {
    const auto s = run.row(e, ProbeKind::structural, 0.0), m = run.row(e, ProbeKind::softmax, 0.0);
    if (!s || !m || !s->auroc2 || !m->auroc2) {
      c.require(false, "missing AUROC2 at epoch " + std::to_string(e));
      continue;
    }
    const double gap = *m->auroc2 - *s->auroc2;
    gaps += (gaps.empty() ? "" : ", ") + fmt(gap, 3);
    c.require(gap > 0.02, "epoch " + std::to_string(e) + ": softmax - structural = " + fmt(gap, 3) + " <= 0.02");
  }
  return c.verdict("softmax - structural AUROC2 per checkpoint: " + gaps);
}

Verdict criterion5(Lab& lab) {
  if (!lab.has_cifar()) return {Status::skip, kNeedsCifar};
  const auto& run = lab.run(Condition::c3_bp_decoder, "c3");
  const int e = run.last_epoch();
  const auto s = run.row(e, ProbeKind::structural, 0.0), m = run.row(e, ProbeKind::softmax, 0.0);
  Checks c;
  if (!s || !m || !s->auroc2 || !m->auroc2) return {Status::fail, "missing AUROC2 rows"};
  const double gap = std::abs(*s->auroc2 - *m->auroc2);
  const auto ps = predictions(run.dir, e, 0.0, "structural"), pm = predictions(run.dir, e, 0.0, "softmax");
  std::size_t agree = 0;
  for (const auto& [i, k] : ps) agree += pm.count(i) && pm.at(i) == k;
  const double frac = ps.empty() ? 0.0 : static_cast<double>(agree) / static_cast<double>(ps.size());
  c.require(gap < 0.05, "|structural - softmax| = " + fmt(gap, 3) + " >= 0.05");
  c.require(frac >= 0.95, "argmin/argmax agreement " + fmt(100 * frac, 3) + "% < 95%");
  c.require(run.seconds < 1800.0, "runtime " + fmt(run.seconds, 4) + " s exceeds 30 min");
  return c.verdict("|gap| " + fmt(gap, 3) + ", agreement " + fmt(100 * frac, 3) + "%; " + fmt(run.seconds, 4) + " s");
}

Verdict criterion6(Lab& lab) {
  if (!lab.has_cifar()) return {Status::skip, kNeedsCifar};
  const auto& run = lab.run(Condition::c5_langevin, "c5");
  const int e = run.last_epoch();
  Checks c;
  std::vector<double> au;
  std::string trail;
  for (const double sigma : run.cfg.eval_sigmas) {
    const auto r = run.row(e, ProbeKind::structural, sigma);
    if (!r || !r->auroc2) return {Status::fail, "missing structural AUROC2 at sigma " + fmt(sigma)};
    au.push_back(*r->auroc2);
    trail += (trail.empty() ? "" : " ") + fmt(*r->auroc2, 4);
  }
  for (std::size_t i = 1; i < au.size(); ++i)
    c.require(au[i] <= au[i - 1] + 0.01, "AUROC2 rises by " + fmt(au[i] - au[i - 1], 3) + " at sigma " +
                                             fmt(run.cfg.eval_sigmas[i]));
  const auto noisy = run.row(e, ProbeKind::structural, 1.0);
  const double acc = noisy ? noisy->accuracy : -1.0;
  c.require(std::abs(acc - 0.1) <= 0.03, "accuracy at sigma 1 is " + fmt(100 * acc, 3) + "%, not within 3 points of chance");
  return c.verdict("AUROC2 over sigma: " + trail + "; accuracy at sigma 1: " + fmt(100 * acc, 3) + "%");
}

double mcpc_degenerate_difference() {
  const auto m = PcnModel<float>::initialised(701);
  SynthConfig sc;
  sc.count = 8;
  const auto data = synth_dataset(sc, Split::train);
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto trace = encoder_forward_trace(m.encoder, data.images, Mode::train);
  PcTrainConfig fs;
  fs.settle.steps = 13;
  PcTrainConfig mc = fs;
  mc.mode = PcMode::mcpc;
  mc.mcpc_samples = 1;
  auto grads = [&](const PcTrainConfig& cfg) {
    const auto s = pc_settle_samples(m.generative, trace.z, data.labels, idx, cfg, RngStream(702));
    return pc_weight_gradients<float>(m, trace, data.labels, s, cfg);
  };
  const auto a = grads(fs), b = grads(mc);
  double worst = 0.0;
  auto diff = [&](const auto& x, const auto& y) {
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t j = 0; j < x[i].size(); ++j) worst = std::max(worst, std::abs(double(x[i][j]) - double(y[i][j])));
  };
  diff(a.encoder, b.encoder);
  diff(a.generative, b.generative);
  return worst;
}

Verdict criterion7(Lab& lab) {
  const double worst = mcpc_degenerate_difference();
  if (worst > 1e-6) return {Status::fail, "MCPC M=1 differs from final-state gradients by " + fmt(worst, 3)};
  const std::string degenerate = "M=1 gradients match final state (max diff " + fmt(worst, 2) + ")";
  if (!lab.has_cifar()) return {Status::skip, degenerate + "; desk c5 vs c6 comparison " + kNeedsCifar};
  const auto& c5 = lab.run(Condition::c5_langevin, "c5");
  const auto& c6 = lab.run(Condition::c6_mcpc, "c6");
  const auto a = c5.row(c5.last_epoch(), ProbeKind::structural, 0.0), b = c6.row(c6.last_epoch(), ProbeKind::structural, 0.0);
  if (!a || !b || !a->auroc2 || !b->auroc2) return {Status::fail, "missing deterministic-eval AUROC2"};
  const double d = std::abs(*a->auroc2 - *b->auroc2);
  Checks c;
  c.require(d < 0.02, "|c6 - c5| structural AUROC2 = " + fmt(d, 3) + " >= 0.02");
  return c.verdict(degenerate + "; |c6 - c5| AUROC2 " + fmt(d, 3));
}

Verdict criterion8(Lab& lab) {
  // Trained runs that carry a structural probe.
  lab.run(Condition::c1_det_pc, "c1_a");
  if (lab.has_cifar()) {
    lab.run(Condition::c3_bp_decoder, "c3");
    lab.run(Condition::c5_langevin, "c5");
    lab.run(Condition::c6_mcpc, "c6");
  }
  Checks c;
  double worst = 0.0;
  std::size_t images = 0;
  std::string corr;
  for (const RunView* run : lab.finished()) {
    if (!fs::exists(run->dir / "decomposition.csv")) continue;
    for (const auto& r : read_decomposition(run->dir)) {
      worst = std::max(worst, std::abs(r.energy_margin - r.logsoftmax_margin - r.residual));
      ++images;
    }
    const auto dec = run->noop()["decomposition"];
    const std::string name = to_string(run->cfg.condition);
    if (dec["corr_residual_correct"].is_null() || dec["corr_logsoftmax_correct"].is_null()) {
      c.require(false, name + ": correlation undefined");
      continue;
    }
    const double rd = dec["corr_residual_correct"], rl = dec["corr_logsoftmax_correct"];
    corr += (corr.empty() ? "" : "; ") + name + " corr(D) " + fmt(rd, 3) + " corr(L) " + fmt(rl, 3);
    if (lab.has_cifar() && run->cfg.eval_count == 1280) {
      c.require(std::abs(rd) < 0.15, name + ": |corr(D, correct)| = " + fmt(std::abs(rd), 3) + " >= 0.15");
      c.require(rl > 0.0, name + ": corr(L, correct) = " + fmt(rl, 3) + " <= 0");
    }
  }
  c.require(images > 0, "no decomposition records");
  c.require(worst <= 1e-6, "M - L - D reaches " + fmt(worst, 3));
  const std::string summary = "identity max " + fmt(worst, 2) + " over " + std::to_string(images) + " images (" +
                              lab.dataset_name() + "); " + corr;
  const Verdict v = c.verdict(summary);
  // The correlation bound describes trained CIFAR-10 models; on the synthetic
  // fallback it is reported but not enforced.
  if (v.status == Status::pass && !lab.has_cifar()) return {Status::skip, summary + "; correlation bound " + kNeedsCifar};
  return v;
}

Verdict criterion9() {
  const auto m = PcnModel<float>::initialised(901);
  const std::size_t n = param_count(m);
  if (n != 2144938) return {Status::fail, "param_count = " + std::to_string(n)};
  return {Status::pass, "param_count = 2144938"};
}

Verdict criterion10(Lab& lab) {
  const auto& a = lab.run(Condition::c1_det_pc, "c1_a");
  const auto& b = lab.run(Condition::c1_det_pc, "c1_b");
  Checks c;
  c.require(read_file_bytes(a.dir / "results.csv") == read_file_bytes(b.dir / "results.csv"),
            "results.csv differs between identical runs");
  std::map<std::string, std::string> da, db;
  for (const auto& [path, digest] : a.outcome.digests)
    if (path.rfind("checkpoints/", 0) == 0) da[path] = digest;
  for (const auto& [path, digest] : b.outcome.digests)
    if (path.rfind("checkpoints/", 0) == 0) db[path] = digest;
  c.require(!da.empty(), "no checkpoints written");
  c.require(da == db, "checkpoint digests differ");
  return c.verdict("results.csv and " + std::to_string(da.size()) + " checkpoint digests identical (" +
                   lab.dataset_name() + ", " + to_string(a.cfg.scale) + ")");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string work = "acceptance_runs", data, scale = "desk";
  std::vector<int> only;
  app.add_option("--work", work, "Directory for run artefacts")->capture_default_str();
  app.add_option("--data", data, std::string("CIFAR-10 directory (default $") + kDataEnv + ")");
  app.add_option("--scale", scale, "Run scale for criteria 3-8 and 10 (desk per the criteria; ci for smoke tests)")
      ->capture_default_str();
  app.add_option("--only", only, "Criteria to evaluate")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  if (data.empty())
    if (const char* env = std::getenv(kDataEnv)) data = env;
  std::optional<fs::path> cifar;
  if (!data.empty() && cifar10_available(data)) cifar = resolve_cifar10_dir(data);
  Lab lab(work, cifar, parse_scale(scale));

  const std::vector<std::function<Verdict()>> criteria{
      criterion1,
      criterion2,
      [&] { return criterion3(lab); },
      [&] { return criterion4(lab); },
      [&] { return criterion5(lab); },
      [&] { return criterion6(lab); },
      [&] { return criterion7(lab); },
      [&] { return criterion8(lab); },
      criterion9,
      [&] { return criterion10(lab); },
  };
  const std::set<int> selected(only.begin(), only.end());
  bool any_fail = false, any_skip = false;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(n)) continue;
    Verdict v;
    try {
      v = criteria[i]();
    } catch (const std::exception& e) {
      v = {Status::fail, std::string("error: ") + e.what()};
    }
    const char* word = v.status == Status::pass ? "PASS" : v.status == Status::fail ? "FAIL" : "SKIP";
    std::cout << "criterion " << n << ": " << word << "  " << v.detail << std::endl;
    any_fail |= v.status == Status::fail;
    any_skip |= v.status == Status::skip;
  }
  return any_fail ? 1 : any_skip ? 77 : 0;
}
