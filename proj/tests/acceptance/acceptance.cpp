// Acceptance suite: runs every criterion and prints one PASS/FAIL line each.
//
// Trained runs are looked up in the work directory using the layout of
// scripts/desk_experiment.sh (data/, runs/<name>/). Missing runs are trained
// in-process first unless PROMPTCT_ACCEPTANCE_NO_TRAIN is set. The work
// directory is PROMPTCT_ACCEPTANCE_DIR or the build-tree default.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "promptct/errors.hpp"
#include "promptct/kernels.hpp"
#include "promptct/metrics.hpp"
#include "promptct/trainer.hpp"
#include "promptct/verify.hpp"

namespace fs = std::filesystem;
using namespace promptct;

namespace {

// Tolerances and targets, pinned.
constexpr double kAdjointTol = 1e-10;
constexpr double kAdjointSeconds = 10.0;
constexpr double kGateSeconds = 300.0;
constexpr double kLemmaSeconds = 60.0;
constexpr double kWitnessMin = 0.99;
constexpr double kContractionFraction = 0.95;
constexpr double kLinearTol = 1e-8;
constexpr double kMonotoneSlackDb = 0.2;
constexpr double kFbpGainDb = 6.0;
constexpr double kPromptMarginDb = 0.2;
constexpr double kDepthPlateauDb = 0.2;
constexpr double kDepthGainDb = 0.5;
constexpr double kMetricTol = 1e-10;

const std::vector<std::size_t> kViews{60, 90, 120, 180};
const std::vector<double> kSigmaGrid{0.02, 0.03, 0.05, 0.075, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5};

struct Result {
  bool pass = false;
  std::string detail;
};

std::string fixed(double v, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string without_line(const std::string& text, const std::string& prefix) {
  std::istringstream in(text);
  std::string line, out;
  while (std::getline(in, line))
    if (line.rfind(prefix, 0) != 0) out += line + "\n";
  return out;
}

Tensor uniform(Dims dims, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t(std::move(dims));
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "promptct");
  std::cerr << "  $";
  for (std::size_t i = 1; i < args.size(); ++i) std::cerr << " " << args[i];
  std::cerr << std::endl;
  return cli::run(args);
}

// --- experiment state ------------------------------------------------------------

struct Experiment {
  fs::path work;
  fs::path config;
  std::optional<Dataset> data;
  std::map<std::string, std::unique_ptr<Model>> models;  // by run name
  std::map<std::string, std::string> problems;           // by run name
  std::unique_ptr<OperatorBank> bank;

  Model* model(const std::string& name) {
    const auto it = models.find(name);
    return it == models.end() ? nullptr : it->second.get();
  }
  std::string why(const std::string& name) const {
    const auto it = problems.find(name);
    return it == problems.end() ? "run '" + name + "' unavailable" : it->second;
  }
};

struct RunSpec {
  std::string name;
  std::vector<std::string> args;
};

std::vector<RunSpec> run_specs() {
  std::vector<RunSpec> runs{{"promptct", {"--regime", "multi_view_prompt"}},
                            {"mlipct", {"--regime", "multi_view_noprompt"}}};
  for (std::size_t v : kViews) {
    runs.push_back({"lipct" + std::to_string(v), {"--regime", "single_view", "--views", std::to_string(v)}});
  }
  return runs;
}

void prepare(Experiment& ex, bool allow_training) {
  const fs::path data_dir = ex.work / "data";
  if (!fs::exists(data_dir / "manifest.txt")) {
    if (!allow_training) {
      for (const auto& r : run_specs()) ex.problems[r.name] = "no dataset at " + data_dir.string();
      return;
    }
    std::cerr << "acceptance: generating the desk dataset" << std::endl;
    if (run_cli({"simulate", "--config", ex.config.string(), "--out", data_dir.string()}) != 0) {
      for (const auto& r : run_specs()) ex.problems[r.name] = "dataset generation failed";
      return;
    }
  }
  ex.data = Dataset::open(data_dir);
  ex.bank = std::make_unique<OperatorBank>(ex.data->config().geometry, data_dir / "operators");

  for (const auto& r : run_specs()) {
    const fs::path dir = ex.work / "runs" / r.name;
    if (!fs::exists(dir / "metrics.csv")) {
      if (!allow_training) {
        ex.problems[r.name] = "run '" + r.name + "' not trained (" + dir.string() + ")";
        continue;
      }
      std::cerr << "acceptance: training " << r.name << std::endl;
      std::vector<std::string> args{"train", "--config", ex.config.string(), "--data", data_dir.string(), "--out",
                                    dir.string(), "--set", "train.resume=true"};
      args.insert(args.end(), r.args.begin(), r.args.end());
      const int code = run_cli(args);
      if (code != 0) {
        ex.problems[r.name] = "training '" + r.name + "' exited with " + std::to_string(code);
        continue;
      }
    }
    try {
      ex.models[r.name] = std::make_unique<Model>(load_model(dir / "model.lipc"));
    } catch (const std::exception& e) {
      ex.problems[r.name] = e.what();
    }
  }
}

// Mean test-split metrics, cached per (run, views, stages).
struct Evaluator {
  Experiment& ex;
  std::map<std::string, ImageMetrics> cache;

  ImageMetrics get(const std::string& name, std::size_t views, std::optional<std::size_t> stages = std::nullopt) {
    const std::string key = name + "/" + std::to_string(views) + "/" + (stages ? std::to_string(*stages) : "-");
    const auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    ImageMetrics m;
    if (name == "fbp") {
      m = mean_metrics(evaluate_split(nullptr, *ex.data, Split::Test, views, *ex.bank, 1, std::nullopt, true));
    } else {
      Model* model = ex.model(name);
      if (!model) throw std::runtime_error(ex.why(name));
      m = mean_metrics(evaluate_split(model, *ex.data, Split::Test, views, *ex.bank, 1, stages));
    }
    cache[key] = m;
    return m;
  }
};

// --- criteria --------------------------------------------------------------------

Result adjointness() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(0xad701);
  const GeometrySpec g;  // desk geometry
  double worst_p = 0.0, worst_c = 0.0;
  std::map<std::size_t, SparseOperator> ops;
  for (std::size_t v : kViews) ops.emplace(v, build_operator(g, subsample_views(g.n_views_full, v)));
  for (int t = 0; t < 100; ++t) {
    const auto& op = ops.at(kViews[static_cast<std::size_t>(t) % kViews.size()]);
    const Tensor x = uniform({g.image_size, g.image_size}, rng);
    const Tensor y = uniform({op.views().size(), g.n_bins}, rng);
    const double a = dot(project(op, x), y), b = dot(x, backproject(op, y));
    worst_p = std::max(worst_p, std::abs(a - b) / std::max(std::abs(a), std::abs(b)));

    const std::size_t stride = 1 + static_cast<std::size_t>(t % 2);
    const Tensor in = uniform({3, 12, 12}, rng);
    const Tensor k = uniform({4, 3, 3, 3}, rng);
    const Tensor out = kernels::conv2d(in, k, stride);
    const Tensor w = uniform(out.dims(), rng);
    const double c = dot(out, w), d = dot(in, kernels::conv2d_adjoint(w, k, 12, 12, stride));
    worst_c = std::max(worst_c, std::abs(c - d) / std::max(std::abs(c), std::abs(d)));
  }
  const double secs = seconds_since(t0);
  Result r;
  r.pass = worst_p < kAdjointTol && worst_c < kAdjointTol && secs < kAdjointSeconds;
  r.detail = "projector max rel " + sci(worst_p) + ", conv max rel " + sci(worst_c) + " over 100 trials, " +
             fixed(secs, 1) + " s";
  return r;
}

Result gradient() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = gradient_gate();
  const double secs = seconds_since(t0);
  Result r;
  r.pass = rep.pass && rep.max_rel_err < 1e-4 && secs < kGateSeconds;
  r.detail = "max rel err " + sci(rep.max_rel_err) + " (tol 1e-4), " + fixed(secs, 1) + " s";
  return r;
}

Result lemma1(Experiment& ex) {
  Model* m = ex.model("promptct");
  if (!m) return {false, ex.why("promptct")};
  const auto t0 = std::chrono::steady_clock::now();
  const auto& g = m->config.geometry;
  const Tensor mask = make_mask(g.n_views_full, g.n_bins, subsample_views(g.n_views_full, 60));
  const auto rep = check_lemma1(m->params, m->config.lipnet, 100, kSigmaGrid, 0x1e111a, &mask);
  // Witness: identity frame, every coefficient above c_max sigma.
  Tensor delta({1, 1, 3, 3});
  delta[4] = 1.0;
  const double c_max = m->config.lipnet.c_max;
  const Tensor x({16, 16}, 1.0 + c_max * 0.5);
  const double witness = lemma1_ratio(delta, x, Tensor({1, 16, 16}, c_max), 0.5, c_max, 1.0);
  const double secs = seconds_since(t0);
  Result r;
  r.pass = rep.max_ratio <= 1.0 && witness >= kWitnessMin && secs < kLemmaSeconds;
  r.detail = "max ratio " + fixed(rep.max_ratio, 6) + " over 100 (x, sigma), ||W||_2 = " + fixed(rep.frame_norm, 4) +
             ", witness " + fixed(witness, 6) + ", " + fixed(secs, 1) + " s";
  return r;
}

Result bounded(Experiment& ex) {
  Model* m = ex.model("promptct");
  if (!m) return {false, ex.why("promptct")};
  const auto& g = m->config.geometry;
  const Tensor mask = make_mask(g.n_views_full, g.n_bins, subsample_views(g.n_views_full, 60));
  const auto rep = check_bounded(m->params, m->config.lipnet, 100, kSigmaGrid, 0xb0d, &mask);
  Result r;
  r.pass = std::isfinite(rep.n_hat);
  r.detail = "N_hat = " + sci(rep.n_hat) + "; profile";
  for (const auto& [s, v] : rep.profile) r.detail += " " + fixed(s, 3) + ":" + sci(v);
  return r;
}

struct TheoryResults {
  Result contraction;
  Result fixed_point;
};

TheoryResults theory(Experiment& ex) {
  TheoryResults out;
  const auto lin = linear_case_check({0.25, 0.5, 1.0, 2.0, 4.0}, 1.0 / 4.0, 40);
  const bool lin_ok = lin.max_rel_error < kLinearTol && non_increasing(lin.residuals);
  const std::string lin_text = "linear case max rel " + sci(lin.max_rel_error);

  Model* m = ex.model("promptct");
  if (!m) {
    out.contraction = {false, ex.why("promptct")};
    out.fixed_point = {false, lin_text + "; " + ex.why("promptct")};
    return out;
  }
  ContractionOptions o;
  o.views = 60;
  o.images = 20;
  o.pairs = 200;
  o.extra_stages = 20;
  const auto rep = check_contraction(*m, *ex.data, *ex.bank, o);
  std::ofstream(ex.work / "acceptance" / "theory_report.txt") << rep.to_text();

  const auto& st = rep.stage_lipschitz.stats;
  const double below = st.fraction_below(1.0);
  // Context only: the verdict counts every pair, power-refined ones included.
  std::size_t random = 0, random_below = 0;
  for (std::size_t i = 0; i < st.ratios.size(); ++i) {
    if (st.refined[i]) continue;
    ++random;
    random_below += st.ratios[i] < 1.0 ? 1 : 0;
  }
  out.contraction.pass = st.ratios.size() >= 200 && below >= kContractionFraction;
  out.contraction.detail = std::to_string(st.ratios.size()) + " pairs, stage ratio < 1 for " + fixed(100 * below, 1) +
                           "% (non-refined " + std::to_string(random_below) + "/" + std::to_string(random) + ", p95 " +
                           fixed(st.percentile(95), 4) + ", max " + fixed(st.max(), 4) +
                           "); denoiser upsilon sq " + fixed(rep.denoiser_lipschitz.squared, 4) + " / unsq " +
                           fixed(rep.denoiser_lipschitz.unsquared, 4) + "; stage upsilon sq " +
                           fixed(rep.stage_lipschitz.squared, 4) + " / unsq " +
                           fixed(rep.stage_lipschitz.unsquared, 4) + "; eta " + sci(rep.eta) + " in window (sq " +
                           (rep.window_squared.contains(rep.eta) ? "yes" : "no") + ", unsq " +
                           (rep.window_unsquared.contains(rep.eta) ? "yes" : "no") + ")";
  out.fixed_point.pass = lin_ok && rep.monotone_images == rep.residuals.size() && !rep.residuals.empty();
  out.fixed_point.detail = lin_text + "; non-increasing residuals on " + std::to_string(rep.monotone_images) + "/" +
                           std::to_string(rep.residuals.size()) + " noiseless images over 20 extra stages";
  return out;
}

Result view_monotonicity(Evaluator& ev) {
  Result r;
  r.pass = true;
  auto check_row = [&](const std::string& label, const std::function<std::string(std::size_t)>& run_for) {
    std::vector<double> p;
    for (std::size_t v : kViews) p.push_back(ev.get(run_for(v), v).psnr);
    bool ok = true;
    for (std::size_t i = 1; i < p.size(); ++i) ok = ok && p[i] >= p[i - 1] - kMonotoneSlackDb;
    r.pass = r.pass && ok;
    r.detail += (r.detail.empty() ? "" : "; ") + label + " ";
    for (std::size_t i = 0; i < p.size(); ++i) r.detail += (i ? "/" : "") + fixed(p[i], 2);
    if (!ok) r.detail += " (violated)";
  };
  try {
    check_row("PromptCT", [](std::size_t) { return std::string("promptct"); });
    check_row("MLipCT", [](std::size_t) { return std::string("mlipct"); });
    check_row("LipCT", [](std::size_t v) { return "lipct" + std::to_string(v); });
  } catch (const std::exception& e) {
    return {false, e.what()};
  }
  return r;
}

Result fbp_gain(Evaluator& ev) {
  try {
    const double model = ev.get("promptct", 60).psnr, base = ev.get("fbp", 60).psnr;
    return {model - base >= kFbpGainDb,
            "PromptCT " + fixed(model, 2) + " dB vs FBP " + fixed(base, 2) + " dB at 60 views (gain " +
                fixed(model - base, 2) + ", need " + fixed(kFbpGainDb, 1) + ")"};
  } catch (const std::exception& e) {
    return {false, e.what()};
  }
}

Result prompt_ablation(Evaluator& ev) {
  try {
    double with = 0.0, without = 0.0;
    std::string per;
    for (std::size_t v : kViews) {
      const double a = ev.get("promptct", v).psnr, b = ev.get("mlipct", v).psnr;
      with += a / static_cast<double>(kViews.size());
      without += b / static_cast<double>(kViews.size());
      per += " " + std::to_string(v) + ":" + fixed(a - b, 2);
    }
    return {with - without >= kPromptMarginDb, "mean PromptCT " + fixed(with, 2) + " vs MLipCT " + fixed(without, 2) +
                                                   " (margin " + fixed(with - without, 2) + ", need " +
                                                   fixed(kPromptMarginDb, 1) + "); per view" + per};
  } catch (const std::exception& e) {
    return {false, e.what()};
  }
}

Result depth(Experiment& ex) {
  Model* m = ex.model("promptct");
  if (!m) return {false, ex.why("promptct")};
  const auto rows = stagewise_trace(*m, *ex.data, *ex.bank, {1, 3, 5}, kViews, 1);
  write_trace_csv(ex.work / "acceptance" / "stages.csv", rows);
  std::map<std::size_t, double> mean;
  for (const auto& row : rows) mean[row.stages] += row.psnr / static_cast<double>(kViews.size());
  const double k1 = mean[1], k3 = mean[3], k5 = mean[5];
  return {std::abs(k3 - k5) <= kDepthPlateauDb && k3 - k1 >= kDepthGainDb,
          "mean PSNR K=1 " + fixed(k1, 2) + ", K=3 " + fixed(k3, 2) + ", K=5 " + fixed(k5, 2) + " (|K3-K5| " +
              fixed(std::abs(k3 - k5), 2) + " <= 0.2, K3-K1 " + fixed(k3 - k1, 2) + " >= 0.5)"};
}

Result metric_oracles() {
  std::mt19937_64 rng(0x3e7);
  std::uniform_real_distribution<double> u(0.0, 0.8);
  Tensor ref({64, 64});
  for (auto& v : ref.storage()) v = u(rng);
  Tensor shifted = ref;
  for (auto& v : shifted.storage()) v += 0.1;
  const double p = psnr(shifted, ref), e = rmse(shifted, ref), s = ssim(ref, ref);
  const bool ok = std::abs(p - 20.0) < kMetricTol && std::abs(e - 0.1) < kMetricTol && std::abs(s - 1.0) < kMetricTol &&
                  std::isinf(psnr(ref, ref));
  return {ok, "offset 0.1: PSNR " + fixed(p, 12) + " RMSE " + fixed(e, 12) + "; identical: SSIM " + fixed(s, 12)};
}

Result determinism(const Experiment& ex, const fs::path& source_dir) {
  // Both runs use the same paths (train.cfg records them), moved aside after.
  const fs::path cfg = source_dir / "configs" / "tiny.cfg";
  const fs::path root = ex.work / "acceptance" / "determinism";
  const fs::path live = root / "run";
  std::error_code ec;
  fs::remove_all(root, ec);
  for (const char* side : {"a", "b"}) {
    const std::string data = (live / "data").string();
    if (run_cli({"simulate", "--config", cfg.string(), "--out", data, "--threads", "1", "--seed", "11"}) != 0 ||
        run_cli({"train", "--config", cfg.string(), "--data", data, "--out", (live / "run").string(), "--threads", "1",
                 "--seed", "5"}) != 0 ||
        run_cli({"reconstruct", "--checkpoint", (live / "run" / "model.lipc").string(), "--sino",
                 (live / "data" / "test" / "0000.sino_60.lipt").string(), "--mask",
                 (live / "data" / "test" / "0000.mask_60.lipt").string(), "--out", (live / "rec").string(),
                 "--threads", "1"}) != 0) {
      return {false, std::string("pipeline run ") + side + " failed"};
    }
    fs::rename(live, root / side);
  }
  std::size_t compared = 0;
  std::vector<std::string> differing;
  for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), root / "a");
    ++compared;
    std::string x = slurp(entry.path()), y = slurp(root / "b" / rel);
    // Wall-clock timing is the only intended difference.
    if (rel.filename() == "summary.txt") {
      x = without_line(x, "seconds=");
      y = without_line(y, "seconds=");
    }
    if (x != y) differing.push_back(rel.string());
  }
  const bool key_files = fs::exists(root / "a" / "run" / "model.lipc") && fs::exists(root / "a" / "rec" / "final.lipt");
  std::string detail = std::to_string(compared) + " files compared (dataset, checkpoint, optimizer, logs, outputs)";
  for (const auto& d : differing) detail += "; differs: " + d;
  return {key_files && differing.empty() && compared > 0, detail};
}

}  // namespace

int main() {
  const char* env_dir = std::getenv("PROMPTCT_ACCEPTANCE_DIR");
  Experiment ex;
  ex.work = env_dir && *env_dir ? fs::path(env_dir) : fs::path(PROMPTCT_DEFAULT_WORK_DIR);
  ex.config = fs::path(PROMPTCT_SOURCE_DIR) / "configs" / "desk.cfg";
  fs::create_directories(ex.work / "acceptance");
  const bool allow_training = std::getenv("PROMPTCT_ACCEPTANCE_NO_TRAIN") == nullptr;
  std::cerr << "acceptance: work directory " << ex.work.string() << std::endl;

  std::vector<std::pair<std::string, Result>> results;
  auto record = [&](const std::string& label, const std::function<Result()>& fn) {
    Result r;
    try {
      r = fn();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (r.pass ? "PASS" : "FAIL") << "  " << label << ": " << r.detail << std::endl;
    results.emplace_back(label, r);
  };

  // Model-free criteria first so they report even if training fails.
  record("1 adjointness", adjointness);
  record("2 gradient check", gradient);
  record("11 metric oracles", metric_oracles);
  record("12 determinism", [&] { return determinism(ex, PROMPTCT_SOURCE_DIR); });

  prepare(ex, allow_training);
  for (const auto& [name, why] : ex.problems) std::cerr << "acceptance: " << why << std::endl;
  const bool have_data = ex.data.has_value();
  auto needs_data = [&](const std::function<Result()>& fn) {
    return [&, fn]() -> Result { return have_data ? fn() : Result{false, "desk dataset unavailable"}; };
  };
  Evaluator ev{ex, {}};

  record("3 threshold residual bound", needs_data([&] { return lemma1(ex); }));
  record("4 bounded denoiser", needs_data([&] { return bounded(ex); }));
  TheoryResults th;
  bool theory_done = false;
  auto theory_once = [&]() -> TheoryResults& {
    if (!theory_done) {
      th = theory(ex);
      theory_done = true;
    }
    return th;
  };
  record("5 stage-map Lipschitz", needs_data([&] { return theory_once().contraction; }));
  record("6 contraction and fixed point", needs_data([&] { return theory_once().fixed_point; }));
  record("7 view-count monotonicity", needs_data([&] { return view_monotonicity(ev); }));
  record("8 gain over FBP", needs_data([&] { return fbp_gain(ev); }));
  record("9 prompt ablation", needs_data([&] { return prompt_ablation(ev); }));
  record("10 stage-wise convergence", needs_data([&] { return depth(ex); }));

  std::sort(results.begin(), results.end(), [](const auto& a, const auto& b) {
    return std::stoi(a.first) < std::stoi(b.first);
  });
  std::ofstream summary(ex.work / "acceptance" / "summary.txt");
  std::size_t passed = 0;
  for (const auto& [label, r] : results) {
    summary << (r.pass ? "PASS" : "FAIL") << "  " << label << ": " << r.detail << "\n";
    passed += r.pass ? 1 : 0;
  }
  std::cout << "acceptance: " << passed << "/" << results.size() << " criteria passed" << std::endl;
  return passed == results.size() ? 0 : 1;
}
