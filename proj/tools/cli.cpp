#include "cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

#include "promptct/errors.hpp"
#include "promptct/metrics.hpp"
#include "promptct/reconstructor.hpp"
#include "promptct/simulate.hpp"
#include "promptct/trainer.hpp"
#include "promptct/verify.hpp"

namespace promptct::cli {
namespace {

namespace fs = std::filesystem;

constexpr const char* kVersion = "0.1.0";

// Raised for bad user input discovered after flag parsing.
struct UserError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::string geometry;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key=value configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--geometry", c.geometry, "geometry-only configuration file applied over --config")
      ->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "seed for every randomized step of the command");
  cmd->add_option("--threads", c.threads, "worker threads; 1 guarantees bit-reproducibility")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--set", c.sets, "extra key=value override, repeatable (flags still win)");
}

Config resolve(const Common& c) {
  Config cfg;
  if (!c.config.empty()) cfg = Config::load(c.config);
  if (!c.geometry.empty()) cfg.merge(Config::load(c.geometry));
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw UserError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.set("threads", std::to_string(c.threads));
  return cfg;
}

std::string env_data_dir() {
  const char* v = std::getenv("PROMPTCT_DATA_DIR");
  return v ? v : "";
}

// --data flag > config data_dir > PROMPTCT_DATA_DIR > fallback.
std::string data_dir(const std::string& flag, const Config& cfg, const std::string& fallback) {
  if (!flag.empty()) return flag;
  if (cfg.has("data_dir")) return cfg.get_string("data_dir", "");
  const auto env = env_data_dir();
  return env.empty() ? fallback : env;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string num(double v, int precision = 4) { return format_metric(v, precision); }

void summary(const std::string& command, const std::vector<std::pair<std::string, std::string>>& fields) {
  std::cout << "promptct " << command << " status=ok";
  for (const auto& [k, v] : fields) std::cout << " " << k << "=" << v;
  std::cout << std::endl;
}

// --- simulate --------------------------------------------------------------------

struct SimulateArgs {
  Common common;
  std::string out;
  std::string views;
};

int cmd_simulate(const SimulateArgs& a) {
  Config cfg = resolve(a.common);
  if (a.common.seed) cfg.set("seed", std::to_string(*a.common.seed));
  if (!a.views.empty()) cfg.set("views", a.views);
  cfg.set("data_dir", data_dir(a.out, cfg, "data"));
  DatasetConfig d = DatasetConfig::from_config(cfg);
  generate_dataset(d, a.common.threads);
  summary("simulate", {{"dir", d.path.string()},
                       {"train", std::to_string(d.n_train)},
                       {"val", std::to_string(d.n_val)},
                       {"test", std::to_string(d.n_test)},
                       {"views", join(d.view_counts)}});
  return 0;
}

// --- train -----------------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string regime;
  std::size_t views = 0;
  std::string out;
  std::string data;
};

void write_run_metrics(const fs::path& path, const std::string& name, Model& model, const Dataset& data,
                       OperatorBank& bank, std::size_t threads) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "model,views,psnr,ssim,rmse\n";
  for (std::size_t v : data.config().view_counts) {
    const auto m = mean_metrics(evaluate_split(&model, data, Split::Test, v, bank, threads));
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.17g,%.17g,%.17g\n", name.c_str(), v, m.psnr, m.ssim, m.rmse);
    out << buf;
  }
}

int cmd_train(const TrainArgs& a) {
  Config cfg = resolve(a.common);
  if (a.common.seed) cfg.set("train.seed", std::to_string(*a.common.seed));
  if (!a.regime.empty()) cfg.set("train.regime", a.regime);
  if (a.views > 0) cfg.set("train.views", std::to_string(a.views));
  if (!a.out.empty()) cfg.set("train.out_dir", a.out);
  if (!cfg.has("train.out_dir")) cfg.set("train.out_dir", "run");
  cfg.set("data_dir", data_dir(a.data, cfg, "data"));
  TrainConfig tc = TrainConfig::from_config(cfg);
  const Dataset data = Dataset::open(tc.dataset);
  // The dataset fixes the geometry; explicit geometry keys must agree with it.
  Config model_cfg = cfg;
  data.config().geometry.to_config(model_cfg);
  const UnfoldingConfig uc = UnfoldingConfig::from_config(model_cfg);
  if (tc.operator_cache.empty()) tc.operator_cache = tc.dataset / "operators";

  const auto result = train(tc, uc, [](const EpochLog& e) {
    std::cerr << "epoch " << e.epoch << " loss=" << num(e.loss) << " val_psnr=";
    for (std::size_t i = 0; i < e.val_psnr.size(); ++i) std::cerr << (i ? "/" : "") << num(e.val_psnr[i], 2);
    std::cerr << " (" << num(e.seconds, 1) << " s)" << std::endl;
  });
  tc.to_config(cfg);
  cfg.save(tc.out_dir / "train.cfg");

  Model model = load_model(result.checkpoint);
  OperatorBank bank(model.config.geometry, tc.operator_cache);
  std::string name = tc.out_dir.filename().string();
  if (name.empty()) name = tc.out_dir.parent_path().filename().string();
  write_run_metrics(tc.out_dir / "metrics.csv", name, model, data, bank, tc.threads);

  const auto logs = read_train_log(tc.log_path());
  summary("train", {{"checkpoint", result.checkpoint.string()},
                    {"regime", regime_name(tc.regime)},
                    {"epochs", std::to_string(logs.empty() ? 0 : logs.back().epoch)},
                    {"loss", logs.empty() ? "nan" : num(logs.back().loss, 6)},
                    {"params", std::to_string(parameter_count(model.params))},
                    {"seconds", num(result.seconds, 1)}});
  return 0;
}

// --- reconstruct -----------------------------------------------------------------

struct ReconstructArgs {
  Common common;
  std::string checkpoint;
  std::string sino;
  std::string mask;
  std::string out;
  std::string stages_out;
  std::size_t stages = 0;
};

Model open_model(const std::string& checkpoint, const Config& fallback) {
  if (fs::exists(model_config_path(checkpoint))) return load_model(checkpoint);
  Model m = make_model(UnfoldingConfig::from_config(fallback), 0);
  load_checkpoint(checkpoint, m.params);
  return m;
}

int cmd_reconstruct(const ReconstructArgs& a) {
  const Config cfg = resolve(a.common);
  Model model = open_model(a.checkpoint, cfg);
  const Tensor y = load_tensor(a.sino);
  const Tensor mask = load_tensor(a.mask);
  OperatorBank bank(model.config.geometry, cfg.get_string("operator_cache", ""));
  const auto res = promptct_forward(model, y, mask, bank, a.stages > 0 ? std::optional(a.stages) : std::nullopt);
  write_reconstruction(a.out, res, false);
  if (!a.stages_out.empty()) {
    fs::create_directories(a.stages_out);
    for (std::size_t k = 0; k < res.stages.size(); ++k) {
      save_tensor(fs::path(a.stages_out) / ("stage_" + std::to_string(k) + ".lipt"), res.stages[k]);
    }
  }
  summary("reconstruct", {{"out", (fs::path(a.out) / "final.lipt").string()},
                          {"stages", std::to_string(res.stages.size() - 1)},
                          {"views", std::to_string(views_from_mask(mask).size())}});
  return 0;
}

// --- verify ----------------------------------------------------------------------

struct VerifyArgs {
  Common common;
  std::string checkpoint;
  std::string suite = "all";
  std::string out = "verify_out";
  std::string data;
  std::size_t views = 60;
  std::string stages_out;
  std::string noprompt;
  std::vector<std::string> lipct;
};

const std::vector<double> kSigmaGrid{0.02, 0.03, 0.05, 0.075, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5};

int cmd_verify(const VerifyArgs& a) {
  const Config cfg = resolve(a.common);
  const std::uint64_t seed = a.common.seed.value_or(2024);
  Model model = open_model(a.checkpoint, cfg);
  const auto& g = model.config.geometry;
  const auto views = subsample_views(g.n_views_full, a.views);
  const Tensor mask = make_mask(g.n_views_full, g.n_bins, views);
  const fs::path out(a.out);
  fs::create_directories(out);

  const std::set<std::string> known{"lemma1", "bounded", "lipschitz", "contraction", "stages", "ablation", "all"};
  if (!known.count(a.suite)) throw UserError("unknown suite '" + a.suite + "'");
  auto want = [&](const char* s) { return a.suite == "all" || a.suite == s; };

  std::optional<Dataset> data;
  const auto dir = data_dir(a.data, cfg, "");
  if (!dir.empty() && fs::exists(fs::path(dir) / "manifest.txt")) data = Dataset::open(dir);
  auto need_data = [&](const char* suite) {
    if (!data) throw UserError(std::string("suite '") + suite + "' needs a dataset (--data or PROMPTCT_DATA_DIR)");
    if (!(data->config().geometry == g)) throw UserError("dataset geometry does not match the checkpoint");
  };
  OperatorBank bank(g, data ? data->path() / "operators" : fs::path());

  std::ostringstream text;
  std::vector<std::pair<std::string, std::string>> fields{{"suite", a.suite}};
  bool hard_fail = false;

  if (want("lemma1")) {
    const auto r = check_lemma1(model.params, model.config.lipnet, 100, kSigmaGrid, seed, &mask);
    std::ofstream csv(out / "lemma1.csv");
    csv << "sigma,ratio\n";
    for (const auto& [s, v] : r.samples) csv << format_metric(s, 6) << "," << format_metric(v, 12) << "\n";
    text << "lemma1: max_ratio=" << num(r.max_ratio, 6) << " frame_norm=" << num(r.frame_norm, 6)
         << (r.max_ratio <= 1.0 ? " PASS" : " FAIL") << "\n";
    fields.emplace_back("lemma1_max_ratio", num(r.max_ratio, 6));
    hard_fail |= r.max_ratio > 1.0;
  }
  std::optional<Tensor> prompt;
  if (model.config.lipnet.prompt) prompt = prompt_encode(model.params, model.config.lipnet, mask);
  if (want("bounded")) {
    const auto r = check_bounded(model.params, model.config.lipnet, 100, kSigmaGrid, seed, &mask);
    std::ofstream csv(out / "bounded.csv");
    csv << "sigma,max_ratio\n";
    for (const auto& [s, v] : r.profile) csv << format_metric(s, 6) << "," << format_metric(v, 12) << "\n";
    text << "bounded: N_hat=" << num(r.n_hat, 6) << " (measured)\n";
    fields.emplace_back("n_hat", num(r.n_hat, 6));
  }
  if (want("lipschitz")) {
    std::vector<Tensor> anchors;
    for (std::size_t i = 0; i < 10; ++i) anchors.push_back(random_ellipse_phantom(g.image_size, mix_seed(seed, i)).image);
    const double sigma0 = schedule_sigma0(model.params);
    const ImageMap f = [&](const Tensor& x) {
      return denoise(model.params, model.config.lipnet, x, sigma0, prompt ? &*prompt : nullptr);
    };
    const auto est = estimate_lipschitz(f, anchors, 200, 5, seed);
    std::ofstream csv(out / "lipschitz.csv");
    csv << "pair,ratio\n";
    for (std::size_t i = 0; i < est.stats.ratios.size(); ++i) csv << i << "," << format_metric(est.stats.ratios[i], 12) << "\n";
    text << "lipschitz: upsilon_squared=" << num(est.squared, 6) << " upsilon=" << num(est.unsquared, 6)
         << " pairs=" << est.stats.ratios.size() << " (measured lower bound)\n";
    fields.emplace_back("upsilon_sq", num(est.squared, 6));
  }
  if (want("contraction")) {
    need_data("contraction");
    ContractionOptions opt;
    opt.views = a.views;
    opt.seed = seed;
    const auto rep = check_contraction(model, *data, bank, opt);
    std::ofstream(out / "theory_report.txt") << rep.to_text();
    std::ofstream csv(out / "residuals.csv");
    csv << "image,step,residual\n";
    for (std::size_t i = 0; i < rep.residuals.size(); ++i)
      for (std::size_t k = 0; k < rep.residuals[i].size(); ++k)
        csv << i << "," << k << "," << format_metric(rep.residuals[i][k], 12) << "\n";
    text << "contraction: stage_ratio_below_one=" << num(rep.stage_lipschitz.stats.fraction_below(1.0), 4)
         << " monotone_images=" << rep.monotone_images << "/" << rep.residuals.size() << " (report only)\n";
    fields.emplace_back("below_one", num(rep.stage_lipschitz.stats.fraction_below(1.0), 4));
  }
  if (want("stages")) {
    need_data("stages");
    const auto rows = stagewise_trace(model, *data, bank, {1, 2, 3, 4, 5}, data->config().view_counts,
                                      a.common.threads);
    const fs::path p = a.stages_out.empty() ? out / "stages.csv" : fs::path(a.stages_out);
    write_trace_csv(p, rows);
    text << "stages: rows=" << rows.size() << " csv=" << p.string() << "\n";
  }
  if (want("ablation")) {
    need_data("ablation");
    std::vector<std::unique_ptr<Model>> owned;
    std::vector<ComparisonModel> models;
    auto keep = [&](Model m) {
      owned.push_back(std::make_unique<Model>(std::move(m)));
      return owned.back().get();
    };
    if (!a.lipct.empty()) {
      ComparisonModel lip{"LipCT", {}, nullptr};
      for (const auto& item : a.lipct) {
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw UserError("--lipct expects V=checkpoint, got '" + item + "'");
        lip.per_view[std::stoul(item.substr(0, eq))] = keep(open_model(item.substr(eq + 1), cfg));
      }
      models.push_back(lip);
    }
    if (!a.noprompt.empty()) models.push_back({"MLipCT", {}, keep(open_model(a.noprompt, cfg))});
    models.push_back({model.config.lipnet.prompt ? "PromptCT" : "model", {}, &model});
    const auto rows = ablation_compare(models, *data, bank, data->config().view_counts, a.common.threads);
    write_comparison_csv(out / "ablation.csv", rows, data->config().view_counts);
    text << "ablation: rows=" << rows.size() << "\n";
  }
  {
    std::ofstream(out / "verify_report.txt") << text.str();
  }
  std::cerr << text.str();
  if (hard_fail) {
    std::cerr << "error: a hard invariant failed (see " << (out / "verify_report.txt").string() << ")\n";
    return 2;
  }
  summary("verify", fields);
  return 0;
}

// --- report ----------------------------------------------------------------------

struct ReportArgs {
  Common common;
  std::vector<std::string> runs;
  std::string out = "report";
  std::string data;
};

ComparisonRow read_run(const fs::path& dir) {
  const auto csv = dir / "metrics.csv";
  std::ifstream in(csv);
  if (!in) throw UserError("run directory " + dir.string() + " has no metrics.csv");
  std::string line;
  std::getline(in, line);
  if (line != "model,views,psnr,ssim,rmse") throw CorruptFileError(csv.string() + ": unexpected header");
  ComparisonRow row;
  row.name = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f[5];
    for (auto& s : f) std::getline(ss, s, ',');
    try {
      row.by_view[std::stoul(f[1])] = {std::stod(f[2]), std::stod(f[3]), std::stod(f[4])};
    } catch (const std::logic_error&) {
      throw CorruptFileError(csv.string() + ": malformed line '" + line + "'");
    }
  }
  if (fs::exists(dir / "summary.txt")) {
    row.parameters = static_cast<std::size_t>(Config::load(dir / "summary.txt").get_int("parameters", 0));
  }
  return row;
}

int cmd_report(const ReportArgs& a) {
  const Config cfg = resolve(a.common);
  std::vector<ComparisonRow> runs;
  for (const auto& r : a.runs) runs.push_back(read_run(r));
  std::string dir = a.data;
  if (dir.empty() && fs::exists(fs::path(a.runs.front()) / "train.cfg")) {
    dir = Config::load(fs::path(a.runs.front()) / "train.cfg").get_string("data_dir", "");
  }
  dir = data_dir(dir, cfg, "");
  std::vector<std::size_t> views;
  for (const auto& [v, m] : runs.front().by_view) views.push_back(v);

  ComparisonRow fbp_row;
  fbp_row.name = "FBP";
  if (dir.empty()) throw UserError("report needs the dataset for the FBP baseline (--data or PROMPTCT_DATA_DIR)");
  const Dataset data = Dataset::open(dir);
  OperatorBank bank(data.config().geometry, data.path() / "operators");
  for (std::size_t v : views) {
    fbp_row.by_view[v] = mean_metrics(evaluate_split(nullptr, data, Split::Test, v, bank, a.common.threads,
                                                     std::nullopt, true));
  }
  std::vector<ComparisonRow> rows{fbp_row};
  rows.insert(rows.end(), runs.begin(), runs.end());

  fs::create_directories(a.out);
  write_comparison_csv(fs::path(a.out) / "report.csv", rows, views);
  std::ofstream md(fs::path(a.out) / "report.md");
  md << "| model | params |";
  for (auto v : views) md << " PSNR " << v << " | SSIM " << v << " | RMSE " << v << " | dPSNR " << v << " |";
  md << " PSNR mean | SSIM mean | RMSE mean |\n|---|---|";
  for (std::size_t i = 0; i < views.size(); ++i) md << "---|---|---|---|";
  md << "---|---|---|\n";
  for (const auto& r : rows) {
    md << "| " << r.name << " | " << r.parameters << " |";
    for (auto v : views) {
      const auto it = r.by_view.find(v);
      if (it == r.by_view.end()) {
        md << " - | - | - | - |";
        continue;
      }
      const auto& m = it->second;
      md << " " << num(m.psnr, 2) << " | " << num(m.ssim, 4) << " | " << num(m.rmse, 4) << " | "
         << num(m.psnr - fbp_row.by_view[v].psnr, 2) << " |";
    }
    const auto m = r.mean();
    md << " " << num(m.psnr, 2) << " | " << num(m.ssim, 4) << " | " << num(m.rmse, 4) << " |\n";
  }
  summary("report", {{"rows", std::to_string(rows.size())}, {"csv", (fs::path(a.out) / "report.csv").string()}});
  return 0;
}

// --- info ------------------------------------------------------------------------

struct InfoArgs {
  Common common;
  std::string checkpoint;
};

int cmd_info(const InfoArgs& a) {
  const Config cfg = resolve(a.common);
  std::cout << "promptct " << kVersion << "\n";
  if (!a.checkpoint.empty()) {
    const auto entries = read_checkpoint(a.checkpoint);
    std::size_t scalars = 0;
    for (const auto& [name, t] : entries) {
      std::cout << "  " << name << " " << dims_to_string(t.dims()) << "\n";
      scalars += t.size();
    }
    summary("info", {{"checkpoint", a.checkpoint}, {"tensors", std::to_string(entries.size())},
                     {"scalars", std::to_string(scalars)}});
    return 0;
  }
  const UnfoldingConfig uc = UnfoldingConfig::from_config(cfg);
  Config flat;
  uc.to_config(flat);
  std::cout << flat.to_string();
  summary("info", {{"image_size", std::to_string(uc.geometry.image_size)},
                   {"views_full", std::to_string(uc.geometry.n_views_full)},
                   {"params", std::to_string(parameter_count(uc))},
                   {"prompt_params", std::to_string(prompt_encoder_size(uc.lipnet))}});
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Sparse-view CT reconstruction with prompted Lipschitz unfolding", "promptct"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_version_flag("--version", kVersion);

  SimulateArgs sim;
  auto* c_sim = app.add_subcommand("simulate", "generate a synthetic phantom dataset");
  add_common(c_sim, sim.common);
  c_sim->add_option("--out", sim.out, "dataset directory (default: data_dir, PROMPTCT_DATA_DIR, ./data)");
  c_sim->add_option("--views", sim.views, "comma separated sparse view counts");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train a model on a generated dataset");
  add_common(c_train, tr.common);
  c_train->add_option("--regime", tr.regime, "single_view | multi_view_noprompt | multi_view_prompt")
      ->check(CLI::IsMember({"single_view", "multi_view_noprompt", "multi_view_prompt"}));
  c_train->add_option("--views", tr.views, "view count for the single_view regime (0: config value)");
  c_train->add_option("--out", tr.out, "run directory for checkpoint, log and metrics");
  c_train->add_option("--data", tr.data, "dataset directory (default: data_dir, PROMPTCT_DATA_DIR, ./data)");

  ReconstructArgs rec;
  auto* c_rec = app.add_subcommand("reconstruct", "reconstruct one sinogram with a trained checkpoint");
  add_common(c_rec, rec.common);
  c_rec->add_option("--checkpoint", rec.checkpoint, "LIPC checkpoint (model.cfg sidecar next to it)")
      ->required()
      ->check(CLI::ExistingFile);
  c_rec->add_option("--sino", rec.sino, "sparse sinogram (LIPT, V x bins)")->required()->check(CLI::ExistingFile);
  c_rec->add_option("--mask", rec.mask, "sampling mask (LIPT, full views x bins)")->required()->check(CLI::ExistingFile);
  c_rec->add_option("--out", rec.out, "output directory for final.lipt / final.pgm")->required();
  c_rec->add_option("--stages-out", rec.stages_out, "directory for every stage output x^(0..K)");
  c_rec->add_option("--stages", rec.stages, "override the number of unfolding stages (0: model K)");

  VerifyArgs ver;
  auto* c_ver = app.add_subcommand("verify", "numerical checks on a checkpoint");
  add_common(c_ver, ver.common);
  c_ver->add_option("--checkpoint", ver.checkpoint, "LIPC checkpoint")->required()->check(CLI::ExistingFile);
  c_ver->add_option("--suite", ver.suite, "lemma1|bounded|lipschitz|contraction|stages|ablation|all");
  c_ver->add_option("--out", ver.out, "output directory for CSVs and reports");
  c_ver->add_option("--data", ver.data, "dataset directory (default: data_dir, PROMPTCT_DATA_DIR)");
  c_ver->add_option("--views", ver.views, "view count for the contraction and lemma suites");
  c_ver->add_option("--stages-out", ver.stages_out, "path of the stage-wise trace CSV (default: <out>/stages.csv)");
  c_ver->add_option("--noprompt", ver.noprompt, "ablation: multi-view checkpoint without prompt");
  c_ver->add_option("--lipct", ver.lipct, "ablation: single-view checkpoint as V=path, repeatable");

  ReportArgs rep;
  auto* c_rep = app.add_subcommand("report", "merge run metrics into a comparison table");
  add_common(c_rep, rep.common);
  c_rep->add_option("runs", rep.runs, "run directories containing metrics.csv")->required();
  c_rep->add_option("--out", rep.out, "output directory for report.csv / report.md");
  c_rep->add_option("--data", rep.data, "dataset for the FBP baseline (default: first run's data_dir)");

  InfoArgs info;
  auto* c_info = app.add_subcommand("info", "print configuration or checkpoint contents");
  add_common(c_info, info.common);
  c_info->add_option("--checkpoint", info.checkpoint, "LIPC checkpoint to list")->check(CLI::ExistingFile);

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  if (!argv_rev.empty()) argv_rev.pop_back();  // program name
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (c_sim->parsed()) return cmd_simulate(sim);
    if (c_train->parsed()) return cmd_train(tr);
    if (c_rec->parsed()) return cmd_reconstruct(rec);
    if (c_ver->parsed()) return cmd_verify(ver);
    if (c_rep->parsed()) return cmd_report(rep);
    if (c_info->parsed()) return cmd_info(info);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

int run(int argc, const char* const* argv) { return run(std::vector<std::string>(argv, argv + argc)); }

}  // namespace promptct::cli
