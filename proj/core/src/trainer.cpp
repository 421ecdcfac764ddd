#include "promptct/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "binio.hpp"
#include "promptct/errors.hpp"
#include "promptct/parallel.hpp"

namespace promptct {

const char* regime_name(Regime r) {
  switch (r) {
    case Regime::SingleView: return "single_view";
    case Regime::MultiViewNoPrompt: return "multi_view_noprompt";
    case Regime::MultiViewPrompt: return "multi_view_prompt";
  }
  return "?";
}

Regime parse_regime(const std::string& s) {
  if (s == "single_view") return Regime::SingleView;
  if (s == "multi_view_noprompt") return Regime::MultiViewNoPrompt;
  if (s == "multi_view_prompt") return Regime::MultiViewPrompt;
  throw ArgumentError("unknown regime '" + s + "' (single_view|multi_view_noprompt|multi_view_prompt)");
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t to_size(long long v, const char* key) {
  if (v < 0) throw ArgumentError(std::string(key) + " must be non-negative");
  return static_cast<std::size_t>(v);
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs == 0) throw ArgumentError("train.epochs must be >= 1");
  if (batch_size == 0) throw ArgumentError("train.batch_size must be >= 1");
  if (!(lr > 0.0)) throw ArgumentError("train.lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ArgumentError("train.beta1/beta2 must lie in [0, 1)");
  }
  if (!(omega1 >= 0.0) || !(omega2 >= 0.0)) throw ArgumentError("train.omega1/omega2 must be >= 0");
  if (regime == Regime::SingleView && single_views == 0) throw ArgumentError("train.views must be >= 1");
  if (dataset.empty()) throw ArgumentError("training needs a dataset path");
  if (out_dir.empty()) throw ArgumentError("training needs an output directory");
}

TrainConfig TrainConfig::from_config(const Config& cfg) {
  TrainConfig t;
  t.regime = parse_regime(cfg.get_string("train.regime", regime_name(t.regime)));
  t.single_views = to_size(cfg.get_int("train.views", static_cast<long long>(t.single_views)), "train.views");
  t.epochs = to_size(cfg.get_int("train.epochs", static_cast<long long>(t.epochs)), "train.epochs");
  t.batch_size = to_size(cfg.get_int("train.batch_size", static_cast<long long>(t.batch_size)), "train.batch_size");
  t.lr = cfg.get_double("train.lr", t.lr);
  t.beta1 = cfg.get_double("train.beta1", t.beta1);
  t.beta2 = cfg.get_double("train.beta2", t.beta2);
  t.adam_eps = cfg.get_double("train.adam_eps", t.adam_eps);
  t.omega1 = cfg.get_double("train.omega1", t.omega1);
  t.omega2 = cfg.get_double("train.omega2", t.omega2);
  t.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", static_cast<long long>(t.seed)));
  t.dataset = cfg.get_string("data_dir", "");
  t.out_dir = cfg.get_string("train.out_dir", "");
  t.operator_cache = cfg.get_string("operator_cache", "");
  t.gradient_gate = cfg.get_bool("train.gradient_gate", t.gradient_gate);
  t.resume = cfg.get_bool("train.resume", t.resume);
  t.threads = std::max<std::size_t>(1, to_size(cfg.get_int("threads", 1), "threads"));
  return t;
}

void TrainConfig::to_config(Config& cfg) const {
  cfg.set("train.regime", regime_name(regime));
  cfg.set("train.views", std::to_string(single_views));
  cfg.set("train.epochs", std::to_string(epochs));
  cfg.set("train.batch_size", std::to_string(batch_size));
  cfg.set("train.lr", fmt(lr));
  cfg.set("train.beta1", fmt(beta1));
  cfg.set("train.beta2", fmt(beta2));
  cfg.set("train.adam_eps", fmt(adam_eps));
  cfg.set("train.omega1", fmt(omega1));
  cfg.set("train.omega2", fmt(omega2));
  cfg.set("train.seed", std::to_string(seed));
  cfg.set("data_dir", dataset.string());
  cfg.set("train.out_dir", out_dir.string());
  cfg.set("train.gradient_gate", gradient_gate ? "true" : "false");
}

UnfoldingConfig configure_for_regime(UnfoldingConfig model, Regime regime) {
  model.lipnet.prompt = regime == Regime::MultiViewPrompt;
  return model;
}

// --- loss ------------------------------------------------------------------------

double composite_loss(const std::vector<Tensor>& stages, const Tensor& x_final, const Tensor& gt, double omega1,
                      double omega2) {
  require_same_dims(x_final, gt, "composite_loss");
  double total = 0.0;
  for (const auto& x : stages) {
    require_same_dims(x, gt, "composite_loss");
    double l1 = 0.0, l2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = x[i] - gt[i];
      l1 += std::abs(d);
      l2 += d * d;
    }
    total += omega1 * l1 + omega2 * l2;
  }
  double fin = 0.0;
  for (std::size_t i = 0; i < x_final.size(); ++i) {
    const double d = x_final[i] - gt[i];
    fin += d * d;
  }
  return total + fin;
}

namespace net {

ad::Var composite_loss(const std::vector<ad::Var>& stages, const ad::Var& x_final, const ad::Var& gt, double omega1,
                       double omega2) {
  ad::Var total = ad::sum_squares(ad::sub(x_final, gt));
  for (const auto& x : stages) {
    const ad::Var d = ad::sub(x, gt);
    total = total + ad::scale(ad::sum_abs(d), omega1) + ad::scale(ad::sum_squares(d), omega2);
  }
  return total;
}

}  // namespace net

// --- optimizer -------------------------------------------------------------------

void Adam::step(ModelParams& params, double grad_scale) {
  for (const auto& p : params.items()) {
    if (p.trainable && !p.grad.all_finite()) throw NumericError("non-finite gradient for " + p.name);
  }
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double c1 = 1.0 - std::pow(state_.beta1, t);
  const double c2 = 1.0 - std::pow(state_.beta2, t);
  for (auto& p : params.items()) {
    if (!p.trainable) continue;
    auto& m = state_.m[p.name];
    auto& v = state_.v[p.name];
    if (m.dims() != p.value.dims()) m = Tensor::zeros_like(p.value);
    if (v.dims() != p.value.dims()) v = Tensor::zeros_like(p.value);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i] * grad_scale;
      m[i] = state_.beta1 * m[i] + (1.0 - state_.beta1) * g;
      v[i] = state_.beta2 * v[i] + (1.0 - state_.beta2) * g * g;
      p.value[i] -= state_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state_.eps);
    }
  }
}

// --- checkpoints -----------------------------------------------------------------

namespace {

void put_name(std::ostream& out, const std::string& name) {
  if (name.size() > 0xffff) throw ArgumentError("parameter name too long: " + name);
  binio::put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
}

std::string get_name(std::istream& in) {
  const auto len = binio::get<std::uint16_t>(in, "name length");
  std::string name(len, '\0');
  binio::read_exact(in, name.data(), len, "name");
  return name;
}

// Write to a sibling temp file and rename so a crash never leaves a torn file.
template <typename Fn>
void write_atomically(const std::filesystem::path& path, Fn&& body) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    body(out);
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

void expect_end(std::istream& in, const std::filesystem::path& path) {
  if (in.peek() != std::char_traits<char>::eof()) throw CorruptFileError(path.string() + ": trailing bytes");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  if (params.size() > 0xffff) throw ArgumentError("too many parameters for LIPC");
  write_atomically(path, [&](std::ostream& out) {
    binio::put_magic(out, "LIPC");
    binio::put<std::uint32_t>(out, kCheckpointVersion);
    binio::put<std::uint16_t>(out, static_cast<std::uint16_t>(params.size()));
    for (const auto& p : params.items()) {
      put_name(out, p.name);
      write_tensor(out, p.value);
    }
  });
}

std::vector<std::pair<std::string, Tensor>> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  try {
    binio::expect_magic(in, "LIPC");
    const auto version = binio::get<std::uint32_t>(in, "LIPC version");
    if (version != kCheckpointVersion) throw CorruptFileError("unsupported LIPC version " + std::to_string(version));
    const auto count = binio::get<std::uint16_t>(in, "LIPC count");
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (std::uint16_t i = 0; i < count; ++i) {
      auto name = get_name(in);
      out.emplace_back(std::move(name), read_tensor(in));
    }
    expect_end(in, path);
    return out;
  } catch (const CorruptFileError& e) {
    throw CorruptFileError(path.string() + ": " + e.what());
  }
}

void load_checkpoint(const std::filesystem::path& path, ModelParams& params) {
  const auto entries = read_checkpoint(path);
  std::vector<std::string> problems;
  std::set<std::string> seen;
  for (const auto& [name, value] : entries) {
    seen.insert(name);
    const Parameter* p = params.find(name);
    if (!p) {
      problems.push_back("unexpected '" + name + "'");
    } else if (p->value.dims() != value.dims()) {
      problems.push_back("'" + name + "' has dims " + dims_to_string(value.dims()) + ", model expects " +
                         dims_to_string(p->value.dims()));
    }
  }
  for (const auto& p : params.items()) {
    if (!seen.count(p.name)) problems.push_back("missing '" + p.name + "'");
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint " + path.string() + " does not match the model:";
    for (const auto& s : problems) msg += " " + s + ";";
    throw ParameterMismatchError(msg);
  }
  for (const auto& [name, value] : entries) params.get(name).value = value;
}

void save_optimizer(const std::filesystem::path& path, const OptimizerState& s) {
  write_atomically(path, [&](std::ostream& out) {
    binio::put_magic(out, "LIPA");
    binio::put<std::uint32_t>(out, kOptimizerVersion);
    binio::put<std::uint64_t>(out, s.step);
    binio::put<std::uint64_t>(out, s.epoch);
    binio::put<double>(out, s.lr);
    binio::put<double>(out, s.beta1);
    binio::put<double>(out, s.beta2);
    binio::put<double>(out, s.eps);
    binio::put<std::uint16_t>(out, static_cast<std::uint16_t>(s.m.size()));
    for (const auto& [name, m] : s.m) {
      put_name(out, name);
      write_tensor(out, m);
      write_tensor(out, s.v.at(name));
    }
  });
}

OptimizerState load_optimizer(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open optimizer state: " + path.string());
  try {
    binio::expect_magic(in, "LIPA");
    const auto version = binio::get<std::uint32_t>(in, "LIPA version");
    if (version != kOptimizerVersion) throw CorruptFileError("unsupported LIPA version " + std::to_string(version));
    OptimizerState s;
    s.step = binio::get<std::uint64_t>(in, "step");
    s.epoch = binio::get<std::uint64_t>(in, "epoch");
    s.lr = binio::get<double>(in, "lr");
    s.beta1 = binio::get<double>(in, "beta1");
    s.beta2 = binio::get<double>(in, "beta2");
    s.eps = binio::get<double>(in, "eps");
    const auto count = binio::get<std::uint16_t>(in, "count");
    for (std::uint16_t i = 0; i < count; ++i) {
      const auto name = get_name(in);
      s.m[name] = read_tensor(in);
      s.v[name] = read_tensor(in);
      if (s.m[name].dims() != s.v[name].dims()) throw CorruptFileError("moment dims differ for " + name);
    }
    expect_end(in, path);
    return s;
  } catch (const CorruptFileError& e) {
    throw CorruptFileError(path.string() + ": " + e.what());
  }
}

std::filesystem::path model_config_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p.replace_extension(".cfg");
  return p;
}

void save_model(const std::filesystem::path& checkpoint, const Model& model) {
  Config cfg;
  model.config.to_config(cfg);
  const auto text = cfg.to_string();
  write_atomically(model_config_path(checkpoint), [&](std::ostream& out) { out << text; });
  save_checkpoint(checkpoint, model.params);
}

Model load_model(const std::filesystem::path& checkpoint) {
  const auto cfg_path = model_config_path(checkpoint);
  if (!std::filesystem::exists(cfg_path)) throw IoError("model config sidecar not found: " + cfg_path.string());
  Model model = make_model(UnfoldingConfig::from_config(Config::load(cfg_path)), 0);
  load_checkpoint(checkpoint, model.params);
  return model;
}

// --- evaluation ------------------------------------------------------------------

std::vector<EvalItem> evaluate_split(Model* model, const Dataset& data, Split split, std::size_t views,
                                     OperatorBank& bank, std::size_t threads, std::optional<std::size_t> stages,
                                     bool fbp_only, std::size_t limit) {
  if (!model && !fbp_only) throw ArgumentError("evaluate_split: no model given");
  std::size_t n = data.count(split);
  if (limit > 0) n = std::min(n, limit);
  std::vector<EvalItem> items(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const Sample s = data.sample(split, i, views);
    const auto& entry = bank.for_mask(s.mask);
    const Tensor x0 = fbp(s.sinogram, bank.geometry(), entry.views);
    Tensor x = x0;
    if (!fbp_only) x = promptct_forward(*model, s.sinogram, s.mask, bank, stages, &x0).final_image();
    items[i] = {i, views, evaluate(x, s.ground_truth)};
  });
  return items;
}

ImageMetrics mean_metrics(const std::vector<EvalItem>& items) {
  MetricAccumulator acc;
  for (const auto& it : items) acc.add(it.metrics);
  return acc.mean();
}

// --- gradient gate ---------------------------------------------------------------

FiniteDiffOptions gradient_gate_options() {
  FiniteDiffOptions o;
  o.step = 1e-6;
  o.tolerance = 1e-4;
  return o;
}

FiniteDiffReport gradient_gate(std::uint64_t seed, const FiniteDiffOptions& options) {
  UnfoldingConfig cfg;
  cfg.stages = 1;
  cfg.lipnet.filters = 4;
  cfg.lipnet.stages = 1;
  cfg.lipnet.hidden = 4;
  cfg.lipnet.prompt_channels = 4;
  cfg.lipnet.image_size = 16;
  cfg.geometry.image_size = 16;
  cfg.geometry.pixel_size = 1.0;
  cfg.geometry.n_views_full = 24;
  cfg.geometry.n_bins = 25;
  cfg.geometry.source_to_center = 60.0;
  cfg.geometry.center_to_detector = 50.0;
  cfg.geometry.bin_size = 1.0;
  Model model = make_model(cfg, seed);
  // Evaluate at a generic point: zero biases on exactly-zero inputs (mask,
  // flat regions) would sit on ReLU kinks, and the near-zero head init makes
  // upstream gradients too small to resolve with central differences.
  std::mt19937_64 rng(mix_seed(seed, 0x9a7e));
  std::normal_distribution<double> jitter(0.0, 0.1);
  for (auto& p : model.params.items()) {
    if (!p.trainable || p.name == "schedule.tau") continue;
    for (auto& v : p.value.storage()) v += jitter(rng);
  }

  const auto views = subsample_views(cfg.geometry.n_views_full, 8);
  const SparseOperator op = build_operator(cfg.geometry, views);
  const Tensor small = rasterize(shepp_logan(32).ellipses, 16);
  const Tensor y = project(op, small);
  const Tensor x0 = fbp(y, cfg.geometry, views);
  const Tensor mask = make_mask(cfg.geometry.n_views_full, cfg.geometry.n_bins, views);
  const double eta = 1.0 / estimate_zeta(op, 200, 0x5eedULL);

  auto builder = [&](ad::Tape& tape) {
    BoundParams bp(tape, model.params);
    const ad::Var m = tape.constant(mask.reshaped({1, mask.dim(0), mask.dim(1)}));
    const ad::Var g = tape.constant(small.reshaped({1, 16, 16}));
    const auto xs = net::promptct_forward(bp, cfg, tape.constant(x0.reshaped({1, 16, 16})), tape.constant(y), op, eta,
                                          &m, cfg.stages);
    return net::composite_loss(xs, xs.back(), g, 0.1, 0.1);
  };
  return finite_diff_check(builder, model.params, options);
}

// --- training --------------------------------------------------------------------

namespace {

struct ViewData {
  std::size_t views = 0;
  const OperatorBank::Entry* entry = nullptr;
  double eta = 0.0;
  Tensor mask;  // 1 x Np x Nb
};

struct RecordData {
  Tensor gt;                     // 1 x H x W
  std::vector<Tensor> sinogram;  // per view slot
  std::vector<Tensor> x0;        // 1 x H x W, per view slot
};

struct Cache {
  std::vector<ViewData> views;
  std::vector<RecordData> records;
};

Cache load_split(const Dataset& data, Split split, const std::vector<std::size_t>& view_counts, OperatorBank& bank,
                 const UnfoldingConfig& model_cfg, std::size_t threads) {
  Cache c;
  const auto& g = bank.geometry();
  for (std::size_t v : view_counts) {
    ViewData vd;
    vd.views = v;
    const auto s = data.sample(split, 0, v);
    vd.entry = &bank.for_mask(s.mask);
    vd.eta = step_size(model_cfg, *vd.entry);
    vd.mask = s.mask.reshaped({1, s.mask.dim(0), s.mask.dim(1)});
    c.views.push_back(std::move(vd));
  }
  c.records.resize(data.count(split));
  parallel_for(c.records.size(), threads, [&](std::size_t i) {
    auto& r = c.records[i];
    for (const auto& vd : c.views) {
      const auto s = data.sample(split, i, vd.views);
      if (r.gt.empty()) r.gt = s.ground_truth.reshaped({1, g.image_size, g.image_size});
      r.x0.push_back(fbp(s.sinogram, g, vd.entry->views).reshaped({1, g.image_size, g.image_size}));
      r.sinogram.push_back(s.sinogram);
    }
  });
  return c;
}

std::vector<double> validate_cache(Model& model, const Cache& val, OperatorBank& bank, std::size_t threads) {
  std::vector<double> out;
  const auto& g = bank.geometry();
  for (std::size_t vi = 0; vi < val.views.size(); ++vi) {
    const auto& vd = val.views[vi];
    const Tensor mask = vd.mask.reshaped({vd.mask.dim(1), vd.mask.dim(2)});
    std::vector<double> psnrs(val.records.size());
    parallel_for(val.records.size(), threads, [&](std::size_t i) {
      const auto& r = val.records[i];
      const Tensor x0 = r.x0[vi].reshaped({g.image_size, g.image_size});
      const auto res = promptct_forward(model, r.sinogram[vi], mask, bank, std::nullopt, &x0);
      psnrs[i] = psnr(res.final_image(), r.gt.reshaped({g.image_size, g.image_size}));
    });
    double s = 0.0;
    for (double p : psnrs) s += p;
    out.push_back(psnrs.empty() ? 0.0 : s / static_cast<double>(psnrs.size()));
  }
  return out;
}

void write_log(const std::filesystem::path& path, const std::string& regime, const std::vector<std::size_t>& views,
               const std::vector<EpochLog>& logs) {
  std::ostringstream os;
  os << "epoch,regime,loss";
  for (auto v : views) os << ",psnr" << v;
  os << "\n";
  for (const auto& e : logs) {
    os << e.epoch << "," << regime << "," << fmt(e.loss);
    for (double p : e.val_psnr) os << "," << fmt(p);
    os << "\n";
  }
  const auto text = os.str();
  write_atomically(path, [&](std::ostream& out) { out << text; });
}

}  // namespace

std::vector<EpochLog> read_train_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open training log: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("epoch,regime,loss", 0) != 0) {
    throw CorruptFileError(path.string() + ": missing training log header");
  }
  std::vector<EpochLog> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    EpochLog e;
    std::size_t col = 0;
    try {
      while (std::getline(ss, field, ',')) {
        if (col == 0) {
          e.epoch = std::stoul(field);
        } else if (col == 2) {
          e.loss = std::stod(field);
        } else if (col > 2) {
          e.val_psnr.push_back(std::stod(field));
        }
        ++col;
      }
    } catch (const std::logic_error&) {
      throw CorruptFileError(path.string() + ": malformed line '" + line + "'");
    }
    if (col < 3) throw CorruptFileError(path.string() + ": malformed line '" + line + "'");
    out.push_back(std::move(e));
  }
  return out;
}

TrainResult train(const TrainConfig& cfg, const UnfoldingConfig& model_config, const EpochCallback& on_epoch) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();
  if (cfg.gradient_gate) {
    const auto report = gradient_gate();
    if (!report.pass) {
      throw NumericError("gradient gate failed: max rel. error " + fmt(report.max_rel_err));
    }
  }

  const Dataset data = Dataset::open(cfg.dataset);
  const UnfoldingConfig mcfg = configure_for_regime(model_config, cfg.regime);
  mcfg.validate();
  if (!(data.config().geometry == mcfg.geometry)) {
    throw ArgumentError("dataset geometry does not match the model geometry");
  }

  std::vector<std::size_t> train_views = data.config().view_counts;
  if (cfg.regime == Regime::SingleView) {
    if (std::find(train_views.begin(), train_views.end(), cfg.single_views) == train_views.end()) {
      throw ArgumentError("dataset has no " + std::to_string(cfg.single_views) + "-view sinograms");
    }
    train_views = {cfg.single_views};
  }
  const std::vector<std::size_t> val_views = data.config().view_counts;
  std::string regime = regime_name(cfg.regime);
  if (cfg.regime == Regime::SingleView) regime += ":" + std::to_string(cfg.single_views);

  OperatorBank bank(mcfg.geometry, cfg.operator_cache);
  const Cache train_set = load_split(data, Split::Train, train_views, bank, mcfg, cfg.threads);
  const Cache val_set = load_split(data, Split::Val, val_views, bank, mcfg, cfg.threads);
  if (train_set.records.empty()) throw ArgumentError("dataset has no training records");

  std::filesystem::create_directories(cfg.out_dir);
  const auto ckpt = cfg.checkpoint_path();
  auto adam_path = ckpt;
  adam_path += ".adam";

  Model model = make_model(mcfg, cfg.seed);
  OptimizerState init;
  init.lr = cfg.lr;
  init.beta1 = cfg.beta1;
  init.beta2 = cfg.beta2;
  init.eps = cfg.adam_eps;
  std::vector<EpochLog> logs;
  if (cfg.resume && std::filesystem::exists(ckpt) && std::filesystem::exists(adam_path)) {
    load_checkpoint(ckpt, model.params);
    init = load_optimizer(adam_path);
    if (std::filesystem::exists(cfg.log_path())) {
      for (auto& e : read_train_log(cfg.log_path())) {
        if (e.epoch <= init.epoch) logs.push_back(std::move(e));
      }
    }
  }
  Adam adam(std::move(init));
  if (adam.state().epoch == 0) {
    save_model(ckpt, model);
    save_optimizer(adam_path, adam.state());
    write_log(cfg.log_path(), regime, val_views, logs);
  }

  struct Pair {
    std::size_t record, slot;
  };
  std::vector<Pair> canonical;
  for (std::size_t r = 0; r < train_set.records.size(); ++r)
    for (std::size_t s = 0; s < train_views.size(); ++s) canonical.push_back({r, s});

  TrainResult result;
  result.checkpoint = ckpt;
  for (std::size_t epoch = adam.state().epoch + 1; epoch <= cfg.epochs; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    // Each epoch's order depends only on (seed, epoch) so a resumed run
    // visits samples exactly as an uninterrupted one would.
    std::vector<Pair> pairs = canonical;
    std::mt19937_64 rng(mix_seed(cfg.seed, epoch));
    std::shuffle(pairs.begin(), pairs.end(), rng);
    double loss_sum = 0.0;
    std::size_t in_batch = 0;
    model.params.zero_grad();
    for (std::size_t n = 0; n < pairs.size(); ++n) {
      const auto& pr = pairs[n];
      const auto& rec = train_set.records[pr.record];
      const auto& vd = train_set.views[pr.slot];
      double loss_value = 0.0;
      try {
        ad::Tape tape;
        BoundParams bp(tape, model.params);
        const ad::Var mask = tape.constant(vd.mask);
        const auto xs = net::promptct_forward(bp, mcfg, tape.constant(rec.x0[pr.slot]),
                                              tape.constant(rec.sinogram[pr.slot]), vd.entry->op, vd.eta, &mask,
                                              mcfg.stages);
        const ad::Var loss = net::composite_loss(xs, xs.back(), tape.constant(rec.gt), cfg.omega1, cfg.omega2);
        loss_value = loss.value()[0];
        if (!std::isfinite(loss_value)) throw NumericError("non-finite loss");
        tape.backward(loss);
        if (++in_batch == cfg.batch_size || n + 1 == pairs.size()) {
          adam.step(model.params, 1.0 / static_cast<double>(in_batch));
          model.params.zero_grad();
          in_batch = 0;
          ++result.steps;
        }
      } catch (const NumericError& e) {
        throw NumericError("training aborted at epoch " + std::to_string(epoch) + ", sample " +
                           std::to_string(n) + ": " + e.what() + "; last good checkpoint kept at " + ckpt.string());
      }
      loss_sum += loss_value;
    }

    EpochLog log;
    log.epoch = epoch;
    log.loss = loss_sum / static_cast<double>(pairs.size());
    log.val_psnr = validate_cache(model, val_set, bank, cfg.threads);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch).count();
    adam.state().epoch = epoch;
    save_model(ckpt, model);
    save_optimizer(adam_path, adam.state());
    logs.push_back(log);
    write_log(cfg.log_path(), regime, val_views, logs);
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }

  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  {
    std::ostringstream os;
    os << "regime=" << regime << "\n";
    os << "epochs=" << adam.state().epoch << "\n";
    os << "steps=" << adam.state().step << "\n";
    os << "parameters=" << parameter_count(model.params) << "\n";
    os << "seconds=" << fmt(result.seconds) << "\n";
    if (!logs.empty()) {
      os << "final_loss=" << fmt(logs.back().loss) << "\n";
      for (std::size_t i = 0; i < val_views.size() && i < logs.back().val_psnr.size(); ++i) {
        os << "val_psnr" << val_views[i] << "=" << fmt(logs.back().val_psnr[i]) << "\n";
      }
    }
    const auto text = os.str();
    write_atomically(cfg.out_dir / "summary.txt", [&](std::ostream& out) { out << text; });
  }
  return result;
}

}  // namespace promptct
