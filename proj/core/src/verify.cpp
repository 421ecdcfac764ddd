#include "promptct/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "promptct/errors.hpp"
#include "promptct/kernels.hpp"
#include "promptct/parallel.hpp"

namespace promptct {

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double parse_double(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument("trailing characters");
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

Tensor image3(const Tensor& img) { return img.reshaped({1, img.dim(0), img.dim(1)}); }

Tensor uniform_image(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  Tensor x({n, n});
  for (auto& v : x.storage()) v = uni(rng);
  return x;
}

Tensor gaussian_like(const Tensor& like, double scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor d = Tensor::zeros_like(like);
  for (auto& v : d.storage()) v = scale * normal(rng);
  return d;
}

Tensor random_direction(const Tensor& like, double norm, std::uint64_t seed) {
  Tensor d = gaussian_like(like, 1.0, seed);
  d *= norm / norm2(d);
  return d;
}

std::optional<Tensor> prompt_for(ModelParams& params, const LipNetConfig& cfg, const Tensor* mask) {
  if (!cfg.prompt || !mask) return std::nullopt;
  return prompt_encode(params, cfg, *mask);
}

}  // namespace

// --- threshold residual bound ----------------------------------------------------

double lemma1_ratio(const Tensor& filters, const Tensor& x, const Tensor& c, double sigma, double c_max,
                    double frame_norm) {
  if (sigma < 0.0) throw ArgumentError("lemma1_ratio: negative noise level");
  if (sigma == 0.0) return 0.0;
  const Tensor u = kernels::conv2d(image3(x), filters);
  require_same_dims(u, c, "lemma1_ratio");
  Tensor r = u;
  r -= kernels::soft_threshold(u, c * sigma);
  const Tensor back = kernels::conv2d_adjoint(r, filters);
  const double lhs = dot(back, back);
  const double rhs = static_cast<double>(u.size()) * sigma * sigma * c_max * c_max * frame_norm * frame_norm;
  return lhs / rhs;
}

Lemma1Report check_lemma1(ModelParams& params, const LipNetConfig& cfg, std::size_t trials,
                          const std::vector<double>& sigma_grid, std::uint64_t seed, const Tensor* mask) {
  if (sigma_grid.empty()) throw ArgumentError("check_lemma1: empty sigma grid");
  const Tensor& filters = params.get("frame.filters").value;
  const std::size_t n = cfg.image_size;
  Lemma1Report rep;
  rep.frame_norm = frame_spectral_norm(filters, n, n, 500);
  rep.trials = trials;
  const auto p = prompt_for(params, cfg, mask);
  for (std::size_t t = 0; t < trials; ++t) {
    const double sigma = sigma_grid[t % sigma_grid.size()];
    const std::uint64_t s = mix_seed(seed, t);
    const Tensor x = t % 2 == 0 ? random_ellipse_phantom(n, s).image : uniform_image(n, s);
    const Tensor c = cgnet_constants(params, cfg, kernels::conv2d(image3(x), filters), p ? &*p : nullptr);
    const double ratio = lemma1_ratio(filters, x, c, sigma, cfg.c_max, rep.frame_norm);
    rep.samples.emplace_back(sigma, ratio);
    rep.max_ratio = std::max(rep.max_ratio, ratio);
  }
  return rep;
}

// --- bounded denoiser ------------------------------------------------------------

Tensor denoise(ModelParams& params, const LipNetConfig& cfg, const Tensor& x, double sigma, const Tensor* prompt) {
  if (sigma < 0.0) throw ArgumentError("denoise: negative noise level");
  ad::Tape tape(false);
  BoundParams bp(tape, params);
  std::optional<ad::Var> pv;
  if (prompt) pv = tape.constant(*prompt);
  const auto res = net::lipnet_apply(bp, cfg, tape.constant(image3(x)), pv ? &*pv : nullptr, cfg.stages,
                                     tape.constant(Tensor::scalar(sigma)));
  return res.z.value().reshaped(x.dims());
}

BoundedReport check_bounded(const std::function<Tensor(const Tensor&, double)>& denoiser,
                            const std::vector<Tensor>& images, std::size_t trials,
                            const std::vector<double>& sigma_grid, std::uint64_t seed) {
  if (sigma_grid.empty() || images.empty()) throw ArgumentError("check_bounded: empty inputs");
  BoundedReport rep;
  rep.trials = trials;
  std::map<double, double> per_sigma;
  for (double s : sigma_grid) per_sigma[s] = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const double sigma = sigma_grid[t % sigma_grid.size()];
    if (!(sigma > 0.0)) throw ArgumentError("check_bounded: sigma must be > 0");
    Tensor x = images[t % images.size()];
    x += gaussian_like(x, sigma, mix_seed(seed, t));
    const Tensor d = denoiser(x, sigma);
    const double r = norm2(x - d);
    const double ratio = r * r / (sigma * sigma);
    per_sigma[sigma] = std::max(per_sigma[sigma], ratio);
    rep.n_hat = std::max(rep.n_hat, ratio);
  }
  rep.profile.assign(per_sigma.begin(), per_sigma.end());
  return rep;
}

BoundedReport check_bounded(ModelParams& params, const LipNetConfig& cfg, std::size_t trials,
                            const std::vector<double>& sigma_grid, std::uint64_t seed, const Tensor* mask) {
  const auto p = prompt_for(params, cfg, mask);
  std::vector<Tensor> images;
  for (std::size_t i = 0; i < std::min<std::size_t>(trials, 10); ++i) {
    images.push_back(random_ellipse_phantom(cfg.image_size, mix_seed(seed ^ 0xb0b0, i)).image);
  }
  return check_bounded([&](const Tensor& x, double s) { return denoise(params, cfg, x, s, p ? &*p : nullptr); },
                       images, trials, sigma_grid, seed);
}

// --- sampled Lipschitz constants -------------------------------------------------

double RatioStats::max() const {
  double m = 0.0;
  for (double r : ratios) m = std::max(m, r);
  return m;
}

double RatioStats::fraction_below(double bound) const {
  if (ratios.empty()) return 0.0;
  const auto n = std::count_if(ratios.begin(), ratios.end(), [&](double r) { return r < bound; });
  return static_cast<double>(n) / static_cast<double>(ratios.size());
}

double RatioStats::percentile(double q) const {
  if (ratios.empty()) return 0.0;
  std::vector<double> sorted = ratios;
  std::sort(sorted.begin(), sorted.end());
  const double rank = std::ceil(std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(sorted.size()));
  const auto idx = static_cast<std::size_t>(std::max(rank, 1.0)) - 1;
  return sorted[std::min(idx, sorted.size() - 1)];
}

LipschitzEstimate estimate_lipschitz(const ImageMap& f, const std::vector<Tensor>& anchors, std::size_t pairs,
                                     std::size_t power_steps, std::uint64_t seed) {
  if (anchors.empty()) throw ArgumentError("estimate_lipschitz: no anchors");
  std::vector<Tensor> f_anchor;
  f_anchor.reserve(anchors.size());
  for (const auto& a : anchors) f_anchor.push_back(f(a));

  LipschitzEstimate est;
  auto record = [&](const Tensor& x1, const Tensor& fx1, const Tensor& x2, const Tensor& fx2, bool refined) {
    const double dx = norm2(x1 - x2);
    if (dx == 0.0) {
      ++est.stats.skipped;
      return;
    }
    est.stats.ratios.push_back(norm2(fx1 - fx2) / dx);
    est.stats.refined.push_back(refined);
  };
  static constexpr double kScales[] = {1e-1, 1e-2, 1e-3};
  for (std::size_t j = 0; j < pairs; ++j) {
    const std::size_t a = j % anchors.size();
    const Tensor& x1 = anchors[a];
    const double xn = std::max(norm2(x1), 1e-12);
    const std::uint64_t s = mix_seed(seed, j);
    const std::size_t kind = j % 5;
    if (kind == 0 && anchors.size() > 1) {
      const std::size_t b = (a + 1 + (j / 5) % (anchors.size() - 1)) % anchors.size();
      record(x1, f_anchor[a], anchors[b], f_anchor[b], false);
    } else if (kind == 4 || kind == 0) {
      Tensor delta = random_direction(x1, 1e-2 * xn, s);
      for (std::size_t it = 0; it < power_steps; ++it) {
        const Tensor d = f(x1 + delta) - f_anchor[a];
        const double dn = norm2(d);
        if (dn == 0.0) break;
        delta = d * (1e-2 * xn / dn);
      }
      const Tensor x2 = x1 + delta;
      record(x1, f_anchor[a], x2, f(x2), true);
    } else {
      const Tensor x2 = x1 + random_direction(x1, kScales[kind - 1] * xn, s);
      record(x1, f_anchor[a], x2, f(x2), false);
    }
  }
  const double m = est.stats.max();
  est.unsquared = m;
  est.squared = m * m;
  return est;
}

// --- contraction -----------------------------------------------------------------

StepWindow step_window(double epsilon, double zeta, double upsilon, bool degenerate) {
  if (!(zeta > 0.0) || !(upsilon > 0.0)) throw ArgumentError("step_window: zeta and upsilon must be > 0");
  StepWindow w;
  w.degenerate = degenerate || !(epsilon > 0.0);
  w.upper = 1.0 / zeta + 1.0 / (upsilon * zeta);
  if (w.degenerate) {
    w.lower = -std::numeric_limits<double>::infinity();
    w.feasible = upsilon < 1.0;  // (eps + zeta) / (zeta - eps) -> 1 as eps -> 0
  } else {
    w.lower = 1.0 / epsilon - 1.0 / (upsilon * epsilon);
    w.feasible = zeta > epsilon ? upsilon < (epsilon + zeta) / (zeta - epsilon) : true;
  }
  return w;
}

std::vector<double> residual_series(const ImageMap& f, Tensor x, std::size_t steps) {
  std::vector<double> out;
  out.reserve(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    Tensor next = f(x);
    out.push_back(norm2(next - x));
    x = std::move(next);
  }
  return out;
}

bool non_increasing(const std::vector<double>& series, double rel_tol) {
  for (std::size_t k = 1; k < series.size(); ++k) {
    if (series[k] > series[k - 1] * (1.0 + rel_tol)) return false;
  }
  return true;
}

LinearCaseReport linear_case_check(const std::vector<double>& lambdas, double eta, std::size_t steps) {
  if (lambdas.empty()) throw ArgumentError("linear_case_check: no eigenvalues");
  const std::size_t n = lambdas.size();
  std::vector<std::uint64_t> offsets(n + 1);
  std::vector<std::uint32_t> cols(n);
  std::vector<double> weights(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(lambdas[i] >= 0.0)) throw ArgumentError("linear_case_check: eigenvalues must be >= 0");
    offsets[i + 1] = i + 1;
    cols[i] = static_cast<std::uint32_t>(i);
    weights[i] = std::sqrt(lambdas[i]);
  }
  const SparseOperator op({n}, {n}, offsets, cols, weights);
  const Tensor target = gaussian_like(Tensor({n}), 1.0, 17);
  const Tensor y = op.apply(target);
  std::vector<Tensor> xs{Tensor({n})};
  for (std::size_t k = 0; k < steps + 1; ++k) xs.push_back(ium_step(xs.back(), y, op, eta));

  LinearCaseReport rep;
  rep.eta = eta;
  const double lo = *std::min_element(lambdas.begin(), lambdas.end());
  const double hi = *std::max_element(lambdas.begin(), lambdas.end());
  rep.window = step_window(lo, hi, 1.0, !(lo > 0.0));
  for (std::size_t k = 0; k < steps; ++k) {
    const Tensor d0 = xs[k + 1] - xs[k];
    const Tensor d1 = xs[k + 2] - xs[k + 1];
    rep.residuals.push_back(norm2(d0));
    for (std::size_t i = 0; i < n; ++i) {
      // Differences of O(1) iterates carry ~1e-16 absolute roundoff; modes
      // that have decayed below this floor no longer resolve the ratio.
      const double floor = 1e-7 * std::max({std::abs(xs[k + 1][i]), std::abs(target[i]), 1e-150});
      if (std::abs(d0[i]) < floor) continue;
      const double theory = std::abs(1.0 - eta * lambdas[i]);
      const double err = std::abs(std::abs(d1[i]) / std::abs(d0[i]) - theory) / std::max(theory, 1e-300);
      // Exactly vanishing modes are compared in absolute terms.
      rep.max_rel_error = std::max(rep.max_rel_error, theory == 0.0 ? std::abs(d1[i]) / std::abs(d0[i]) : err);
    }
  }
  return rep;
}

std::string TheoryReport::to_text() const {
  std::ostringstream os;
  auto window = [&](const char* label, const StepWindow& w) {
    os << label << ": lower=" << (w.degenerate ? std::string("degenerate") : fmt(w.lower))
       << " upper=" << fmt(w.upper) << " feasible=" << (w.feasible ? "yes" : "no")
       << " eta_inside=" << (w.contains(eta) ? "yes" : "no") << "\n";
  };
  os << "# theory report\n";
  os << "[measured] zeta_hat=" << fmt(zeta) << "\n";
  os << "[measured] epsilon_hat=" << fmt(epsilon) << (epsilon_degenerate ? " (degenerate: P^T P singular)" : "")
     << "\n";
  os << "[config] eta=" << fmt(eta) << "\n";
  os << "[asserted] lemma1_max_ratio=" << fmt(lemma1_max_ratio) << " (must be <= 1)\n";
  os << "[measured] N_hat=" << fmt(n_hat) << "\n";
  for (const auto& [s, r] : bounded_profile) os << "  bounded_profile sigma=" << fmt(s) << " ratio=" << fmt(r) << "\n";
  os << "[measured] denoiser upsilon_hat squared=" << fmt(denoiser_lipschitz.squared)
     << " unsquared=" << fmt(denoiser_lipschitz.unsquared) << " pairs=" << denoiser_lipschitz.stats.ratios.size()
     << "\n";
  window("[derived] window(squared)", window_squared);
  window("[derived] window(unsquared)", window_unsquared);
  const auto& st = stage_lipschitz.stats;
  os << "[measured] stage map ratios: pairs=" << st.ratios.size() << " below_one=" << fmt(st.fraction_below(1.0))
     << " max=" << fmt(st.max()) << "\n";
  {
    std::size_t random = 0, random_below = 0;
    for (std::size_t i = 0; i < st.ratios.size() && i < st.refined.size(); ++i) {
      if (st.refined[i]) continue;
      ++random;
      if (st.ratios[i] < 1.0) ++random_below;
    }
    os << "  non-refined pairs: " << random << " below_one="
       << fmt(random ? static_cast<double>(random_below) / static_cast<double>(random) : 0.0) << "\n";
  }
  for (double q : {5.0, 25.0, 50.0, 75.0, 95.0, 100.0}) {
    os << "  percentile " << q << " = " << fmt(st.percentile(q)) << "\n";
  }
  os << "[measured] fixed-point residuals: monotone_images=" << monotone_images << "/" << residuals.size() << "\n";
  for (std::size_t i = 0; i < residuals.size(); ++i) {
    os << "  image " << i << ":";
    for (double r : residuals[i]) os << " " << fmt(r);
    os << "\n";
  }
  return os.str();
}

TheoryReport check_contraction(Model& model, const Dataset& data, OperatorBank& bank,
                               const ContractionOptions& options) {
  const auto& g = bank.geometry();
  const auto& cfg = model.config;
  const auto views = subsample_views(g.n_views_full, options.views);
  const auto& entry = bank.get(views);
  const Tensor mask = make_mask(g.n_views_full, g.n_bins, views);
  const auto prompt = prompt_for(model.params, cfg.lipnet, &mask);
  const Tensor* p = prompt ? &*prompt : nullptr;

  TheoryReport rep;
  const auto spec = estimate_spectrum(entry.op, options.spectrum_iters, options.seed);
  rep.zeta = spec.zeta;
  rep.epsilon = spec.epsilon;
  rep.epsilon_degenerate = spec.singular;
  rep.eta = step_size(cfg, entry);
  const double sigma0 = schedule_sigma0(model.params);

  // One unfolding stage with the schedule restarted at sigma0.
  auto stage_map = [&](const Tensor& y) {
    return [&, y](const Tensor& x) {
      return denoise(model.params, cfg.lipnet, ium_step(x, y, entry.op, rep.eta), sigma0, p);
    };
  };
  const ImageMap d_map = [&](const Tensor& x) { return denoise(model.params, cfg.lipnet, x, sigma0, p); };

  const std::size_t n_img = std::min(options.images, data.count(Split::Test));
  if (n_img == 0) throw ArgumentError("check_contraction: test split is empty");
  const std::size_t per_image = (options.pairs + n_img - 1) / n_img;
  std::vector<Tensor> d_anchors;
  for (std::size_t i = 0; i < n_img; ++i) {
    const Sample s = data.sample(Split::Test, i, options.views);
    const auto fwd = promptct_forward(model, s.sinogram, s.mask, bank);
    const auto f = stage_map(s.sinogram);
    auto est = estimate_lipschitz(f, fwd.stages, per_image, options.power_steps, mix_seed(options.seed, i));
    auto& all = rep.stage_lipschitz.stats;
    all.ratios.insert(all.ratios.end(), est.stats.ratios.begin(), est.stats.ratios.end());
    all.refined.insert(all.refined.end(), est.stats.refined.begin(), est.stats.refined.end());
    all.skipped += est.stats.skipped;
    for (std::size_t k = 0; k < fwd.stages.size(); ++k) {
      d_anchors.push_back(ium_step(fwd.stages[k], s.sinogram, entry.op, rep.eta));
    }
  }
  rep.stage_lipschitz.unsquared = rep.stage_lipschitz.stats.max();
  rep.stage_lipschitz.squared = rep.stage_lipschitz.unsquared * rep.stage_lipschitz.unsquared;
  rep.denoiser_lipschitz =
      estimate_lipschitz(d_map, d_anchors, options.pairs, options.power_steps, mix_seed(options.seed, 0xd0));

  static const std::vector<double> kGrid{0.02, 0.05, 0.1, 0.2, 0.35, 0.5};
  std::vector<Tensor> gts;
  for (std::size_t i = 0; i < n_img; ++i) gts.push_back(data.ground_truth(Split::Test, i));
  const auto bounded = check_bounded(
      [&](const Tensor& x, double s) { return denoise(model.params, cfg.lipnet, x, s, p); }, gts, 100, kGrid,
      options.seed);
  rep.n_hat = bounded.n_hat;
  rep.bounded_profile = bounded.profile;
  rep.lemma1_max_ratio = check_lemma1(model.params, cfg.lipnet, 100, kGrid, options.seed, &mask).max_ratio;

  const double u_sq = std::max(rep.denoiser_lipschitz.squared, 1e-300);
  rep.window_squared = step_window(rep.epsilon, rep.zeta, u_sq, rep.epsilon_degenerate);
  rep.window_unsquared = step_window(rep.epsilon, rep.zeta, std::sqrt(u_sq), rep.epsilon_degenerate);

  for (std::size_t i = 0; i < n_img; ++i) {
    const Tensor y = project(entry.op, gts[i]);
    const Tensor x0 = fbp(y, g, views);
    const auto fwd = promptct_forward(model, y, mask, bank, std::nullopt, &x0);
    rep.residuals.push_back(residual_series(stage_map(y), fwd.final_image(), options.extra_stages));
    if (non_increasing(rep.residuals.back())) ++rep.monotone_images;
  }
  return rep;
}

// --- stage-wise trace ------------------------------------------------------------

std::vector<TraceRow> stagewise_trace(Model& model, const Dataset& data, OperatorBank& bank,
                                      const std::vector<std::size_t>& k_list, const std::vector<std::size_t>& views,
                                      std::size_t threads, std::size_t limit) {
  if (k_list.empty()) throw ArgumentError("stagewise_trace: empty K list");
  const std::size_t k_max = *std::max_element(k_list.begin(), k_list.end());
  if (k_max == 0) throw ArgumentError("stagewise_trace: K must be >= 1");
  std::size_t n = data.count(Split::Test);
  if (limit > 0) n = std::min(n, limit);
  std::vector<TraceRow> rows;
  for (std::size_t v : views) {
    std::vector<std::vector<ImageMetrics>> per(n);
    parallel_for(n, threads, [&](std::size_t i) {
      const Sample s = data.sample(Split::Test, i, v);
      const auto fwd = promptct_forward(model, s.sinogram, s.mask, bank, k_max);
      for (std::size_t k : k_list) per[i].push_back(evaluate(fwd.stages[k], s.ground_truth));
    });
    for (std::size_t j = 0; j < k_list.size(); ++j) {
      MetricAccumulator acc;
      for (std::size_t i = 0; i < n; ++i) acc.add(per[i][j]);
      const auto m = acc.mean();
      rows.push_back({k_list[j], v, m.psnr, m.ssim, m.rmse});
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const TraceRow& a, const TraceRow& b) { return a.stages < b.stages; });
  return rows;
}

void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "stages,views,psnr,ssim,rmse\n";
  for (const auto& r : rows) {
    out << r.stages << "," << r.views << "," << fmt(r.psnr) << "," << fmt(r.ssim) << "," << fmt(r.rmse) << "\n";
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<TraceRow> read_trace_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open stage trace: " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "stages,views,psnr,ssim,rmse") {
    throw CorruptFileError(path.string() + ": unexpected stage trace header");
  }
  std::vector<TraceRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 5) throw CorruptFileError(path.string() + ": malformed line '" + line + "'");
    try {
      rows.push_back({std::stoul(f[0]), std::stoul(f[1]), parse_double(f[2]), parse_double(f[3]),
                      parse_double(f[4])});
    } catch (const std::logic_error&) {
      throw CorruptFileError(path.string() + ": malformed line '" + line + "'");
    }
  }
  return rows;
}

// --- model comparison ------------------------------------------------------------

Model* ComparisonModel::for_views(std::size_t v) const {
  if (!per_view.empty()) {
    const auto it = per_view.find(v);
    return it == per_view.end() ? nullptr : it->second;
  }
  return shared;
}

ImageMetrics ComparisonRow::mean() const {
  MetricAccumulator acc;
  for (const auto& [v, m] : by_view) acc.add(m);
  return acc.mean();
}

std::vector<ComparisonRow> ablation_compare(const std::vector<ComparisonModel>& models, const Dataset& data,
                                            OperatorBank& bank, const std::vector<std::size_t>& views,
                                            std::size_t threads, std::size_t limit) {
  const Model* reference = nullptr;
  for (const auto& cm : models) {
    for (std::size_t v : views) {
      const Model* m = cm.for_views(v);
      if (!m) throw ArgumentError("ablation_compare: model '" + cm.name + "' has no entry for " + std::to_string(v) +
                                  " views");
      if (!(m->config.geometry == data.config().geometry)) {
        throw ArgumentError("ablation_compare: architecture mismatch, '" + cm.name + "' geometry differs");
      }
      if (!reference) reference = m;
      if (m->config.lipnet.filters != reference->config.lipnet.filters ||
          m->config.lipnet.kernel != reference->config.lipnet.kernel ||
          m->config.geometry.image_size != reference->config.geometry.image_size) {
        throw ArgumentError("ablation_compare: architecture mismatch for '" + cm.name + "'");
      }
    }
  }
  std::vector<ComparisonRow> rows;
  ComparisonRow fbp_row;
  fbp_row.name = "FBP";
  for (std::size_t v : views) {
    fbp_row.by_view[v] = mean_metrics(evaluate_split(nullptr, data, Split::Test, v, bank, threads, std::nullopt,
                                                     true, limit));
  }
  rows.push_back(fbp_row);
  for (const auto& cm : models) {
    ComparisonRow row;
    row.name = cm.name;
    for (std::size_t v : views) {
      Model* m = cm.for_views(v);
      row.parameters = parameter_count(m->params);
      row.by_view[v] = mean_metrics(evaluate_split(m, data, Split::Test, v, bank, threads, std::nullopt, false, limit));
    }
    rows.push_back(row);
  }
  return rows;
}

void write_comparison_csv(const std::filesystem::path& path, const std::vector<ComparisonRow>& rows,
                          const std::vector<std::size_t>& views) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "model,params";
  for (auto v : views) out << ",psnr" << v << ",ssim" << v << ",rmse" << v;
  out << ",psnr_mean,ssim_mean,rmse_mean\n";
  for (const auto& r : rows) {
    out << r.name << "," << r.parameters;
    for (auto v : views) {
      const auto it = r.by_view.find(v);
      const ImageMetrics m = it == r.by_view.end() ? ImageMetrics{} : it->second;
      out << "," << fmt(m.psnr) << "," << fmt(m.ssim) << "," << fmt(m.rmse);
    }
    const auto m = r.mean();
    out << "," << fmt(m.psnr) << "," << fmt(m.ssim) << "," << fmt(m.rmse) << "\n";
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<ComparisonRow> read_comparison_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open comparison table: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw CorruptFileError(path.string() + ": empty comparison table");
  const auto header = split_csv(line);
  if (header.size() < 5 || header[0] != "model" || header[1] != "params" || (header.size() - 5) % 3 != 0) {
    throw CorruptFileError(path.string() + ": unexpected comparison header");
  }
  std::vector<std::size_t> views;
  for (std::size_t c = 2; c + 3 < header.size(); c += 3) {
    if (header[c].rfind("psnr", 0) != 0) throw CorruptFileError(path.string() + ": bad column " + header[c]);
    views.push_back(std::stoul(header[c].substr(4)));
  }
  std::vector<ComparisonRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != header.size()) throw CorruptFileError(path.string() + ": malformed line '" + line + "'");
    ComparisonRow r;
    try {
      r.name = f[0];
      r.parameters = std::stoul(f[1]);
      for (std::size_t i = 0; i < views.size(); ++i) {
        r.by_view[views[i]] = {parse_double(f[2 + 3 * i]), parse_double(f[3 + 3 * i]), parse_double(f[4 + 3 * i])};
      }
    } catch (const std::logic_error&) {
      throw CorruptFileError(path.string() + ": malformed line '" + line + "'");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace promptct
