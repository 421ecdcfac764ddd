#include "promptct/lipnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "promptct/errors.hpp"
#include "promptct/kernels.hpp"

namespace promptct {

void LipNetConfig::validate() const {
  if (filters == 0 || hidden == 0 || prompt_channels == 0) throw ArgumentError("lipnet: widths must be positive");
  if (kernel == 0 || kernel % 2 == 0) throw ArgumentError("lipnet: kernel size must be odd");
  if (stages == 0) throw ArgumentError("lipnet: need at least one inner stage");
  if (!(c_min > 0.0) || !(c_max > c_min)) throw ArgumentError("lipnet: need 0 < c_min < c_max");
  if (!(sigma0 > 0.0)) throw ArgumentError("lipnet: sigma0 must be positive");
  if (!(tau > 0.01 && tau < 0.99)) throw ArgumentError("lipnet: tau must lie in (0.01, 0.99)");
  if (deep == DeepExtractor::AttentionSpectral && (window == 0 || image_size % window != 0)) {
    throw ArgumentError("lipnet: attention window must divide the image size");
  }
}

LipNetConfig LipNetConfig::from_config(const Config& cfg) {
  LipNetConfig c;
  auto sz = [&](const char* key, std::size_t fallback) {
    const auto v = cfg.get_int(key, static_cast<long long>(fallback));
    if (v < 0) throw ArgumentError(std::string("config key '") + key + "' must be non-negative");
    return static_cast<std::size_t>(v);
  };
  c.filters = sz("lipnet.filters", c.filters);
  c.kernel = sz("lipnet.kernel", c.kernel);
  c.stages = sz("lipnet.stages", c.stages);
  c.hidden = sz("lipnet.hidden", c.hidden);
  c.prompt_channels = sz("lipnet.prompt_channels", c.prompt_channels);
  c.alpha = cfg.get_double("lipnet.alpha", c.alpha);
  c.beta = cfg.get_double("lipnet.beta", c.beta);
  c.c_min = cfg.get_double("lipnet.c_min", c.c_min);
  c.c_max = cfg.get_double("lipnet.c_max", c.c_max);
  c.sigma0 = cfg.get_double("lipnet.sigma0", c.sigma0);
  c.tau = cfg.get_double("lipnet.tau", c.tau);
  c.train_sigma0 = cfg.get_bool("lipnet.train_sigma0", c.train_sigma0);
  c.prompt = cfg.get_bool("lipnet.prompt", c.prompt);
  const auto deep = cfg.get_string("lipnet.deep", "conv");
  if (deep == "conv") {
    c.deep = DeepExtractor::Conv;
  } else if (deep == "attention") {
    c.deep = DeepExtractor::AttentionSpectral;
  } else {
    throw ArgumentError("lipnet.deep must be 'conv' or 'attention', got '" + deep + "'");
  }
  c.window = sz("lipnet.window", c.window);
  c.image_size = sz("image_size", c.image_size);
  c.validate();
  return c;
}

void LipNetConfig::to_config(Config& cfg) const {
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  cfg.set("lipnet.filters", std::to_string(filters));
  cfg.set("lipnet.kernel", std::to_string(kernel));
  cfg.set("lipnet.stages", std::to_string(stages));
  cfg.set("lipnet.hidden", std::to_string(hidden));
  cfg.set("lipnet.prompt_channels", std::to_string(prompt_channels));
  cfg.set("lipnet.alpha", num(alpha));
  cfg.set("lipnet.beta", num(beta));
  cfg.set("lipnet.c_min", num(c_min));
  cfg.set("lipnet.c_max", num(c_max));
  cfg.set("lipnet.sigma0", num(sigma0));
  cfg.set("lipnet.tau", num(tau));
  cfg.set("lipnet.train_sigma0", train_sigma0 ? "true" : "false");
  cfg.set("lipnet.prompt", prompt ? "true" : "false");
  cfg.set("lipnet.deep", deep == DeepExtractor::Conv ? "conv" : "attention");
  cfg.set("lipnet.window", std::to_string(window));
  cfg.set("image_size", std::to_string(image_size));
}

double tau_from_logit(double rho) { return 0.01 + 0.98 / (1.0 + std::exp(-rho)); }

double logit_from_tau(double tau) {
  const double s = (tau - 0.01) / 0.98;
  return std::log(s / (1.0 - s));
}

Tensor dct_frame(std::size_t count, std::size_t k) {
  if (count > k * k) throw ArgumentError("dct_frame: at most k*k filters");
  // 1D orthonormal DCT-II rows.
  std::vector<std::vector<double>> basis(k, std::vector<double>(k));
  for (std::size_t u = 0; u < k; ++u) {
    const double scale = std::sqrt((u == 0 ? 1.0 : 2.0) / static_cast<double>(k));
    for (std::size_t x = 0; x < k; ++x) {
      basis[u][x] = scale * std::cos(std::numbers::pi * (2.0 * x + 1.0) * u / (2.0 * k));
    }
  }
  // Order by total frequency so low-order filters come first.
  std::vector<std::pair<std::size_t, std::size_t>> order;
  for (std::size_t u = 0; u < k; ++u) {
    for (std::size_t v = 0; v < k; ++v) order.emplace_back(u, v);
  }
  std::stable_sort(order.begin(), order.end(),
                   [](const auto& a, const auto& b) { return a.first + a.second < b.first + b.second; });
  Tensor out({count, 1, k, k});
  for (std::size_t f = 0; f < count; ++f) {
    const auto [u, v] = order[f];
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b) {
        out[(f * k + a) * k + b] = basis[u][a] * basis[v][b] / static_cast<double>(k);
      }
    }
  }
  return out;
}

std::size_t prompt_encoder_size(const LipNetConfig& cfg) {
  if (!cfg.prompt) return 0;
  const std::size_t m = cfg.prompt_channels;
  return (m * 9 + m) + 2 * (m * m * 9 + m) + (cfg.filters * m + cfg.filters);
}

namespace {

Tensor normal_tensor(Dims dims, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t(std::move(dims));
  for (auto& v : t.storage()) v = std * normal(rng);
  return t;
}

void add_conv(ModelParams& params, const std::string& name, std::size_t out, std::size_t in, std::size_t k,
              double gain, std::mt19937_64& rng, double bias = 0.0) {
  const double std = gain * std::sqrt(2.0 / static_cast<double>(in * k * k));
  params.add(name, normal_tensor({out, in, k, k}, std, rng));
  params.add(name + ".bias", Tensor({out}, bias));
}

}  // namespace

ModelParams init_lipnet_params(const LipNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ModelParams params;
  const std::size_t F = cfg.filters, k = cfg.kernel, h = cfg.hidden;

  const std::size_t n_dct = std::min(F, k * k);
  Tensor frame({F, 1, k, k});
  const Tensor dct = dct_frame(n_dct, k);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < frame.size(); ++i) {
    const double base = i < dct.size() ? dct[i] : 0.0;
    frame[i] = base + 0.01 * normal(rng);
  }
  params.add("frame.filters", std::move(frame));

  add_conv(params, "cgnet.shallow.0", h, F, k, 1.0, rng);
  add_conv(params, "cgnet.shallow.1", F, h, k, 0.5, rng);
  if (cfg.deep == DeepExtractor::Conv) {
    add_conv(params, "cgnet.deep.0", h, F, k, 1.0, rng);
    add_conv(params, "cgnet.deep.1", F, h, k, 0.5, rng);
  } else {
    const double s = 1.0 / std::sqrt(static_cast<double>(F));
    params.add("cgnet.stb.wq", normal_tensor({F, F}, s, rng));
    params.add("cgnet.stb.wk", normal_tensor({F, F}, s, rng));
    params.add("cgnet.stb.wv", normal_tensor({F, F}, s, rng));
    params.add("cgnet.stb.wo", normal_tensor({F, F}, 0.1 * s, rng));
    const std::size_t n = cfg.image_size;
    params.add("cgnet.sfb.w_re", normal_tensor({n, n}, 0.01, rng));
    params.add("cgnet.sfb.w_im", normal_tensor({n, n}, 0.01, rng));
    add_conv(params, "cgnet.sfb.conv", F, F, k, 0.5, rng);
  }
  // Small head weights with a unit bias so c starts near 1, inside the clamp.
  params.add("cgnet.head", normal_tensor({F, F, k, k}, 0.01 / std::sqrt(static_cast<double>(F * k * k)), rng));
  params.add("cgnet.head.bias", Tensor({F}, 1.0));

  if (cfg.prompt) {
    const std::size_t m = cfg.prompt_channels;
    add_conv(params, "prompt.conv.0", m, 1, 3, 1.0, rng);
    add_conv(params, "prompt.conv.1", m, m, 3, 1.0, rng);
    add_conv(params, "prompt.conv.2", m, m, 3, 1.0, rng);
    params.add("prompt.fc", normal_tensor({F, m}, 0.1 / std::sqrt(static_cast<double>(m)), rng));
    params.add("prompt.fc.bias", Tensor({F}, 1.0));
  }

  params.add("schedule.sigma0", Tensor::scalar(cfg.sigma0), cfg.train_sigma0);
  params.add("schedule.tau", Tensor::scalar(logit_from_tau(cfg.tau)));
  return params;
}

BoundParams::BoundParams(ad::Tape& tape, ModelParams& params) : tape_(&tape) {
  for (auto& p : params.items()) vars_.emplace(p.name, tape.param(p));
}

const ad::Var& BoundParams::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ParameterMismatchError("model has no parameter '" + name + "'");
  return it->second;
}

namespace net {
namespace {

ad::Var conv(const BoundParams& bp, const std::string& name, const ad::Var& x, std::size_t stride = 1) {
  return ad::add_bias(ad::conv2d(x, bp[name], stride), bp[name + ".bias"]);
}

ad::Var require_image(const ad::Var& v, const char* what) {
  if (v.dims().size() != 3 || v.dims()[0] != 1) {
    throw ShapeError(std::string(what) + ": expected a 1 x H x W image, got " + dims_to_string(v.dims()));
  }
  return v;
}

}  // namespace

ad::Var prompt_encode(const BoundParams& bp, const LipNetConfig& cfg, const ad::Var& mask) {
  if (!cfg.prompt) throw ArgumentError("prompt_encode: model has no prompt encoder");
  if (mask.dims().size() != 3 || mask.dims()[0] != 1) {
    throw ShapeError("prompt_encode: mask must be 1 x Np x Nb, got " + dims_to_string(mask.dims()));
  }
  ad::Var h = mask;
  for (int i = 0; i < 3; ++i) h = ad::relu(conv(bp, "prompt.conv." + std::to_string(i), h, 2));
  return ad::fully_connected(ad::global_avg_pool(h), bp["prompt.fc"], bp["prompt.fc.bias"]);
}

ad::Var cgnet_mix(const BoundParams& bp, const LipNetConfig& cfg, const ad::Var& coeffs, const ad::Var* p) {
  if (coeffs.dims().size() != 3 || coeffs.dims()[0] != cfg.filters) {
    throw ShapeError("cgnet: coefficients must be F x H x W with F = " + std::to_string(cfg.filters) + ", got " +
                     dims_to_string(coeffs.dims()));
  }
  ad::Var s = conv(bp, "cgnet.shallow.1", ad::relu(conv(bp, "cgnet.shallow.0", coeffs)));
  if (p) s = ad::channel_scale(s, *p);
  return s + coeffs;
}

ad::Var cgnet_constants(const BoundParams& bp, const LipNetConfig& cfg, const ad::Var& coeffs, const ad::Var* p) {
  const ad::Var q = cgnet_mix(bp, cfg, coeffs, p);
  ad::Var d;
  if (cfg.deep == DeepExtractor::Conv) {
    d = ad::relu(conv(bp, "cgnet.deep.1", ad::relu(conv(bp, "cgnet.deep.0", q))));
  } else {
    const ad::Var a = ad::window_attention(q, bp["cgnet.stb.wq"], bp["cgnet.stb.wk"], bp["cgnet.stb.wv"],
                                           bp["cgnet.stb.wo"], cfg.window);
    d = a + ad::spectral_scale(a, bp["cgnet.sfb.w_re"], bp["cgnet.sfb.w_im"]) +
        ad::relu(conv(bp, "cgnet.sfb.conv", a));
  }
  return ad::clamp(conv(bp, "cgnet.head", d + q), cfg.c_min, cfg.c_max);
}

ad::Var thresholds(const ad::Var& c, const ad::Var& sigma) {
  if (sigma.value().size() != 1) throw ShapeError("thresholds: sigma must be a scalar");
  if (sigma.value()[0] < 0.0) throw ArgumentError("thresholds: negative noise level");
  return ad::mul_scalar(c, sigma);
}

ad::Var decay(const BoundParams& bp) { return ad::affine(ad::sigmoid(bp["schedule.tau"]), 0.98, 0.01); }

ad::Var lipnet_stage(const BoundParams& bp, const LipNetConfig& cfg, const ad::Var& z_prev, const ad::Var& z0,
                     const ad::Var& sigma, const ad::Var* p) {
  require_image(z_prev, "lipnet_stage");
  if (z_prev.dims() != z0.dims()) throw ShapeError("lipnet_stage: z_prev and z0 differ in shape");
  const ad::Var& w = bp["frame.filters"];
  const ad::Var u = ad::conv2d(z_prev, w);
  const ad::Var e = thresholds(cgnet_constants(bp, cfg, u, p), sigma);
  const ad::Var back = ad::conv2d_adjoint(ad::soft_threshold(u, e), w);
  return ad::scale(z0, cfg.alpha) + ad::scale(back, cfg.alpha * cfg.beta);
}

ApplyResult lipnet_apply(const BoundParams& bp, const LipNetConfig& cfg, const ad::Var& z0, const ad::Var* p,
                         std::size_t stages, const ad::Var& sigma_start) {
  if (stages == 0) throw ArgumentError("lipnet_apply: need at least one stage");
  require_image(z0, "lipnet_apply");
  const ad::Var tau = decay(bp);
  ad::Var sigma = sigma_start;
  ad::Var z = z0;
  for (std::size_t t = 0; t < stages; ++t) {
    sigma = ad::mul(sigma, tau);
    z = lipnet_stage(bp, cfg, z, z0, sigma, p);
  }
  return {z, sigma};
}

}  // namespace net

namespace {

Tensor as_image3(const Tensor& img) {
  if (img.ndim() != 2) throw ShapeError("expected an H x W image, got " + dims_to_string(img.dims()));
  return img.reshaped({1, img.dim(0), img.dim(1)});
}

Tensor as_image2(const Tensor& img) { return img.reshaped({img.dim(1), img.dim(2)}); }

}  // namespace

Tensor prompt_encode(ModelParams& params, const LipNetConfig& cfg, const Tensor& mask) {
  if (mask.ndim() != 2) throw ShapeError("prompt_encode: mask must be Np x Nb");
  ad::Tape tape(false);
  BoundParams bp(tape, params);
  return net::prompt_encode(bp, cfg, tape.constant(mask.reshaped({1, mask.dim(0), mask.dim(1)}))).value();
}

Tensor cgnet_constants(ModelParams& params, const LipNetConfig& cfg, const Tensor& coeffs, const Tensor* p) {
  ad::Tape tape(false);
  BoundParams bp(tape, params);
  std::optional<ad::Var> pv;
  if (p) pv = tape.constant(*p);
  return net::cgnet_constants(bp, cfg, tape.constant(coeffs), pv ? &*pv : nullptr).value();
}

Tensor thresholds(const Tensor& c, double sigma) {
  if (sigma < 0.0) throw ArgumentError("thresholds: negative noise level");
  return c * sigma;
}

Tensor lipnet_stage(ModelParams& params, const LipNetConfig& cfg, const Tensor& z_prev, const Tensor& z0,
                    double sigma, const Tensor* p) {
  ad::Tape tape(false);
  BoundParams bp(tape, params);
  std::optional<ad::Var> pv;
  if (p) pv = tape.constant(*p);
  const auto out = net::lipnet_stage(bp, cfg, tape.constant(as_image3(z_prev)), tape.constant(as_image3(z0)),
                                     tape.constant(Tensor::scalar(sigma)), pv ? &*pv : nullptr);
  return as_image2(out.value());
}

Tensor lipnet_apply(ModelParams& params, const LipNetConfig& cfg, const Tensor& z0, const Tensor* mask,
                    std::optional<std::size_t> stages) {
  ad::Tape tape(false);
  BoundParams bp(tape, params);
  std::optional<ad::Var> pv;
  if (cfg.prompt) {
    if (!mask) throw ArgumentError("lipnet_apply: prompt model needs a sampling mask");
    pv = net::prompt_encode(bp, cfg, tape.constant(mask->reshaped({1, mask->dim(0), mask->dim(1)})));
  }
  const auto res = net::lipnet_apply(bp, cfg, tape.constant(as_image3(z0)), pv ? &*pv : nullptr,
                                     stages.value_or(cfg.stages), bp["schedule.sigma0"]);
  return as_image2(res.z.value());
}

double schedule_sigma0(const ModelParams& params) { return params.get("schedule.sigma0").value[0]; }
double schedule_tau(const ModelParams& params) { return tau_from_logit(params.get("schedule.tau").value[0]); }

double frame_spectral_norm(const Tensor& filters, std::size_t h, std::size_t w, std::size_t iters,
                           std::uint64_t seed) {
  if (iters < 50) throw ArgumentError("frame_spectral_norm: iters must be >= 50");
  if (filters.ndim() != 4 || filters.dim(1) != 1) throw ShapeError("frame_spectral_norm: filters must be F x 1 x k x k");
  if (max_abs(filters) == 0.0) throw ArgumentError("frame_spectral_norm: all filters are zero");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor x({1, h, w});
  for (auto& v : x.storage()) v = normal(rng);
  x *= 1.0 / norm2(x);
  double lambda = 0.0;
  for (std::size_t it = 0; it < iters; ++it) {
    Tensor y = kernels::conv2d_adjoint(kernels::conv2d(x, filters), filters);
    const double next = dot(x, y);
    const double n = norm2(y);
    if (n == 0.0) break;
    x = y * (1.0 / n);
    const bool converged = it > 0 && std::abs(next - lambda) <= 1e-14 * std::abs(next);
    lambda = next;
    if (converged) break;
  }
  return std::sqrt(std::max(lambda, 0.0));
}

}  // namespace promptct
