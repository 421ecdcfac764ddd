#include "promptct/reconstructor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "promptct/errors.hpp"

namespace promptct {

void UnfoldingConfig::validate() const {
  if (stages == 0) throw ArgumentError("unfolding: K must be >= 1");
  lipnet.validate();
  geometry.validate();
  if (lipnet.image_size != geometry.image_size) throw ArgumentError("unfolding: lipnet and geometry image sizes differ");
}

UnfoldingConfig UnfoldingConfig::from_config(const Config& cfg) {
  UnfoldingConfig u;
  const auto k = cfg.get_int("unfold.stages", static_cast<long long>(u.stages));
  if (k < 1) throw ArgumentError("unfold.stages must be >= 1");
  u.stages = static_cast<std::size_t>(k);
  u.eta = cfg.get_double("unfold.eta", u.eta);
  const auto mode = cfg.get_string("unfold.sigma_mode", "fresh");
  if (mode == "fresh") {
    u.sigma_mode = SigmaMode::Fresh;
  } else if (mode == "continue") {
    u.sigma_mode = SigmaMode::Continue;
  } else {
    throw ArgumentError("unfold.sigma_mode must be 'fresh' or 'continue', got '" + mode + "'");
  }
  u.geometry = GeometrySpec::from_config(cfg);
  u.lipnet = LipNetConfig::from_config(cfg);
  u.validate();
  return u;
}

void UnfoldingConfig::to_config(Config& cfg) const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", eta);
  cfg.set("unfold.stages", std::to_string(stages));
  cfg.set("unfold.eta", buf);
  cfg.set("unfold.sigma_mode", sigma_mode == SigmaMode::Fresh ? "fresh" : "continue");
  geometry.to_config(cfg);
  lipnet.to_config(cfg);
}

OperatorBank::OperatorBank(GeometrySpec geometry, std::filesystem::path cache_dir)
    : geometry_(geometry), cache_dir_(std::move(cache_dir)) {
  geometry_.validate();
}

const OperatorBank::Entry& OperatorBank::get(const std::vector<std::size_t>& views) {
  std::lock_guard lock(mutex_);
  auto it = entries_.find(views);
  if (it != entries_.end()) return *it->second;
  auto entry = std::make_unique<Entry>();
  entry->views = views;
  entry->op = cached_operator(cache_dir_, geometry_, views);
  entry->zeta = estimate_zeta(entry->op, 500, 0x5eedULL);
  return *entries_.emplace(views, std::move(entry)).first->second;
}

const OperatorBank::Entry& OperatorBank::for_mask(const Tensor& mask) {
  if (mask.dims() != Dims{geometry_.n_views_full, geometry_.n_bins}) {
    throw ShapeError("mask " + dims_to_string(mask.dims()) + " does not match geometry " +
                     std::to_string(geometry_.n_views_full) + "x" + std::to_string(geometry_.n_bins));
  }
  return get(views_from_mask(mask));
}

Tensor ium_step(const Tensor& x, const Tensor& y, const SparseOperator& op, double eta) {
  Tensor r = y;
  r -= op.apply(x);
  Tensor out = x;
  out += op.apply_adjoint(r) * eta;
  return out;
}

Model make_model(const UnfoldingConfig& config, std::uint64_t seed) {
  config.validate();
  return {config, init_lipnet_params(config.lipnet, seed)};
}

double step_size(const UnfoldingConfig& config, const OperatorBank::Entry& entry) {
  return config.eta > 0.0 ? config.eta : 1.0 / entry.zeta;
}

namespace net {

std::vector<ad::Var> promptct_forward(const BoundParams& bp, const UnfoldingConfig& config, const ad::Var& x0,
                                      const ad::Var& y, const SparseOperator& op, double eta,
                                      const ad::Var* mask, std::size_t stages) {
  if (stages == 0) throw ArgumentError("promptct_forward: K must be >= 1");
  const auto& d = x0.dims();
  if (d.size() != 3 || d[0] != 1) throw ShapeError("promptct_forward: x0 must be 1 x H x W");
  if (y.dims() != op.out_dims()) {
    throw ShapeError("promptct_forward: sinogram " + dims_to_string(y.dims()) + " does not match operator " +
                     dims_to_string(op.out_dims()));
  }
  const Dims flat{d[1], d[2]};
  std::optional<ad::Var> p;
  if (config.lipnet.prompt) {
    if (!mask) throw ArgumentError("promptct_forward: prompt model needs a sampling mask");
    p = prompt_encode(bp, config.lipnet, *mask);
  }
  std::vector<ad::Var> xs{x0};
  ad::Var sigma = bp["schedule.sigma0"];
  for (std::size_t k = 0; k < stages; ++k) {
    try {
      const ad::Var& x = xs.back();
      const ad::Var img = ad::reshape(x, flat);
      const ad::Var resid = ad::sub(y, ad::linear(img, op));
      const ad::Var half = x + ad::scale(ad::reshape(ad::linear_adjoint(resid, op), d), eta);
      const ad::Var start = config.sigma_mode == SigmaMode::Fresh ? bp["schedule.sigma0"] : sigma;
      auto res = lipnet_apply(bp, config.lipnet, half, p ? &*p : nullptr, config.lipnet.stages, start);
      sigma = res.sigma_last;
      xs.push_back(res.z);
    } catch (const NumericError& e) {
      throw NumericError("numeric instability in unfolding stage " + std::to_string(k + 1) + ": " + e.what());
    }
  }
  return xs;
}

}  // namespace net

ForwardResult promptct_forward(Model& model, const Tensor& y, const Tensor& mask, OperatorBank& bank,
                               std::optional<std::size_t> stages, const Tensor* x0) {
  const auto& entry = bank.for_mask(mask);
  const auto& g = bank.geometry();
  Tensor init = x0 ? *x0 : fbp(y, g, entry.views);
  if (init.dims() != Dims{g.image_size, g.image_size}) throw ShapeError("promptct_forward: x0 has the wrong size");
  ad::Tape tape(false);
  BoundParams bp(tape, model.params);
  const ad::Var mv = tape.constant(mask.reshaped({1, mask.dim(0), mask.dim(1)}));
  const auto xs = net::promptct_forward(bp, model.config, tape.constant(init.reshaped({1, g.image_size, g.image_size})),
                                        tape.constant(y), entry.op, step_size(model.config, entry), &mv,
                                        stages.value_or(model.config.stages));
  ForwardResult out;
  for (const auto& x : xs) out.stages.push_back(x.value().reshaped({g.image_size, g.image_size}));
  return out;
}

std::size_t parameter_count(const ModelParams& params) { return params.scalar_count(true); }

std::size_t parameter_count(const UnfoldingConfig& config) {
  return parameter_count(init_lipnet_params(config.lipnet, 0));
}

void save_pgm16(const std::filesystem::path& path, const Tensor& image) {
  if (image.ndim() != 2) throw ShapeError("save_pgm16: expected an H x W image");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "P5\n" << image.dim(1) << ' ' << image.dim(0) << "\n65535\n";
  for (double v : image.data()) {
    const auto q = static_cast<unsigned>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
    const char be[2] = {static_cast<char>((q >> 8) & 0xff), static_cast<char>(q & 0xff)};
    out.write(be, 2);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

void write_reconstruction(const std::filesystem::path& dir, const ForwardResult& result, bool all_stages) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  save_tensor(dir / "final.lipt", result.final_image());
  save_pgm16(dir / "final.pgm", result.final_image());
  if (all_stages) {
    for (std::size_t k = 0; k < result.stages.size(); ++k) {
      save_tensor(dir / ("stage_" + std::to_string(k) + ".lipt"), result.stages[k]);
    }
  }
}

}  // namespace promptct
