#include "promptct/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "promptct/errors.hpp"
#include "promptct/parallel.hpp"

namespace promptct {

bool ellipse_contains(const Ellipse& e, double x, double y) {
  const double th = e.angle_deg * std::numbers::pi / 180.0;
  const double dx = x - e.cx, dy = y - e.cy;
  const double u = dx * std::cos(th) + dy * std::sin(th);
  const double v = -dx * std::sin(th) + dy * std::cos(th);
  return (u * u) / (e.a * e.a) + (v * v) / (e.b * e.b) <= 1.0;
}

double ellipse_sum(const std::vector<Ellipse>& ellipses, double x, double y) {
  double s = 0.0;
  for (const auto& e : ellipses) {
    if (ellipse_contains(e, x, y)) s += e.value;
  }
  return s;
}

std::pair<double, double> pixel_center(std::size_t n, std::size_t i, std::size_t j) {
  const double h = 2.0 / static_cast<double>(n);
  return {-1.0 + (static_cast<double>(j) + 0.5) * h, 1.0 - (static_cast<double>(i) + 0.5) * h};
}

Tensor rasterize(const std::vector<Ellipse>& ellipses, std::size_t n) {
  Tensor img({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto [x, y] = pixel_center(n, i, j);
      img.at(i, j) = std::clamp(ellipse_sum(ellipses, x, y), 0.0, 1.0);
    }
  }
  return img;
}

namespace {

void require_size(std::size_t n, const char* what) {
  if (n < 32) throw ArgumentError(std::string(what) + ": image size must be >= 32, got " + std::to_string(n));
}

}  // namespace

Phantom shepp_logan(std::size_t n) {
  require_size(n, "shepp_logan");
  Phantom p;
  p.kind = PhantomKind::SheppLogan;
  p.ellipses = {
      {0.0, 0.0, 0.69, 0.92, 0.0, 1.0},
      {0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8},
      {0.22, 0.0, 0.11, 0.31, -18.0, -0.2},
      {-0.22, 0.0, 0.16, 0.41, 18.0, -0.2},
      {0.0, 0.35, 0.21, 0.25, 0.0, 0.1},
      {0.0, 0.1, 0.046, 0.046, 0.0, 0.1},
      {0.0, -0.1, 0.046, 0.046, 0.0, 0.1},
      {-0.08, -0.605, 0.046, 0.023, 0.0, 0.1},
      {0.0, -0.606, 0.023, 0.023, 0.0, 0.1},
      {0.06, -0.605, 0.023, 0.046, 0.0, 0.1},
  };
  p.image = rasterize(p.ellipses, n);
  return p;
}

Phantom random_ellipse_phantom(std::size_t n, std::uint64_t seed) {
  require_size(n, "random_ellipse_phantom");
  std::mt19937_64 rng(seed);
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };

  Phantom p;
  p.kind = PhantomKind::RandomEllipses;
  p.seed = seed;

  // Body: everything else is placed inside it.
  Ellipse body;
  body.a = uni(0.55, 0.8);
  body.b = uni(0.65, 0.88);
  body.cx = uni(-0.05, 0.05);
  body.cy = uni(-0.05, 0.05);
  body.angle_deg = uni(-20.0, 20.0);
  body.value = uni(0.5, 0.8);
  p.ellipses.push_back(body);

  const int inner = std::uniform_int_distribution<int>(3, 7)(rng);
  for (int k = 0; k < inner; ++k) {
    Ellipse e;
    e.a = uni(0.04, 0.25);
    e.b = uni(0.04, 0.25);
    e.angle_deg = uni(0.0, 180.0);
    // Centre inside the shrunken body so the structure stays in the body.
    const double r = std::sqrt(uni(0.0, 1.0));
    const double phi = uni(0.0, 2.0 * std::numbers::pi);
    const double margin = std::max(e.a, e.b);
    const double sa = std::max(0.0, body.a - margin), sb = std::max(0.0, body.b - margin);
    const double lx = r * sa * std::cos(phi), ly = r * sb * std::sin(phi);
    const double bt = body.angle_deg * std::numbers::pi / 180.0;
    e.cx = body.cx + lx * std::cos(bt) - ly * std::sin(bt);
    e.cy = body.cy + lx * std::sin(bt) + ly * std::cos(bt);
    e.value = uni(0.0, 1.0) < 0.5 ? uni(-0.4, -0.1) : uni(0.1, 0.4);
    p.ellipses.push_back(e);
  }
  p.image = rasterize(p.ellipses, n);
  return p;
}

Phantom disk_phantom(std::size_t n, double radius_px, double value) {
  if (n == 0) throw ArgumentError("disk_phantom: empty image");
  const double r = 2.0 * radius_px / static_cast<double>(n);
  Phantom p;
  p.kind = PhantomKind::Disk;
  p.ellipses = {{0.0, 0.0, r, r, 0.0, value}};
  p.image = rasterize(p.ellipses, n);
  return p;
}

Tensor add_noise(const Tensor& y, double photons, double electronic_sigma, std::uint64_t seed) {
  if (!(photons > 0.0)) throw ArgumentError("add_noise: photon count must be positive");
  if (!(electronic_sigma >= 0.0)) throw ArgumentError("add_noise: electronic sigma must be non-negative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor out(y.dims());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = y[i];
    if (!(v >= 0.0)) throw ArgumentError("add_noise: line integrals must be finite and non-negative");
    const double mean = photons * std::exp(-v);
    double c = static_cast<double>(std::poisson_distribution<long long>(mean)(rng));
    c += electronic_sigma * photons * normal(rng);
    c = std::max(c, 1.0);
    out[i] = -std::log(c / photons);
  }
  return out;
}

Tensor make_mask(std::size_t n_views_full, std::size_t n_bins, const std::vector<std::size_t>& views) {
  Tensor m({n_views_full, n_bins});
  for (auto v : views) {
    if (v >= n_views_full) {
      throw ArgumentError("make_mask: view " + std::to_string(v) + " out of range [0, " +
                          std::to_string(n_views_full) + ")");
    }
    for (std::size_t b = 0; b < n_bins; ++b) m.at(v, b) = 1.0;
  }
  return m;
}

Tensor NoiseModel::apply(const Tensor& sinogram, std::uint64_t seed) const {
  if (!enabled) return sinogram;
  if (!(attenuation_scale > 0.0)) throw ArgumentError("noise: attenuation_scale must be positive");
  Tensor phys = sinogram * attenuation_scale;
  for (auto& v : phys.storage()) v = std::max(v, 0.0);
  Tensor noisy = add_noise(phys, photons, electronic_sigma, seed);
  noisy *= 1.0 / attenuation_scale;
  return noisy;
}

DatasetConfig DatasetConfig::from_config(const Config& cfg) {
  DatasetConfig d;
  d.path = cfg.get_string("data_dir", "");
  d.n_train = static_cast<std::size_t>(cfg.get_int("n_train", static_cast<long long>(d.n_train)));
  d.n_val = static_cast<std::size_t>(cfg.get_int("n_val", static_cast<long long>(d.n_val)));
  d.n_test = static_cast<std::size_t>(cfg.get_int("n_test", static_cast<long long>(d.n_test)));
  d.view_counts = cfg.get_list("views", d.view_counts);
  d.seed = static_cast<std::uint64_t>(cfg.get_int("seed", static_cast<long long>(d.seed)));
  d.geometry = GeometrySpec::from_config(cfg);
  d.noise.photons = cfg.get_double("noise.photons", d.noise.photons);
  d.noise.electronic_sigma = cfg.get_double("noise.electronic_sigma", d.noise.electronic_sigma);
  d.noise.attenuation_scale = cfg.get_double("noise.attenuation_scale", d.noise.attenuation_scale);
  d.noise.enabled = cfg.get_bool("noise.enabled", d.noise.enabled);
  if (d.view_counts.empty()) throw ArgumentError("dataset: empty view list");
  return d;
}

Config DatasetConfig::to_config() const {
  Config cfg;
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  cfg.set("n_train", std::to_string(n_train));
  cfg.set("n_val", std::to_string(n_val));
  cfg.set("n_test", std::to_string(n_test));
  cfg.set("views", join_list(view_counts));
  cfg.set("seed", std::to_string(seed));
  cfg.set("noise.photons", num(noise.photons));
  cfg.set("noise.electronic_sigma", num(noise.electronic_sigma));
  cfg.set("noise.electronic_sigma_reference", "photons");
  cfg.set("noise.attenuation_scale", num(noise.attenuation_scale));
  cfg.set("noise.enabled", noise.enabled ? "true" : "false");
  geometry.to_config(cfg);
  return cfg;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

std::size_t split_index(Split s) { return static_cast<std::size_t>(s); }

namespace {

std::uint64_t phantom_seed(const DatasetConfig& cfg, Split split, std::size_t index) {
  return mix_seed(mix_seed(cfg.seed, split_index(split) + 1), index);
}

std::string record_stem(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", index);
  return buf;
}

std::size_t split_count(const DatasetConfig& cfg, Split s) {
  switch (s) {
    case Split::Train: return cfg.n_train;
    case Split::Val: return cfg.n_val;
    case Split::Test: return cfg.n_test;
  }
  return 0;
}

}  // namespace

DatasetRecord make_record(const DatasetConfig& cfg, const SparseOperator& full_op, Split split, std::size_t index) {
  const std::size_t n = cfg.geometry.image_size;
  const std::size_t np = cfg.geometry.n_views_full, nb = cfg.geometry.n_bins;
  DatasetRecord rec;
  rec.phantom_seed = phantom_seed(cfg, split, index);
  rec.noise_seed = mix_seed(rec.phantom_seed, 0x6e6f697365ULL);
  rec.ground_truth = round_to_f32(random_ellipse_phantom(n, rec.phantom_seed).image);
  rec.sinogram_full = round_to_f32(cfg.noise.apply(project(full_op, rec.ground_truth), rec.noise_seed));
  rec.view_counts = cfg.view_counts;
  for (auto count : cfg.view_counts) {
    const auto views = subsample_views(np, count);
    Tensor sparse({count, nb});
    for (std::size_t v = 0; v < count; ++v) {
      for (std::size_t b = 0; b < nb; ++b) sparse.at(v, b) = rec.sinogram_full.at(views[v], b);
    }
    rec.sinograms.push_back(std::move(sparse));
    rec.masks.push_back(make_mask(np, nb, views));
  }
  return rec;
}

void generate_dataset(const DatasetConfig& cfg, std::size_t threads) {
  namespace fs = std::filesystem;
  if (cfg.path.empty()) throw ArgumentError("generate_dataset: no output path");
  cfg.geometry.validate();
  std::error_code ec;
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    fs::create_directories(cfg.path / split_name(s), ec);
    if (ec) throw IoError("cannot create directory " + (cfg.path / split_name(s)).string() + ": " + ec.message());
  }

  std::vector<std::size_t> all(cfg.geometry.n_views_full);
  for (std::size_t v = 0; v < all.size(); ++v) all[v] = v;
  const SparseOperator full_op = build_operator(cfg.geometry, all);

  struct Job {
    Split split;
    std::size_t index;
  };
  std::vector<Job> jobs;
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    for (std::size_t i = 0; i < split_count(cfg, s); ++i) jobs.push_back({s, i});
  }
  std::vector<std::pair<std::uint64_t, std::uint64_t>> seeds(jobs.size());

  parallel_for(jobs.size(), threads, [&](std::size_t j) {
    const auto rec = make_record(cfg, full_op, jobs[j].split, jobs[j].index);
    const fs::path base = cfg.path / split_name(jobs[j].split) / record_stem(jobs[j].index);
    save_tensor(base.string() + ".gt.lipt", rec.ground_truth);
    save_tensor(base.string() + ".sino_full.lipt", rec.sinogram_full);
    for (std::size_t k = 0; k < rec.view_counts.size(); ++k) {
      const auto v = std::to_string(rec.view_counts[k]);
      save_tensor(base.string() + ".sino_" + v + ".lipt", rec.sinograms[k]);
      save_tensor(base.string() + ".mask_" + v + ".lipt", rec.masks[k]);
    }
    seeds[j] = {rec.phantom_seed, rec.noise_seed};
  });

  Config geo;
  cfg.geometry.to_config(geo);
  geo.save(cfg.path / "geometry.cfg");

  Config manifest = cfg.to_config();
  manifest.set("format", "promptct-dataset-1");
  manifest.set("geometry_file", "geometry.cfg");
  manifest.set("layout", "<split>/NNNN.{gt,sino_full,sino_V,mask_V}.lipt");
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    const std::string key = std::string(split_name(jobs[j].split)) + "." + record_stem(jobs[j].index);
    manifest.set(key + ".phantom_seed", std::to_string(seeds[j].first));
    manifest.set(key + ".noise_seed", std::to_string(seeds[j].second));
  }
  manifest.save(cfg.path / "manifest.txt");
}

Dataset Dataset::open(const std::filesystem::path& path) {
  const auto manifest_path = path / "manifest.txt";
  if (!std::filesystem::exists(manifest_path)) {
    throw IoError("dataset manifest not found: " + manifest_path.string());
  }
  const Config manifest = Config::load(manifest_path);
  if (manifest.get_string("format", "") != "promptct-dataset-1") {
    throw CorruptFileError("unrecognised dataset manifest: " + manifest_path.string());
  }
  Dataset d;
  d.config_ = DatasetConfig::from_config(manifest);
  d.config_.path = path;
  return d;
}

std::size_t Dataset::count(Split s) const { return split_count(config_, s); }

std::filesystem::path Dataset::record_path(Split s, std::size_t index, const std::string& suffix) const {
  if (index >= count(s)) {
    throw ArgumentError(std::string("dataset: ") + split_name(s) + " index " + std::to_string(index) +
                        " out of range");
  }
  return config_.path / split_name(s) / (record_stem(index) + "." + suffix + ".lipt");
}

Tensor Dataset::ground_truth(Split s, std::size_t index) const { return load_tensor(record_path(s, index, "gt")); }

Sample Dataset::sample(Split s, std::size_t index, std::size_t views) const {
  if (std::find(config_.view_counts.begin(), config_.view_counts.end(), views) == config_.view_counts.end()) {
    throw ArgumentError("dataset: no sinograms for " + std::to_string(views) + " views");
  }
  Sample out;
  out.views = views;
  out.ground_truth = ground_truth(s, index);
  out.sinogram = load_tensor(record_path(s, index, "sino_" + std::to_string(views)));
  out.mask = load_tensor(record_path(s, index, "mask_" + std::to_string(views)));
  return out;
}

}  // namespace promptct
