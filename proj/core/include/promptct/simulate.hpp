#pragma once

// Synthetic phantoms, the photon-counting noise model and sparse-view
// dataset assembly.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "promptct/config.hpp"
#include "promptct/geometry.hpp"
#include "promptct/tensor.hpp"

namespace promptct {

/// Ellipse in normalised image coordinates: x to the right, y up, the image
/// spanning [-1, 1] on both axes. `angle_deg` rotates counter-clockwise.
struct Ellipse {
  double cx = 0.0, cy = 0.0;
  double a = 0.0, b = 0.0;
  double angle_deg = 0.0;
  double value = 0.0;
};

enum class PhantomKind { SheppLogan, RandomEllipses, Disk };

struct Phantom {
  Tensor image;
  PhantomKind kind = PhantomKind::SheppLogan;
  std::uint64_t seed = 0;
  std::vector<Ellipse> ellipses;
};

bool ellipse_contains(const Ellipse& e, double x, double y);
/// Additive intensity at a point (no clipping).
double ellipse_sum(const std::vector<Ellipse>& ellipses, double x, double y);
/// Sample at pixel centres and clip to [0, 1].
Tensor rasterize(const std::vector<Ellipse>& ellipses, std::size_t n);
/// Normalised coordinate of pixel centre (row i, col j).
std::pair<double, double> pixel_center(std::size_t n, std::size_t i, std::size_t j);

/// Modified (Toft) 10-ellipse Shepp-Logan phantom, values in [0, 1].
Phantom shepp_logan(std::size_t n);
/// 4-8 ellipses: a body ellipse plus interior structures, fixed per seed.
Phantom random_ellipse_phantom(std::size_t n, std::uint64_t seed);
/// Centred uniform disk of `radius_px` pixels.
Phantom disk_phantom(std::size_t n, double radius_px, double value);

/// Photon counting: c = Poisson(I0 exp(-y)) + N(0, (sigma_e I0)^2),
/// clamped to >= 1, returned as -ln(c / I0). `y` must be non-negative.
Tensor add_noise(const Tensor& y, double photons, double electronic_sigma, std::uint64_t seed);

/// Np_full x Nb binary mask with the rows in `views` set to one.
Tensor make_mask(std::size_t n_views_full, std::size_t n_bins, const std::vector<std::size_t>& views);

struct NoiseModel {
  double photons = 5e6;
  double electronic_sigma = 0.05;    // fraction of the blank-scan count I0
  double attenuation_scale = 0.02;   // mm^-1 per image unit
  bool enabled = true;

  /// Noise on a line-integral sinogram in image-units x mm.
  Tensor apply(const Tensor& sinogram, std::uint64_t seed) const;
};

struct DatasetConfig {
  std::filesystem::path path;
  std::size_t n_train = 200;
  std::size_t n_val = 10;
  std::size_t n_test = 20;
  std::vector<std::size_t> view_counts{60, 90, 120, 180};
  std::uint64_t seed = 20240901;
  GeometrySpec geometry;
  NoiseModel noise;

  static DatasetConfig from_config(const Config& cfg);
  Config to_config() const;
};

/// splitmix64 finaliser; per-record seeds are derived through it.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

enum class Split { Train, Val, Test };
const char* split_name(Split s);
std::size_t split_index(Split s);

struct DatasetRecord {
  Tensor ground_truth;
  Tensor sinogram_full;
  std::vector<std::size_t> view_counts;
  std::vector<Tensor> sinograms;  // one per view count
  std::vector<Tensor> masks;
  std::uint64_t phantom_seed = 0;
  std::uint64_t noise_seed = 0;
};

/// Noise is applied once to the full sinogram, then rows are subsampled.
DatasetRecord make_record(const DatasetConfig& cfg, const SparseOperator& full_op, Split split, std::size_t index);

/// Writes `<split>/NNNN.{gt,sino_full,sino_V,mask_V}.lipt`, `geometry.cfg`
/// and `manifest.txt` under cfg.path.
void generate_dataset(const DatasetConfig& cfg, std::size_t threads = 1);

struct Sample {
  Tensor ground_truth;
  Tensor sinogram;
  Tensor mask;
  std::size_t views = 0;
};

/// Read access to a generated dataset directory.
class Dataset {
 public:
  static Dataset open(const std::filesystem::path& path);

  const DatasetConfig& config() const noexcept { return config_; }
  const std::filesystem::path& path() const noexcept { return config_.path; }
  std::size_t count(Split s) const;

  Tensor ground_truth(Split s, std::size_t index) const;
  Sample sample(Split s, std::size_t index, std::size_t views) const;

 private:
  std::filesystem::path record_path(Split s, std::size_t index, const std::string& suffix) const;
  DatasetConfig config_;
};

}  // namespace promptct
