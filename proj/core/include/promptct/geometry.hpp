#pragma once

// Fan-beam geometry: Siddon system matrix, its exact transpose, fan-beam FBP
// and spectral estimates of P^T P.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "promptct/autodiff.hpp"
#include "promptct/config.hpp"
#include "promptct/tensor.hpp"

namespace promptct {

/// Flat-detector fan-beam scan over [0, 360) degrees with equiangular views.
///
/// `bin_size` is the detector pitch referred to the rotation centre (the
/// virtual detector through the isocentre); the physical pitch is larger by
/// the magnification (d_so + d_od) / d_so. Lengths are in mm.
struct GeometrySpec {
  std::uint32_t image_size = 64;
  double pixel_size = 1.0;
  std::uint32_t n_views_full = 360;
  std::uint32_t n_bins = 95;
  double source_to_center = 220.798;
  double center_to_detector = 197.247;
  double bin_size = 0.9;

  /// Throws ArgumentError on non-positive lengths or a fan that does not
  /// cover the circle inscribed in the image.
  void validate() const;

  double image_extent() const { return image_size * pixel_size; }
  double view_angle(std::size_t view) const;
  double magnification() const { return (source_to_center + center_to_detector) / source_to_center; }

  static GeometrySpec from_config(const Config& cfg);
  void to_config(Config& cfg) const;

  friend bool operator==(const GeometrySpec&, const GeometrySpec&) = default;
};

/// Compressed-sparse-row matrix with a fixed input and output shape. The same
/// storage serves apply() and apply_adjoint(), so the pair is an exact
/// transpose.
class SparseOperator final : public ad::LinearOperator {
 public:
  SparseOperator() = default;
  SparseOperator(Dims in_dims, Dims out_dims, std::vector<std::uint64_t> row_offsets,
                 std::vector<std::uint32_t> cols, std::vector<double> weights);

  Tensor apply(const Tensor& x) const override;
  Tensor apply_adjoint(const Tensor& y) const override;

  std::size_t rows() const noexcept { return row_offsets_.empty() ? 0 : row_offsets_.size() - 1; }
  std::size_t cols() const noexcept { return dims_product(in_dims_); }
  std::size_t nnz() const noexcept { return weights_.size(); }
  const Dims& in_dims() const noexcept { return in_dims_; }
  const Dims& out_dims() const noexcept { return out_dims_; }

  const std::vector<std::uint64_t>& row_offsets() const noexcept { return row_offsets_; }
  const std::vector<std::uint32_t>& col_indices() const noexcept { return cols_; }
  const std::vector<double>& weights() const noexcept { return weights_; }

  double row_sum(std::size_t row) const;

  /// Scan geometry and retained views when built by build_operator().
  const std::optional<GeometrySpec>& spec() const noexcept { return spec_; }
  const std::vector<std::size_t>& views() const noexcept { return views_; }
  void set_origin(GeometrySpec spec, std::vector<std::size_t> views);

 private:
  Dims in_dims_;
  Dims out_dims_;
  std::vector<std::uint64_t> row_offsets_;
  std::vector<std::uint32_t> cols_;
  std::vector<double> weights_;
  std::optional<GeometrySpec> spec_;
  std::vector<std::size_t> views_;
};

/// Siddon ray-pixel intersection lengths for the given (strictly increasing)
/// view indices. Row (v, b) is view views[v], detector bin b. Weights are
/// rounded to f32 so cached and freshly built operators agree exactly.
SparseOperator build_operator(const GeometrySpec& spec, const std::vector<std::size_t>& views);

Tensor project(const SparseOperator& op, const Tensor& image);
Tensor backproject(const SparseOperator& op, const Tensor& sinogram);

/// Fan-beam FBP: cosine pre-weighting, Ram-Lak filtering in the frequency
/// domain (zero-padded to the next power of two >= 2 Nb), distance-weighted
/// backprojection scaled by the angular step. Output clipped below at 0
/// unless `clip` is false.
Tensor fbp(const Tensor& sinogram, const GeometrySpec& spec, const std::vector<std::size_t>& views,
           bool clip = true);

struct SpectrumEstimate {
  double zeta = 0.0;     // largest eigenvalue of P^T P (power iteration)
  double epsilon = 0.0;  // smallest Ritz value of P^T P (Lanczos)
  std::size_t power_iterations = 0;
  std::size_t lanczos_steps = 0;
  bool singular = false;  // epsilon < 1e-8 * zeta
};

SpectrumEstimate estimate_spectrum(const SparseOperator& op, std::size_t iters, std::uint64_t seed);

/// Largest eigenvalue of P^T P by power iteration alone (the zeta part of
/// estimate_spectrum, same start vector for a given seed).
double estimate_zeta(const SparseOperator& op, std::size_t iters, std::uint64_t seed);

/// {0, s, 2s, ...} with s = n_full / n_sparse.
std::vector<std::size_t> subsample_views(std::size_t n_full, std::size_t n_sparse);

/// Indices of all-ones rows of a sampling mask.
std::vector<std::size_t> views_from_mask(const Tensor& mask);

// LIPO operator cache: "LIPO", u32 version, GeometrySpec (f64/u32 LE),
// u32 view count + u32 views, u64 rows, u64 cols, u64 nnz, CSR arrays
// (u64 row offsets, u32 cols, f32 weights).
inline constexpr std::uint32_t kOperatorFileVersion = 1;
void save_operator(const std::filesystem::path& path, const SparseOperator& op);
SparseOperator load_operator(const std::filesystem::path& path);

/// Loads `<dir>/<key>.lipo` when it matches spec and views, otherwise builds
/// and stores it. An empty `dir` disables caching.
SparseOperator cached_operator(const std::filesystem::path& dir, const GeometrySpec& spec,
                               const std::vector<std::size_t>& views);

}  // namespace promptct
