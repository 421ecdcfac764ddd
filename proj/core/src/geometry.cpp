#include "promptct/geometry.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "binio.hpp"
#include "promptct/errors.hpp"
#include "promptct/kernels.hpp"

namespace promptct {

// --- GeometrySpec ------------------------------------------------------------------

void GeometrySpec::validate() const {
  if (image_size == 0 || n_views_full == 0 || n_bins == 0) {
    throw ArgumentError("geometry: image_size, n_views_full and n_bins must be positive");
  }
  if (!(pixel_size > 0.0) || !(source_to_center > 0.0) || !(center_to_detector > 0.0) || !(bin_size > 0.0)) {
    throw ArgumentError("geometry: all lengths must be positive");
  }
  const double half = 0.5 * image_extent();
  if (source_to_center <= half * std::numbers::sqrt2) {
    throw ArgumentError("geometry: source orbit intersects the image square");
  }
  // Tangent ray to the inscribed circle, referred to the isocentre plane.
  const double needed = half * source_to_center / std::sqrt(source_to_center * source_to_center - half * half);
  if (0.5 * n_bins * bin_size < needed) {
    std::ostringstream os;
    os << "geometry: detector half-width " << 0.5 * n_bins * bin_size << " mm does not cover the inscribed circle ("
       << needed << " mm needed)";
    throw ArgumentError(os.str());
  }
}

double GeometrySpec::view_angle(std::size_t view) const {
  return 2.0 * std::numbers::pi * static_cast<double>(view) / static_cast<double>(n_views_full);
}

GeometrySpec GeometrySpec::from_config(const Config& cfg) {
  GeometrySpec g;
  g.image_size = static_cast<std::uint32_t>(cfg.get_int("image_size", g.image_size));
  g.pixel_size = cfg.get_double("pixel_size", g.pixel_size);
  g.n_views_full = static_cast<std::uint32_t>(cfg.get_int("n_views_full", g.n_views_full));
  g.n_bins = static_cast<std::uint32_t>(cfg.get_int("n_bins", g.n_bins));
  g.source_to_center = cfg.get_double("source_to_center", g.source_to_center);
  g.center_to_detector = cfg.get_double("center_to_detector", g.center_to_detector);
  g.bin_size = cfg.get_double("bin_size", g.bin_size);
  g.validate();
  return g;
}

void GeometrySpec::to_config(Config& cfg) const {
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  cfg.set("image_size", std::to_string(image_size));
  cfg.set("pixel_size", num(pixel_size));
  cfg.set("n_views_full", std::to_string(n_views_full));
  cfg.set("n_bins", std::to_string(n_bins));
  cfg.set("source_to_center", num(source_to_center));
  cfg.set("center_to_detector", num(center_to_detector));
  cfg.set("bin_size", num(bin_size));
}

// --- SparseOperator ------------------------------------------------------------------

SparseOperator::SparseOperator(Dims in_dims, Dims out_dims, std::vector<std::uint64_t> row_offsets,
                               std::vector<std::uint32_t> cols, std::vector<double> weights)
    : in_dims_(std::move(in_dims)),
      out_dims_(std::move(out_dims)),
      row_offsets_(std::move(row_offsets)),
      cols_(std::move(cols)),
      weights_(std::move(weights)) {
  if (row_offsets_.size() != dims_product(out_dims_) + 1) {
    throw ShapeError("sparse operator: row offsets do not match output dims " + dims_to_string(out_dims_));
  }
  if (row_offsets_.front() != 0 || row_offsets_.back() != weights_.size() || cols_.size() != weights_.size()) {
    throw ShapeError("sparse operator: inconsistent CSR arrays");
  }
  if (!std::is_sorted(row_offsets_.begin(), row_offsets_.end())) {
    throw ShapeError("sparse operator: row offsets must be non-decreasing");
  }
  const auto n_cols = dims_product(in_dims_);
  for (auto c : cols_) {
    if (c >= n_cols) throw ShapeError("sparse operator: column index out of range");
  }
}

void SparseOperator::set_origin(GeometrySpec spec, std::vector<std::size_t> views) {
  spec_ = spec;
  views_ = std::move(views);
}

Tensor SparseOperator::apply(const Tensor& x) const {
  if (x.dims() != in_dims_) {
    throw ShapeError("project: expected input " + dims_to_string(in_dims_) + ", got " + dims_to_string(x.dims()));
  }
  Tensor y(out_dims_);
  const double* xv = x.data().data();
  for (std::size_t r = 0; r < rows(); ++r) {
    double s = 0.0;
    for (auto k = row_offsets_[r]; k < row_offsets_[r + 1]; ++k) s += weights_[k] * xv[cols_[k]];
    y[r] = s;
  }
  return y;
}

Tensor SparseOperator::apply_adjoint(const Tensor& y) const {
  if (y.dims() != out_dims_) {
    throw ShapeError("backproject: expected input " + dims_to_string(out_dims_) + ", got " +
                     dims_to_string(y.dims()));
  }
  Tensor x(in_dims_);
  double* xv = x.data().data();
  for (std::size_t r = 0; r < rows(); ++r) {
    const double yr = y[r];
    if (yr == 0.0) continue;
    for (auto k = row_offsets_[r]; k < row_offsets_[r + 1]; ++k) xv[cols_[k]] += weights_[k] * yr;
  }
  return x;
}

double SparseOperator::row_sum(std::size_t row) const {
  double s = 0.0;
  for (auto k = row_offsets_.at(row); k < row_offsets_.at(row + 1); ++k) s += weights_[k];
  return s;
}

// --- Siddon ------------------------------------------------------------------------

namespace {

struct Segment {
  std::uint32_t col;
  double length;
};

// Intersection lengths of the line source + a (target - source), a >= 0,
// with the pixel grid centred on the origin. Row 0 of the image is at +y.
void trace_ray(const GeometrySpec& spec, double sx, double sy, double tx, double ty, std::vector<double>& alphas,
               std::vector<Segment>& out) {
  out.clear();
  const double half = 0.5 * spec.image_extent();
  const double dx = tx - sx, dy = ty - sy;
  const double ray_len = std::hypot(dx, dy);
  double a_min = 0.0, a_max = std::numeric_limits<double>::infinity();
  auto clip = [&](double s, double d) {
    if (std::abs(d) < 1e-15) return s >= -half && s <= half;
    double a0 = (-half - s) / d, a1 = (half - s) / d;
    if (a0 > a1) std::swap(a0, a1);
    a_min = std::max(a_min, a0);
    a_max = std::min(a_max, a1);
    return true;
  };
  if (!clip(sx, dx) || !clip(sy, dy) || !(a_max > a_min)) return;

  alphas.clear();
  alphas.push_back(a_min);
  alphas.push_back(a_max);
  const std::size_t n = spec.image_size;
  const double ps = spec.pixel_size;
  auto add_planes = [&](double s, double d) {
    if (std::abs(d) < 1e-15) return;
    for (std::size_t k = 0; k <= n; ++k) {
      const double a = (-half + static_cast<double>(k) * ps - s) / d;
      if (a > a_min && a < a_max) alphas.push_back(a);
    }
  };
  add_planes(sx, dx);
  add_planes(sy, dy);
  std::sort(alphas.begin(), alphas.end());

  for (std::size_t m = 0; m + 1 < alphas.size(); ++m) {
    const double len = (alphas[m + 1] - alphas[m]) * ray_len;
    if (len <= 1e-12) continue;
    const double am = 0.5 * (alphas[m] + alphas[m + 1]);
    const double x = sx + am * dx, y = sy + am * dy;
    const auto j = static_cast<std::ptrdiff_t>(std::floor((x + half) / ps));
    const auto i = static_cast<std::ptrdiff_t>(std::floor((half - y) / ps));
    const auto last = static_cast<std::ptrdiff_t>(n) - 1;
    const auto ci = std::clamp<std::ptrdiff_t>(i, 0, last);
    const auto cj = std::clamp<std::ptrdiff_t>(j, 0, last);
    out.push_back({static_cast<std::uint32_t>(ci * static_cast<std::ptrdiff_t>(n) + cj), len});
  }
}

}  // namespace

SparseOperator build_operator(const GeometrySpec& spec, const std::vector<std::size_t>& views) {
  spec.validate();
  if (views.empty()) throw ArgumentError("build_operator: empty view list");
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (views[i] >= spec.n_views_full) {
      throw ArgumentError("build_operator: view index " + std::to_string(views[i]) + " out of range");
    }
    if (i > 0 && views[i] <= views[i - 1]) throw ArgumentError("build_operator: views must be strictly increasing");
  }
  const std::size_t nb = spec.n_bins;
  std::vector<std::uint64_t> offsets{0};
  std::vector<std::uint32_t> cols;
  std::vector<double> weights;
  offsets.reserve(views.size() * nb + 1);
  std::vector<double> alphas;
  std::vector<Segment> segments;
  const double centre = 0.5 * static_cast<double>(nb - 1);
  for (auto view : views) {
    const double theta = spec.view_angle(view);
    const double ct = std::cos(theta), st = std::sin(theta);
    const double sx = spec.source_to_center * ct, sy = spec.source_to_center * st;
    for (std::size_t b = 0; b < nb; ++b) {
      const double t = (static_cast<double>(b) - centre) * spec.bin_size;
      trace_ray(spec, sx, sy, -t * st, t * ct, alphas, segments);
      // Merge repeated pixels (can only happen at exact corner crossings).
      std::sort(segments.begin(), segments.end(), [](const Segment& a, const Segment& b) { return a.col < b.col; });
      for (std::size_t k = 0; k < segments.size(); ++k) {
        double len = segments[k].length;
        while (k + 1 < segments.size() && segments[k + 1].col == segments[k].col) len += segments[++k].length;
        const auto w = static_cast<double>(static_cast<float>(len));
        if (w > 0.0) {
          cols.push_back(segments[k].col);
          weights.push_back(w);
        }
      }
      offsets.push_back(weights.size());
    }
  }
  SparseOperator op({spec.image_size, spec.image_size}, {views.size(), nb}, std::move(offsets), std::move(cols),
                    std::move(weights));
  op.set_origin(spec, views);
  return op;
}

Tensor project(const SparseOperator& op, const Tensor& image) { return op.apply(image); }
Tensor backproject(const SparseOperator& op, const Tensor& sinogram) { return op.apply_adjoint(sinogram); }

// --- FBP ----------------------------------------------------------------------------

namespace {

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Frequency response of the spatially sampled Ram-Lak kernel
// h(0) = 1/(4 dt^2), h(k odd) = -1/(pi^2 k^2 dt^2), h(k even) = 0,
// halved for the full 360 degree fan scan and scaled by dt for the
// discrete convolution.
std::vector<kernels::Complex> ramp_response(std::size_t padded, double dt) {
  std::vector<kernels::Complex> h(padded, 0.0);
  const double pi2 = std::numbers::pi * std::numbers::pi;
  for (std::size_t k = 0; k < padded; ++k) {
    const std::size_t am = k <= padded / 2 ? k : padded - k;  // |signed lag|
    double v = 0.0;
    if (am == 0) {
      v = 1.0 / (4.0 * dt * dt);
    } else if (am % 2 == 1) {
      v = -1.0 / (pi2 * static_cast<double>(am * am) * dt * dt);
    }
    h[k] = 0.5 * dt * v;
  }
  kernels::dft1d(h, false);
  return h;
}

}  // namespace

Tensor fbp(const Tensor& sinogram, const GeometrySpec& spec, const std::vector<std::size_t>& views, bool clip) {
  spec.validate();
  const std::size_t nb = spec.n_bins;
  if (sinogram.dims() != Dims{views.size(), nb}) {
    throw ShapeError("fbp: sinogram " + dims_to_string(sinogram.dims()) + " does not match " +
                     std::to_string(views.size()) + " views x " + std::to_string(nb) + " bins");
  }
  const double d = spec.source_to_center;
  const double dt = spec.bin_size;
  const double centre = 0.5 * static_cast<double>(nb - 1);
  const std::size_t padded = next_pow2(2 * nb);
  const auto response = ramp_response(padded, dt);

  // Cosine pre-weighting and ramp filtering, one view at a time.
  std::vector<std::vector<double>> filtered(views.size(), std::vector<double>(nb));
  std::vector<kernels::Complex> buf(padded);
  for (std::size_t v = 0; v < views.size(); ++v) {
    std::fill(buf.begin(), buf.end(), kernels::Complex(0.0));
    for (std::size_t b = 0; b < nb; ++b) {
      const double t = (static_cast<double>(b) - centre) * dt;
      buf[b] = sinogram.at(v, b) * d / std::sqrt(d * d + t * t);
    }
    kernels::dft1d(buf, false);
    for (std::size_t k = 0; k < padded; ++k) buf[k] *= response[k];
    kernels::dft1d(buf, true);
    for (std::size_t b = 0; b < nb; ++b) filtered[v][b] = buf[b].real();
  }

  const std::size_t n = spec.image_size;
  const double half = 0.5 * spec.image_extent();
  const double dbeta = 2.0 * std::numbers::pi / static_cast<double>(views.size());
  Tensor image({n, n});
  for (std::size_t v = 0; v < views.size(); ++v) {
    const double theta = spec.view_angle(views[v]);
    const double ct = std::cos(theta), st = std::sin(theta);
    const auto& q = filtered[v];
    for (std::size_t i = 0; i < n; ++i) {
      const double y = half - (static_cast<double>(i) + 0.5) * spec.pixel_size;
      for (std::size_t j = 0; j < n; ++j) {
        const double x = -half + (static_cast<double>(j) + 0.5) * spec.pixel_size;
        const double along = d - (x * ct + y * st);  // source-to-point distance along the central ray
        const double t = d * (-x * st + y * ct) / along;
        const double u = d / along;
        const double pos = t / dt + centre;
        if (pos < 0.0 || pos > static_cast<double>(nb - 1)) continue;
        const auto b0 = static_cast<std::size_t>(std::floor(pos));
        const double frac = pos - static_cast<double>(b0);
        const double val = b0 + 1 < nb ? (1.0 - frac) * q[b0] + frac * q[b0 + 1] : q[b0];
        image.at(i, j) += u * u * val;
      }
    }
  }
  image *= dbeta;
  if (clip) {
    for (auto& px : image.data()) px = std::max(px, 0.0);
  }
  return image;
}

// --- spectrum ------------------------------------------------------------------------

namespace {

struct PowerResult {
  double lambda = 0.0;
  std::size_t iterations = 0;
};

Eigen::VectorXd normal_apply(const SparseOperator& op, const Eigen::VectorXd& x) {
  Tensor t(op.in_dims(), std::vector<double>(x.data(), x.data() + x.size()));
  const auto r = op.apply_adjoint(op.apply(t));
  return Eigen::Map<const Eigen::VectorXd>(r.data().data(), x.size());
}

Eigen::VectorXd random_unit(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  for (auto& e : v) e = normal(rng);
  v.normalize();
  return v;
}

// Power iteration with Rayleigh quotients; stops on relative change < 1e-8.
PowerResult power_iteration(const SparseOperator& op, const Eigen::VectorXd& start, std::size_t iters) {
  PowerResult res;
  Eigen::VectorXd x = start;
  for (std::size_t it = 0; it < iters; ++it) {
    const Eigen::VectorXd w = normal_apply(op, x);
    const double next = x.dot(w);
    const double wn = w.norm();
    res.iterations = it + 1;
    if (wn == 0.0) throw ArgumentError("estimate_spectrum: operator is zero");
    x = w / wn;
    const bool converged = it > 0 && std::abs(next - res.lambda) < 1e-8 * std::abs(next);
    res.lambda = next;
    if (converged) break;
  }
  if (!(res.lambda > 0.0)) throw ArgumentError("estimate_spectrum: operator is zero");
  return res;
}

}  // namespace

double estimate_zeta(const SparseOperator& op, std::size_t iters, std::uint64_t seed) {
  if (iters < 50) throw ArgumentError("estimate_zeta: iters must be >= 50");
  return power_iteration(op, random_unit(op.cols(), seed), iters).lambda;
}

SpectrumEstimate estimate_spectrum(const SparseOperator& op, std::size_t iters, std::uint64_t seed) {
  if (iters < 50) throw ArgumentError("estimate_spectrum: iters must be >= 50");
  const std::size_t n = op.cols();
  const Eigen::VectorXd start = random_unit(n, seed);
  auto normal_op = [&](const Eigen::VectorXd& x) { return normal_apply(op, x); };

  SpectrumEstimate est;
  const auto power = power_iteration(op, start, iters);
  const double lambda = power.lambda;
  est.zeta = lambda;
  est.power_iterations = power.iterations;

  // Lanczos with full reorthogonalisation; the smallest Ritz value estimates
  // the bottom of the spectrum.
  const std::size_t steps = std::min({iters, std::size_t{200}, n});
  std::vector<Eigen::VectorXd> basis{start};
  std::vector<double> alpha, beta;
  for (std::size_t j = 0; j < steps; ++j) {
    Eigen::VectorXd w = normal_op(basis[j]);
    const double a = basis[j].dot(w);
    alpha.push_back(a);
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& q : basis) w -= q.dot(w) * q;
    }
    const double b = w.norm();
    if (j + 1 == steps || b <= 1e-10 * std::max(std::abs(a), lambda)) break;
    beta.push_back(b);
    basis.push_back(w / b);
  }
  const auto m = static_cast<Eigen::Index>(alpha.size());
  Eigen::MatrixXd tri = Eigen::MatrixXd::Zero(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    tri(i, i) = alpha[static_cast<std::size_t>(i)];
    if (i + 1 < m) tri(i, i + 1) = tri(i + 1, i) = beta[static_cast<std::size_t>(i)];
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(tri, Eigen::EigenvaluesOnly);
  est.epsilon = solver.eigenvalues().minCoeff();
  est.lanczos_steps = alpha.size();
  est.singular = est.epsilon < 1e-8 * est.zeta;
  return est;
}

std::vector<std::size_t> subsample_views(std::size_t n_full, std::size_t n_sparse) {
  if (n_sparse == 0 || n_full == 0 || n_full % n_sparse != 0) {
    throw ArgumentError("subsample_views: " + std::to_string(n_sparse) + " does not divide " +
                        std::to_string(n_full));
  }
  const std::size_t stride = n_full / n_sparse;
  std::vector<std::size_t> views(n_sparse);
  for (std::size_t i = 0; i < n_sparse; ++i) views[i] = i * stride;
  return views;
}

std::vector<std::size_t> views_from_mask(const Tensor& mask) {
  if (mask.ndim() != 2) throw ShapeError("views_from_mask: mask must be Np x Nb");
  std::vector<std::size_t> views;
  for (std::size_t r = 0; r < mask.dim(0); ++r) {
    std::size_t ones = 0;
    for (std::size_t c = 0; c < mask.dim(1); ++c) ones += mask.at(r, c) != 0.0;
    if (ones == mask.dim(1)) {
      views.push_back(r);
    } else if (ones != 0) {
      throw ArgumentError("views_from_mask: row " + std::to_string(r) + " is partially sampled");
    }
  }
  if (views.empty()) throw ArgumentError("views_from_mask: mask retains no views");
  return views;
}

// --- LIPO ----------------------------------------------------------------------------

void save_operator(const std::filesystem::path& path, const SparseOperator& op) {
  if (!op.spec()) throw ArgumentError("save_operator: operator was not built from a geometry");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const auto& g = *op.spec();
  binio::put_magic(out, "LIPO");
  binio::put<std::uint32_t>(out, kOperatorFileVersion);
  binio::put<std::uint32_t>(out, g.image_size);
  binio::put<double>(out, g.pixel_size);
  binio::put<std::uint32_t>(out, g.n_views_full);
  binio::put<std::uint32_t>(out, g.n_bins);
  binio::put<double>(out, g.source_to_center);
  binio::put<double>(out, g.center_to_detector);
  binio::put<double>(out, g.bin_size);
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(op.views().size()));
  for (auto v : op.views()) binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  binio::put<std::uint64_t>(out, op.rows());
  binio::put<std::uint64_t>(out, op.cols());
  binio::put<std::uint64_t>(out, op.nnz());
  for (auto o : op.row_offsets()) binio::put<std::uint64_t>(out, o);
  for (auto c : op.col_indices()) binio::put<std::uint32_t>(out, c);
  for (auto w : op.weights()) binio::put<float>(out, static_cast<float>(w));
  if (!out) throw IoError("write failed: " + path.string());
}

SparseOperator load_operator(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  try {
    binio::expect_magic(in, "LIPO");
    const auto version = binio::get<std::uint32_t>(in, "LIPO version");
    if (version != kOperatorFileVersion) throw CorruptFileError("unsupported LIPO version " + std::to_string(version));
    GeometrySpec g;
    g.image_size = binio::get<std::uint32_t>(in, "image_size");
    g.pixel_size = binio::get<double>(in, "pixel_size");
    g.n_views_full = binio::get<std::uint32_t>(in, "n_views_full");
    g.n_bins = binio::get<std::uint32_t>(in, "n_bins");
    g.source_to_center = binio::get<double>(in, "source_to_center");
    g.center_to_detector = binio::get<double>(in, "center_to_detector");
    g.bin_size = binio::get<double>(in, "bin_size");
    std::vector<std::size_t> views(binio::get<std::uint32_t>(in, "view count"));
    for (auto& v : views) v = binio::get<std::uint32_t>(in, "views");
    const auto rows = binio::get<std::uint64_t>(in, "rows");
    const auto cols = binio::get<std::uint64_t>(in, "cols");
    const auto nnz = binio::get<std::uint64_t>(in, "nnz");
    if (rows != views.size() * g.n_bins || cols != std::uint64_t{g.image_size} * g.image_size) {
      throw CorruptFileError("LIPO header dims inconsistent with geometry");
    }
    std::vector<std::uint64_t> offsets(rows + 1);
    for (auto& o : offsets) o = binio::get<std::uint64_t>(in, "row offsets");
    std::vector<std::uint32_t> col_idx(nnz);
    binio::read_exact(in, reinterpret_cast<char*>(col_idx.data()), nnz * sizeof(std::uint32_t), "columns");
    std::vector<float> w32(nnz);
    binio::read_exact(in, reinterpret_cast<char*>(w32.data()), nnz * sizeof(float), "weights");
    SparseOperator op({g.image_size, g.image_size}, {views.size(), g.n_bins}, std::move(offsets),
                      std::move(col_idx), std::vector<double>(w32.begin(), w32.end()));
    op.set_origin(g, std::move(views));
    return op;
  } catch (const CorruptFileError& e) {
    throw CorruptFileError(path.string() + ": " + e.what());
  } catch (const ShapeError& e) {
    throw CorruptFileError(path.string() + ": " + e.what());
  }
}

SparseOperator cached_operator(const std::filesystem::path& dir, const GeometrySpec& spec,
                               const std::vector<std::size_t>& views) {
  if (dir.empty()) return build_operator(spec, views);
  std::size_t h = std::hash<std::string>{}([&] {
    Config c;
    spec.to_config(c);
    return c.to_string() + join_list(views);
  }());
  std::ostringstream name;
  name << "op_" << views.size() << "_" << std::hex << h << ".lipo";
  const auto path = dir / name.str();
  if (std::filesystem::exists(path)) {
    try {
      auto op = load_operator(path);
      if (op.spec() && *op.spec() == spec && op.views() == views) return op;
    } catch (const CorruptFileError&) {
      // rebuilt below
    }
  }
  auto op = build_operator(spec, views);
  std::filesystem::create_directories(dir);
  save_operator(path, op);
  return op;
}

}  // namespace promptct
