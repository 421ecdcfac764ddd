#include "promptct/kernels.hpp"

#include <fftw3.h>

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <memory>
#include <mutex>
#include <tuple>

#include "promptct/errors.hpp"

namespace promptct::kernels {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMat>;
using RowMap = Eigen::Map<RowMat>;

struct ConvShape {
  std::size_t out_ch, in_ch, k, h, w, oh, ow, stride;
};

ConvShape conv_shape(const Dims& input, const Tensor& kernels, std::size_t stride) {
  if (input.size() != 3) throw ShapeError("conv2d input must be C x H x W, got " + dims_to_string(input));
  if (kernels.ndim() != 4) {
    throw ShapeError("conv2d kernels must be O x C x k x k, got " + dims_to_string(kernels.dims()));
  }
  const auto k = kernels.dim(2);
  if (kernels.dim(3) != k) throw ShapeError("conv2d kernels must be square");
  if (k % 2 == 0) throw ShapeError("conv2d kernel size must be odd, got " + std::to_string(k));
  if (kernels.dim(1) != input[0]) {
    throw ShapeError("conv2d channel mismatch: input " + dims_to_string(input) + ", kernels " +
                     dims_to_string(kernels.dims()));
  }
  if (stride == 0) throw ArgumentError("conv2d stride must be positive");
  return {kernels.dim(0), input[0], k, input[1], input[2], conv_out_extent(input[1], stride),
          conv_out_extent(input[2], stride), stride};
}

inline std::size_t wrap(std::ptrdiff_t v, std::size_t n) {
  const auto m = static_cast<std::ptrdiff_t>(n);
  v %= m;
  return static_cast<std::size_t>(v < 0 ? v + m : v);
}

// Output rows are processed in tiles so the column buffer stays in cache.
// Within a tile [i0, i1):
//   cols[(c*k + a)*k + b, (i - i0)*ow + j] = in[c, (s*i + a - r) mod H, (s*j + b - r) mod W]
constexpr std::size_t kTileBytes = 64 * 1024;

std::size_t tile_rows(const ConvShape& s) {
  const std::size_t per_row = s.in_ch * s.k * s.k * s.ow * sizeof(double);
  return std::clamp<std::size_t>(kTileBytes / std::max<std::size_t>(per_row, 1), 1, s.oh);
}

void im2col(const double* in, const ConvShape& s, std::size_t i0, std::size_t i1, double* cols) {
  const std::size_t spatial = (i1 - i0) * s.ow;
  const auto r = static_cast<std::ptrdiff_t>(s.k / 2);
  for (std::size_t c = 0; c < s.in_ch; ++c) {
    const double* plane = in + c * s.h * s.w;
    for (std::size_t a = 0; a < s.k; ++a) {
      for (std::size_t b = 0; b < s.k; ++b) {
        double* dst = cols + ((c * s.k + a) * s.k + b) * spatial;
        const auto da = static_cast<std::ptrdiff_t>(a) - r;
        const auto db = static_cast<std::ptrdiff_t>(b) - r;
        if (s.stride == 1) {
          const std::size_t off = wrap(db, s.w);
          for (std::size_t i = i0; i < i1; ++i) {
            const double* src = plane + wrap(static_cast<std::ptrdiff_t>(i) + da, s.h) * s.w;
            double* row = dst + (i - i0) * s.ow;
            std::memcpy(row, src + off, (s.w - off) * sizeof(double));
            std::memcpy(row + (s.w - off), src, off * sizeof(double));
          }
        } else {
          for (std::size_t i = i0; i < i1; ++i) {
            const double* src = plane + wrap(static_cast<std::ptrdiff_t>(s.stride * i) + da, s.h) * s.w;
            double* row = dst + (i - i0) * s.ow;
            for (std::size_t j = 0; j < s.ow; ++j) {
              row[j] = src[wrap(static_cast<std::ptrdiff_t>(s.stride * j) + db, s.w)];
            }
          }
        }
      }
    }
  }
}

// Transpose of im2col for one tile: scatter-add columns onto the input grid.
void col2im(const double* cols, const ConvShape& s, std::size_t i0, std::size_t i1, double* out) {
  const std::size_t spatial = (i1 - i0) * s.ow;
  const auto r = static_cast<std::ptrdiff_t>(s.k / 2);
  for (std::size_t c = 0; c < s.in_ch; ++c) {
    double* plane = out + c * s.h * s.w;
    for (std::size_t a = 0; a < s.k; ++a) {
      for (std::size_t b = 0; b < s.k; ++b) {
        const double* src = cols + ((c * s.k + a) * s.k + b) * spatial;
        const auto da = static_cast<std::ptrdiff_t>(a) - r;
        const auto db = static_cast<std::ptrdiff_t>(b) - r;
        if (s.stride == 1) {
          const std::size_t off = wrap(db, s.w);
          const std::size_t head = s.w - off;
          for (std::size_t i = i0; i < i1; ++i) {
            double* dst = plane + wrap(static_cast<std::ptrdiff_t>(i) + da, s.h) * s.w;
            const double* row = src + (i - i0) * s.ow;
            for (std::size_t j = 0; j < head; ++j) dst[off + j] += row[j];
            for (std::size_t j = 0; j < off; ++j) dst[j] += row[head + j];
          }
        } else {
          for (std::size_t i = i0; i < i1; ++i) {
            double* dst = plane + wrap(static_cast<std::ptrdiff_t>(s.stride * i) + da, s.h) * s.w;
            const double* row = src + (i - i0) * s.ow;
            for (std::size_t j = 0; j < s.ow; ++j) {
              dst[wrap(static_cast<std::ptrdiff_t>(s.stride * j) + db, s.w)] += row[j];
            }
          }
        }
      }
    }
  }
}

// Scratch that grows but never shrinks, without zero-filling.
struct Scratch {
  std::unique_ptr<double[]> data;
  std::size_t capacity = 0;
  double* get(std::size_t n) {
    if (n > capacity) {
      data.reset(new double[n]);
      capacity = n;
    }
    return data.get();
  }
};

thread_local Scratch tl_cols;

using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

}  // namespace

std::size_t conv_out_extent(std::size_t extent, std::size_t stride) { return (extent + stride - 1) / stride; }

Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride) {
  const auto s = conv_shape(input.dims(), kernels, stride);
  const std::size_t depth = s.in_ch * s.k * s.k;
  const std::size_t rows = tile_rows(s);
  double* cols = tl_cols.get(depth * rows * s.ow);
  Tensor out({s.out_ch, s.oh, s.ow});
  ConstRowMap kmat(kernels.data().data(), static_cast<Eigen::Index>(s.out_ch), static_cast<Eigen::Index>(depth));
  const auto plane = static_cast<Eigen::Index>(s.oh * s.ow);
  for (std::size_t i0 = 0; i0 < s.oh; i0 += rows) {
    const std::size_t i1 = std::min(s.oh, i0 + rows);
    const auto n = static_cast<Eigen::Index>((i1 - i0) * s.ow);
    im2col(input.data().data(), s, i0, i1, cols);
    ConstRowMap cmat(cols, static_cast<Eigen::Index>(depth), n);
    StridedMap res(out.data().data() + i0 * s.ow, static_cast<Eigen::Index>(s.out_ch), n, Eigen::OuterStride<>(plane));
    res.noalias() = kmat * cmat;
  }
  return out;
}

Tensor conv2d_adjoint(const Tensor& grad_out, const Tensor& kernels, std::size_t in_h, std::size_t in_w,
                      std::size_t stride) {
  if (kernels.ndim() != 4) throw ShapeError("conv2d_adjoint kernels must be O x C x k x k");
  const auto s = conv_shape({kernels.dim(1), in_h, in_w}, kernels, stride);
  if (grad_out.dims() != Dims{s.out_ch, s.oh, s.ow}) {
    throw ShapeError("conv2d_adjoint: grad_out " + dims_to_string(grad_out.dims()) + " does not match kernels " +
                     dims_to_string(kernels.dims()) + " at input " + std::to_string(in_h) + "x" +
                     std::to_string(in_w));
  }
  const std::size_t depth = s.in_ch * s.k * s.k;
  const std::size_t rows = tile_rows(s);
  double* cols = tl_cols.get(depth * rows * s.ow);
  ConstRowMap kmat(kernels.data().data(), static_cast<Eigen::Index>(s.out_ch), static_cast<Eigen::Index>(depth));
  const auto plane = static_cast<Eigen::Index>(s.oh * s.ow);
  Tensor out({s.in_ch, s.h, s.w});
  for (std::size_t i0 = 0; i0 < s.oh; i0 += rows) {
    const std::size_t i1 = std::min(s.oh, i0 + rows);
    const auto n = static_cast<Eigen::Index>((i1 - i0) * s.ow);
    ConstStridedMap g(grad_out.data().data() + i0 * s.ow, static_cast<Eigen::Index>(s.out_ch), n,
                      Eigen::OuterStride<>(plane));
    RowMap cmat(cols, static_cast<Eigen::Index>(depth), n);
    cmat.noalias() = kmat.transpose() * g;
    col2im(cols, s, i0, i1, out.data().data());
  }
  return out;
}

Tensor conv2d_adjoint(const Tensor& grad_out, const Tensor& kernels) {
  if (grad_out.ndim() != 3) throw ShapeError("conv2d_adjoint grad_out must be C x H x W");
  return conv2d_adjoint(grad_out, kernels, grad_out.dim(1), grad_out.dim(2), 1);
}

Tensor conv2d_kernel_grad(const Tensor& input, const Tensor& grad_out, std::size_t k, std::size_t stride) {
  if (grad_out.ndim() != 3) throw ShapeError("conv2d_kernel_grad grad_out must be O x H x W");
  const Tensor probe({grad_out.dim(0), input.ndim() == 3 ? input.dim(0) : 1, k, k});
  const auto s = conv_shape(input.dims(), probe, stride);
  if (grad_out.dim(1) != s.oh || grad_out.dim(2) != s.ow) {
    throw ShapeError("conv2d_kernel_grad: grad_out " + dims_to_string(grad_out.dims()) +
                     " inconsistent with input " + dims_to_string(input.dims()));
  }
  const std::size_t depth = s.in_ch * s.k * s.k;
  const std::size_t rows = tile_rows(s);
  double* cols = tl_cols.get(depth * rows * s.ow);
  const auto plane = static_cast<Eigen::Index>(s.oh * s.ow);
  Tensor out({s.out_ch, s.in_ch, k, k});
  RowMap dk(out.data().data(), static_cast<Eigen::Index>(s.out_ch), static_cast<Eigen::Index>(depth));
  for (std::size_t i0 = 0; i0 < s.oh; i0 += rows) {
    const std::size_t i1 = std::min(s.oh, i0 + rows);
    const auto n = static_cast<Eigen::Index>((i1 - i0) * s.ow);
    im2col(input.data().data(), s, i0, i1, cols);
    ConstStridedMap g(grad_out.data().data() + i0 * s.ow, static_cast<Eigen::Index>(s.out_ch), n,
                      Eigen::OuterStride<>(plane));
    ConstRowMap cmat(cols, static_cast<Eigen::Index>(depth), n);
    dk.noalias() += g * cmat.transpose();
  }
  return out;
}

void add_channel_bias(Tensor& x, const Tensor& bias) {
  if (x.ndim() != 3 || bias.size() != x.dim(0)) {
    throw ShapeError("channel bias " + dims_to_string(bias.dims()) + " vs feature map " + dims_to_string(x.dims()));
  }
  const std::size_t plane = x.dim(1) * x.dim(2);
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    double* p = x.data().data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) p[i] += bias[c];
  }
}

Tensor channel_sums(const Tensor& x) {
  if (x.ndim() != 3) throw ShapeError("channel_sums expects C x H x W");
  const std::size_t plane = x.dim(1) * x.dim(2);
  Tensor out({x.dim(0)});
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    double s = 0.0;
    const double* p = x.data().data() + c * plane;
    for (std::size_t i = 0; i < plane; ++i) s += p[i];
    out[c] = s;
  }
  return out;
}

Tensor soft_threshold(const Tensor& u, const Tensor& e) {
  require_same_dims(u, e, "soft_threshold");
  Tensor out(u.dims());
  for (std::size_t i = 0; i < u.size(); ++i) {
    if (!(e[i] >= 0.0)) throw ArgumentError("soft_threshold: negative threshold " + std::to_string(e[i]));
    const double mag = std::abs(u[i]) - e[i];
    out[i] = mag > 0.0 ? std::copysign(mag, u[i]) : 0.0;
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw ArgumentError("clamp: lo > hi");
  Tensor out = x;
  for (auto& v : out.data()) v = std::clamp(v, lo, hi);
  return out;
}

Tensor fully_connected(const Tensor& x, const Tensor& weights, const Tensor& bias) {
  if (weights.ndim() != 2 || weights.dim(1) != x.size() || bias.size() != weights.dim(0)) {
    throw ShapeError("fully_connected: x " + dims_to_string(x.dims()) + ", W " + dims_to_string(weights.dims()) +
                     ", b " + dims_to_string(bias.dims()));
  }
  Tensor out({weights.dim(0)});
  for (std::size_t m = 0; m < weights.dim(0); ++m) {
    double s = bias[m];
    for (std::size_t n = 0; n < weights.dim(1); ++n) s += weights.at(m, n) * x[n];
    out[m] = s;
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  Tensor out = channel_sums(x);
  out *= 1.0 / static_cast<double>(x.dim(1) * x.dim(2));
  return out;
}

// --- Fourier ---------------------------------------------------------------

namespace {

// fftw planning is not thread safe; plans are cached per (rank, dims, sign)
// and executed through the new-array interface.
class PlanCache {
 public:
  static PlanCache& instance() {
    static PlanCache cache;
    return cache;
  }

  fftw_plan get(std::size_t rows, std::size_t cols, int sign) {
    std::lock_guard lock(mutex_);
    const auto key = std::make_tuple(rows, cols, sign);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    std::vector<Complex> scratch(rows * cols);
    auto* buf = reinterpret_cast<fftw_complex*>(scratch.data());
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    fftw_plan plan = rows == 1 ? fftw_plan_dft_1d(static_cast<int>(cols), buf, buf, sign, flags)
                               : fftw_plan_dft_2d(static_cast<int>(rows), static_cast<int>(cols), buf, buf,
                                                  sign, flags);
    plans_.emplace(key, plan);
    return plan;
  }

  ~PlanCache() {
    for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
  }

 private:
  std::mutex mutex_;
  std::map<std::tuple<std::size_t, std::size_t, int>, fftw_plan> plans_;
};

void execute(std::vector<Complex>& data, std::size_t rows, std::size_t cols, int sign) {
  auto plan = PlanCache::instance().get(rows, cols, sign);
  auto* buf = reinterpret_cast<fftw_complex*>(data.data());
  fftw_execute_dft(plan, buf, buf);
}

}  // namespace

ComplexGrid dft2(const ComplexGrid& grid) {
  ComplexGrid out = grid;
  execute(out.values, out.rows, out.cols, FFTW_FORWARD);
  return out;
}

ComplexGrid dft2(const Tensor& image) {
  if (image.ndim() != 2) throw ShapeError("dft2 expects an H x W image");
  ComplexGrid g{image.dim(0), image.dim(1), std::vector<Complex>(image.data().begin(), image.data().end())};
  execute(g.values, g.rows, g.cols, FFTW_FORWARD);
  return g;
}

ComplexGrid idft2_complex(const ComplexGrid& spectrum) {
  ComplexGrid out = spectrum;
  execute(out.values, out.rows, out.cols, FFTW_BACKWARD);
  const double scale = 1.0 / static_cast<double>(out.rows * out.cols);
  for (auto& v : out.values) v *= scale;
  return out;
}

Tensor idft2(const ComplexGrid& spectrum) {
  const auto g = idft2_complex(spectrum);
  Tensor out({g.rows, g.cols});
  for (std::size_t i = 0; i < g.values.size(); ++i) out[i] = g.values[i].real();
  return out;
}

void dft1d(std::vector<Complex>& data, bool inverse) {
  execute(data, 1, data.size(), inverse ? FFTW_BACKWARD : FFTW_FORWARD);
  if (inverse) {
    const double scale = 1.0 / static_cast<double>(data.size());
    for (auto& v : data) v *= scale;
  }
}

// --- spectral scaling -------------------------------------------------------

namespace {

void check_spectral(const Tensor& x, const Tensor& w_re, const Tensor& w_im) {
  if (x.ndim() != 3) throw ShapeError("spectral_scale expects C x H x W");
  const Dims plane{x.dim(1), x.dim(2)};
  if (w_re.dims() != plane || w_im.dims() != plane) {
    throw ShapeError("spectral_scale weights must be " + dims_to_string(plane));
  }
}

ComplexGrid channel_spectrum(const Tensor& x, std::size_t c) {
  const std::size_t h = x.dim(1), w = x.dim(2);
  ComplexGrid g{h, w, std::vector<Complex>(h * w)};
  const double* p = x.data().data() + c * h * w;
  for (std::size_t i = 0; i < h * w; ++i) g.values[i] = p[i];
  execute(g.values, h, w, FFTW_FORWARD);
  return g;
}

}  // namespace

Tensor spectral_scale(const Tensor& x, const Tensor& w_re, const Tensor& w_im) {
  check_spectral(x, w_re, w_im);
  const std::size_t h = x.dim(1), w = x.dim(2), plane = h * w;
  Tensor out(x.dims());
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    auto g = channel_spectrum(x, c);
    for (std::size_t i = 0; i < plane; ++i) g.values[i] *= Complex(w_re[i], w_im[i]);
    const auto back = idft2(g);
    std::copy(back.data().begin(), back.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(c * plane));
  }
  return out;
}

void spectral_scale_backward(const Tensor& x, const Tensor& w_re, const Tensor& w_im, const Tensor& grad_out,
                             Tensor* grad_x, Tensor* grad_w_re, Tensor* grad_w_im) {
  check_spectral(x, w_re, w_im);
  require_same_dims(x, grad_out, "spectral_scale_backward");
  const std::size_t h = x.dim(1), w = x.dim(2), plane = h * w;
  const double inv_n = 1.0 / static_cast<double>(plane);
  if (grad_x) *grad_x = Tensor(x.dims());
  if (grad_w_re) *grad_w_re = Tensor(w_re.dims());
  if (grad_w_im) *grad_w_im = Tensor(w_im.dims());
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    // G = dft2(g) / N is the adjoint image of g under Re(idft2(.)).
    auto gspec = channel_spectrum(grad_out, c);
    if (grad_w_re || grad_w_im) {
      const auto xspec = channel_spectrum(x, c);
      for (std::size_t i = 0; i < plane; ++i) {
        const Complex prod = std::conj(gspec.values[i] * inv_n) * xspec.values[i];
        if (grad_w_re) (*grad_w_re)[i] += prod.real();
        if (grad_w_im) (*grad_w_im)[i] -= prod.imag();
      }
    }
    if (grad_x) {
      for (std::size_t i = 0; i < plane; ++i) gspec.values[i] *= std::conj(Complex(w_re[i], w_im[i]));
      const auto back = idft2(gspec);
      std::copy(back.data().begin(), back.data().end(),
                grad_x->data().begin() + static_cast<std::ptrdiff_t>(c * plane));
    }
  }
}

// --- windowed attention ------------------------------------------------------

namespace {

void check_attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv, const Tensor& wo,
                     std::size_t window) {
  if (x.ndim() != 3) throw ShapeError("window_attention expects C x H x W");
  const Dims proj{x.dim(0), x.dim(0)};
  for (const Tensor* t : {&wq, &wk, &wv, &wo}) {
    if (t->dims() != proj) throw ShapeError("window_attention projections must be C x C");
  }
  if (window == 0 || x.dim(1) % window != 0 || x.dim(2) % window != 0) {
    throw ShapeError("window_attention: window " + std::to_string(window) + " does not tile " +
                     dims_to_string(x.dims()));
  }
}

// Gather the tokens of window (wi, wj) into a (window^2) x C matrix.
RowMat gather_window(const Tensor& x, std::size_t window, std::size_t wi, std::size_t wj) {
  const std::size_t ch = x.dim(0);
  RowMat tokens(static_cast<Eigen::Index>(window * window), static_cast<Eigen::Index>(ch));
  for (std::size_t a = 0; a < window; ++a) {
    for (std::size_t b = 0; b < window; ++b) {
      for (std::size_t c = 0; c < ch; ++c) {
        tokens(static_cast<Eigen::Index>(a * window + b), static_cast<Eigen::Index>(c)) =
            x.at(c, wi * window + a, wj * window + b);
      }
    }
  }
  return tokens;
}

void scatter_window(const RowMat& tokens, std::size_t window, std::size_t wi, std::size_t wj, Tensor& out) {
  for (std::size_t a = 0; a < window; ++a) {
    for (std::size_t b = 0; b < window; ++b) {
      for (std::size_t c = 0; c < out.dim(0); ++c) {
        out.at(c, wi * window + a, wj * window + b) +=
            tokens(static_cast<Eigen::Index>(a * window + b), static_cast<Eigen::Index>(c));
      }
    }
  }
}

RowMat softmax_rows(const RowMat& s) {
  RowMat a = s;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double m = a.row(i).maxCoeff();
    a.row(i) = (a.row(i).array() - m).exp();
    a.row(i) /= a.row(i).sum();
  }
  return a;
}

ConstRowMap as_matrix(const Tensor& t) {
  return ConstRowMap(t.data().data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}

}  // namespace

Tensor window_attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv, const Tensor& wo,
                        std::size_t window) {
  check_attention(x, wq, wk, wv, wo, window);
  const double scale = 1.0 / std::sqrt(static_cast<double>(x.dim(0)));
  Tensor out = x;
  for (std::size_t wi = 0; wi < x.dim(1) / window; ++wi) {
    for (std::size_t wj = 0; wj < x.dim(2) / window; ++wj) {
      const RowMat tokens = gather_window(x, window, wi, wj);
      const RowMat q = tokens * as_matrix(wq).transpose();
      const RowMat k = tokens * as_matrix(wk).transpose();
      const RowMat v = tokens * as_matrix(wv).transpose();
      const RowMat attn = softmax_rows(scale * q * k.transpose());
      const RowMat y = (attn * v) * as_matrix(wo).transpose();
      scatter_window(y, window, wi, wj, out);
    }
  }
  return out;
}

void window_attention_backward(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                               const Tensor& wo, std::size_t window, const Tensor& grad_out, Tensor* grad_x,
                               Tensor* grad_wq, Tensor* grad_wk, Tensor* grad_wv, Tensor* grad_wo) {
  check_attention(x, wq, wk, wv, wo, window);
  require_same_dims(x, grad_out, "window_attention_backward");
  const auto ch = static_cast<Eigen::Index>(x.dim(0));
  const double scale = 1.0 / std::sqrt(static_cast<double>(ch));
  RowMat dwq = RowMat::Zero(ch, ch), dwk = RowMat::Zero(ch, ch), dwv = RowMat::Zero(ch, ch),
         dwo = RowMat::Zero(ch, ch);
  if (grad_x) *grad_x = grad_out;  // residual path
  for (std::size_t wi = 0; wi < x.dim(1) / window; ++wi) {
    for (std::size_t wj = 0; wj < x.dim(2) / window; ++wj) {
      const RowMat tokens = gather_window(x, window, wi, wj);
      const RowMat dy = gather_window(grad_out, window, wi, wj);
      const RowMat q = tokens * as_matrix(wq).transpose();
      const RowMat k = tokens * as_matrix(wk).transpose();
      const RowMat v = tokens * as_matrix(wv).transpose();
      const RowMat attn = softmax_rows(scale * q * k.transpose());
      const RowMat o = attn * v;

      dwo += dy.transpose() * o;
      const RowMat d_o = dy * as_matrix(wo);
      const RowMat d_attn = d_o * v.transpose();
      const RowMat dv = attn.transpose() * d_o;
      RowMat ds = attn.cwiseProduct(d_attn);
      const Eigen::VectorXd row_dot = ds.rowwise().sum();
      ds = attn.cwiseProduct(d_attn.colwise() - row_dot) * scale;
      const RowMat dq = ds * k;
      const RowMat dk = ds.transpose() * q;
      dwq += dq.transpose() * tokens;
      dwk += dk.transpose() * tokens;
      dwv += dv.transpose() * tokens;
      if (grad_x) {
        const RowMat dx = dq * as_matrix(wq) + dk * as_matrix(wk) + dv * as_matrix(wv);
        scatter_window(dx, window, wi, wj, *grad_x);
      }
    }
  }
  auto to_tensor = [&](const RowMat& m) {
    return Tensor({x.dim(0), x.dim(0)}, std::vector<double>(m.data(), m.data() + m.size()));
  };
  if (grad_wq) *grad_wq = to_tensor(dwq);
  if (grad_wk) *grad_wk = to_tensor(dwk);
  if (grad_wv) *grad_wv = to_tensor(dwv);
  if (grad_wo) *grad_wo = to_tensor(dwo);
}

}  // namespace promptct::kernels
