#include "promptct/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "promptct/errors.hpp"

namespace promptct {

double rmse(const Tensor& x, const Tensor& ref) {
  require_same_dims(x, ref, "rmse");
  if (x.size() == 0) throw ShapeError("rmse: empty images");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - ref[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(x.size()));
}

double psnr(const Tensor& x, const Tensor& ref) {
  const double r = rmse(x, ref);
  if (r == 0.0) return std::numeric_limits<double>::infinity();
  return -20.0 * std::log10(r);
}

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;

// Separable 'valid' filtering with a normalised Gaussian.
Tensor gaussian_valid(const Tensor& img) {
  static const std::vector<double> g = [] {
    std::vector<double> w(kWindow);
    double total = 0.0;
    for (int i = 0; i < kWindow; ++i) {
      const double d = i - kWindow / 2;
      w[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
      total += w[i];
    }
    for (auto& v : w) v /= total;
    return w;
  }();
  const std::size_t h = img.dim(0), w = img.dim(1);
  const std::size_t oh = h - kWindow + 1, ow = w - kWindow + 1;
  Tensor rows({h, ow});
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < ow; ++j) {
      double s = 0.0;
      for (int t = 0; t < kWindow; ++t) s += g[t] * img.at(i, j + t);
      rows.at(i, j) = s;
    }
  }
  Tensor out({oh, ow});
  for (std::size_t i = 0; i < oh; ++i) {
    for (std::size_t j = 0; j < ow; ++j) {
      double s = 0.0;
      for (int t = 0; t < kWindow; ++t) s += g[t] * rows.at(i + t, j);
      out.at(i, j) = s;
    }
  }
  return out;
}

}  // namespace

double ssim(const Tensor& x, const Tensor& ref) {
  require_same_dims(x, ref, "ssim");
  if (x.ndim() != 2 || x.dim(0) < kWindow || x.dim(1) < kWindow) {
    throw ShapeError("ssim: images must be 2D and at least 11 x 11");
  }
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  Tensor xx = x, yy = ref, xy = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = ref[i] * ref[i];
    xy[i] = x[i] * ref[i];
  }
  const Tensor mx = gaussian_valid(x), my = gaussian_valid(ref);
  const Tensor sxx = gaussian_valid(xx), syy = gaussian_valid(yy), sxy = gaussian_valid(xy);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cov = sxy[i] - mx[i] * my[i];
    total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

std::string format_metric(double v, int precision) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

ImageMetrics evaluate(const Tensor& x, const Tensor& ref) { return {psnr(x, ref), ssim(x, ref), rmse(x, ref)}; }

void MetricAccumulator::add(const ImageMetrics& m) { values_.push_back(m); }

ImageMetrics MetricAccumulator::mean() const {
  ImageMetrics m;
  if (values_.empty()) return m;
  for (const auto& v : values_) {
    m.psnr += v.psnr;
    m.ssim += v.ssim;
    m.rmse += v.rmse;
  }
  const double n = static_cast<double>(values_.size());
  return {m.psnr / n, m.ssim / n, m.rmse / n};
}

ImageMetrics MetricAccumulator::stddev() const {
  ImageMetrics s;
  if (values_.size() < 2) return s;
  const auto mu = mean();
  for (const auto& v : values_) {
    s.psnr += (v.psnr - mu.psnr) * (v.psnr - mu.psnr);
    s.ssim += (v.ssim - mu.ssim) * (v.ssim - mu.ssim);
    s.rmse += (v.rmse - mu.rmse) * (v.rmse - mu.rmse);
  }
  const double n = static_cast<double>(values_.size() - 1);
  return {std::sqrt(s.psnr / n), std::sqrt(s.ssim / n), std::sqrt(s.rmse / n)};
}

}  // namespace promptct
