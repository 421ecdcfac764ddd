#pragma once

#include <string>
#include <vector>

#include "promptct/tensor.hpp"

namespace promptct {

/// Peak is fixed at 1.0 for all metrics.
double rmse(const Tensor& x, const Tensor& ref);
/// -20 log10(rmse); +infinity for identical images.
double psnr(const Tensor& x, const Tensor& ref);
/// Gaussian-window SSIM (11 x 11, sigma 1.5, K1 = 0.01, K2 = 0.03, L = 1),
/// averaged over the valid (unpadded) region.
double ssim(const Tensor& x, const Tensor& ref);

/// "inf" for infinite values, fixed precision otherwise.
std::string format_metric(double v, int precision = 4);

struct ImageMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
  double rmse = 0.0;
};

ImageMetrics evaluate(const Tensor& x, const Tensor& ref);

/// Running mean / standard deviation of per-image metrics.
class MetricAccumulator {
 public:
  void add(const ImageMetrics& m);
  std::size_t count() const noexcept { return values_.size(); }
  ImageMetrics mean() const;
  ImageMetrics stddev() const;

 private:
  std::vector<ImageMetrics> values_;
};

}  // namespace promptct
