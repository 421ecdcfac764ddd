#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace promptct {

using Dims = std::vector<std::size_t>;

std::size_t dims_product(const Dims& dims);
std::string dims_to_string(const Dims& dims);

/// Dense row-major array of doubles.
///
/// Every quantity in the pipeline (images, sinograms, masks, filter banks,
/// feature maps) is a Tensor. Images are H x W, feature maps C x H x W and
/// conv kernels O x C x k x k.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Dims dims, double fill = 0.0);
  Tensor(Dims dims, std::vector<double> data);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.dims_); }
  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t ndim() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * dims_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * dims_[1] + j]; }
  double& at(std::size_t c, std::size_t i, std::size_t j) {
    return data_[(c * dims_[1] + i) * dims_[2] + j];
  }
  double at(std::size_t c, std::size_t i, std::size_t j) const {
    return data_[(c * dims_[1] + i) * dims_[2] + j];
  }

  /// Same payload under new dims; product must match.
  Tensor reshaped(Dims dims) const;

  bool all_finite() const noexcept;
  void fill(double v) noexcept;

  Tensor& operator+=(const Tensor& rhs);
  Tensor& operator-=(const Tensor& rhs);
  Tensor& operator*=(double s) noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Dims dims_;
  std::vector<double> data_;
};

Tensor operator+(Tensor lhs, const Tensor& rhs);
Tensor operator-(Tensor lhs, const Tensor& rhs);
Tensor operator*(Tensor lhs, double s);
Tensor operator*(double s, Tensor rhs);

void require_same_dims(const Tensor& a, const Tensor& b, const char* what);

double dot(const Tensor& a, const Tensor& b);
double norm2(const Tensor& a);
double sum(const Tensor& a);
double max_abs(const Tensor& a);

// ---------------------------------------------------------------------------
// LIPT tensor files: "LIPT", u32 version=1, u8 dtype (0 = f32 LE), u8 ndim,
// ndim x u32 dims, row-major payload. Values are rounded to f32 on write.

inline constexpr std::uint32_t kTensorFileVersion = 1;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Round every entry through f32, the storage precision of LIPT files.
Tensor round_to_f32(const Tensor& t);

}  // namespace promptct
