#include "promptct/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "binio.hpp"
#include "promptct/errors.hpp"

namespace promptct {

std::size_t dims_product(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

std::string dims_to_string(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Dims dims, double fill) : dims_(std::move(dims)) {
  for (auto d : dims_) {
    if (d == 0) throw ShapeError("tensor dims must be positive, got " + dims_to_string(dims_));
  }
  data_.assign(dims_product(dims_), fill);
}

Tensor::Tensor(Dims dims, std::vector<double> data) : dims_(std::move(dims)), data_(std::move(data)) {
  for (auto d : dims_) {
    if (d == 0) throw ShapeError("tensor dims must be positive, got " + dims_to_string(dims_));
  }
  if (dims_product(dims_) != data_.size()) {
    throw ShapeError("tensor payload of " + std::to_string(data_.size()) + " values does not match dims " +
                     dims_to_string(dims_));
  }
}

Tensor Tensor::reshaped(Dims dims) const {
  if (dims_product(dims) != data_.size()) {
    throw ShapeError("cannot reshape " + dims_to_string(dims_) + " to " + dims_to_string(dims));
  }
  return Tensor(std::move(dims), data_);
}

bool Tensor::all_finite() const noexcept {
  // v * 0 is 0 for finite v and NaN otherwise; independent lanes vectorise.
  double lanes[8] = {};
  const std::size_t n = data_.size(), body = n - n % 8;
  for (std::size_t i = 0; i < body; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) lanes[j] += data_[i + j] * 0.0;
  }
  double acc = 0.0;
  for (std::size_t i = body; i < n; ++i) acc += data_[i] * 0.0;
  for (double v : lanes) acc += v;
  return acc == 0.0;
}

void Tensor::fill(double v) noexcept { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& rhs) {
  require_same_dims(*this, rhs, "operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += rhs.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& rhs) {
  require_same_dims(*this, rhs, "operator-=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= rhs.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) noexcept {
  for (auto& v : data_) v *= s;
  return *this;
}

Tensor operator+(Tensor lhs, const Tensor& rhs) { return lhs += rhs; }
Tensor operator-(Tensor lhs, const Tensor& rhs) { return lhs -= rhs; }
Tensor operator*(Tensor lhs, double s) { return lhs *= s; }
Tensor operator*(double s, Tensor rhs) { return rhs *= s; }

void require_same_dims(const Tensor& a, const Tensor& b, const char* what) {
  if (a.dims() != b.dims()) {
    throw ShapeError(std::string(what) + ": dims " + dims_to_string(a.dims()) + " vs " +
                     dims_to_string(b.dims()));
  }
}

double dot(const Tensor& a, const Tensor& b) {
  require_same_dims(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

// ---------------------------------------------------------------------------

void write_tensor(std::ostream& out, const Tensor& t) {
  if (t.ndim() > 255) throw ShapeError("LIPT supports at most 255 dims");
  binio::put_magic(out, "LIPT");
  binio::put<std::uint32_t>(out, kTensorFileVersion);
  binio::put<std::uint8_t>(out, 0);
  binio::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.ndim()));
  for (auto d : t.dims()) binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  std::vector<float> payload(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) payload[i] = static_cast<float>(t[i]);
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
}

Tensor read_tensor(std::istream& in) {
  binio::expect_magic(in, "LIPT");
  const auto version = binio::get<std::uint32_t>(in, "LIPT version");
  if (version != kTensorFileVersion) {
    throw CorruptFileError("unsupported LIPT version " + std::to_string(version));
  }
  const auto dtype = binio::get<std::uint8_t>(in, "LIPT dtype");
  if (dtype != 0) throw CorruptFileError("unsupported LIPT dtype " + std::to_string(dtype));
  const auto ndim = binio::get<std::uint8_t>(in, "LIPT ndim");
  if (ndim == 0) throw CorruptFileError("LIPT tensor with zero dims");
  Dims dims(ndim);
  for (auto& d : dims) {
    d = binio::get<std::uint32_t>(in, "LIPT dims");
    if (d == 0) throw CorruptFileError("LIPT tensor with a zero-length dim");
  }
  std::vector<float> payload(dims_product(dims));
  binio::read_exact(in, reinterpret_cast<char*>(payload.data()), payload.size() * sizeof(float),
                    "LIPT payload");
  return Tensor(std::move(dims), std::vector<double>(payload.begin(), payload.end()));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  write_tensor(out, t);
  if (!out) throw IoError("write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  try {
    return read_tensor(in);
  } catch (const CorruptFileError& e) {
    throw CorruptFileError(path.string() + ": " + e.what());
  }
}

Tensor round_to_f32(const Tensor& t) {
  Tensor out = t;
  for (auto& v : out.data()) v = static_cast<double>(static_cast<float>(v));
  return out;
}

}  // namespace promptct
