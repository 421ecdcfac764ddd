#pragma once

// Minimal reverse-mode differentiation over a closed set of primitives.
//
// A Tape records every primitive applied to tracked variables in forward
// order; Tape::backward replays the adjoints in exact reverse order and
// accumulates d(loss)/d(value) into the bound Parameters. A tape constructed
// with recording disabled evaluates the same primitives without keeping any
// graph, which is how inference runs.

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "promptct/tensor.hpp"

namespace promptct {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
};

/// Named collection of learnable tensors. Storage is a deque, so references
/// handed out by add()/get() stay valid as parameters are appended.
class ModelParams {
 public:
  Parameter& add(std::string name, Tensor value, bool trainable = true);

  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;
  bool contains(std::string_view name) const { return find(name) != nullptr; }

  std::deque<Parameter>& items() noexcept { return items_; }
  const std::deque<Parameter>& items() const noexcept { return items_; }
  std::vector<std::string> names() const;
  std::size_t size() const noexcept { return items_.size(); }

  void zero_grad();
  /// Total scalar count; frozen tensors are included unless `trainable_only`.
  std::size_t scalar_count(bool trainable_only = false) const;

 private:
  std::deque<Parameter> items_;
};

namespace ad {

enum class Op : std::uint8_t {
  Constant,
  Param,
  Conv2d,
  Conv2dAdjoint,
  Bias,
  Relu,
  Clamp,
  SoftThreshold,
  Add,
  Sub,
  Mul,
  Scale,
  MulScalar,
  ChannelScale,
  FullyConnected,
  GlobalAvgPool,
  Linear,
  LinearAdjoint,
  Reshape,
  SumAbs,
  SumSquares,
  Sigmoid,
  Affine,
  SpectralScale,
  WindowAttention,
};

const char* op_name(Op op);

/// A fixed linear map with an exact transpose (e.g. the fan-beam projector).
class LinearOperator {
 public:
  virtual ~LinearOperator() = default;
  virtual Tensor apply(const Tensor& x) const = 0;
  virtual Tensor apply_adjoint(const Tensor& y) const = 0;
};

class Tape;
struct Node;

class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Dims& dims() const { return value().dims(); }
  bool valid() const noexcept { return node_ != nullptr; }
  bool requires_grad() const noexcept;
  Tape* tape() const noexcept;

 private:
  friend class Tape;
  friend struct Access;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  bool recording() const noexcept { return record_; }

  Var constant(Tensor value);
  /// Leaf bound to a parameter; backward() accumulates into `p.grad`.
  /// Frozen parameters behave as constants.
  Var param(Parameter& p);

  /// Replays adjoints from a scalar loss. Parameter gradients accumulate
  /// across calls; node gradients do not.
  void backward(const Var& loss);

  /// Drops the recorded graph. Variables created before the reset can no
  /// longer be used with this tape.
  void reset();

  std::size_t size() const noexcept { return nodes_.size(); }
  std::vector<Op> recorded_ops() const;
  std::uint64_t generation() const noexcept { return generation_; }

 private:
  friend struct Access;
  Var record(std::shared_ptr<Node> node);

  bool record_;
  std::uint64_t generation_ = 0;
  std::vector<std::shared_ptr<Node>> nodes_;
};

void backward(const Var& loss);

// --- primitives --------------------------------------------------------------

Var conv2d(const Var& x, const Var& kernels, std::size_t stride = 1);
Var conv2d_adjoint(const Var& y, const Var& kernels);
Var add_bias(const Var& x, const Var& bias);
Var relu(const Var& x);
Var clamp(const Var& x, double lo, double hi);
Var soft_threshold(const Var& u, const Var& e);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);
/// x * s for a one-element `s`.
Var mul_scalar(const Var& x, const Var& s);
/// out[c,:,:] = x[c,:,:] * p[c].
Var channel_scale(const Var& x, const Var& p);
Var fully_connected(const Var& x, const Var& weights, const Var& bias);
Var global_avg_pool(const Var& x);
/// The operator must outlive the tape.
Var linear(const Var& x, const LinearOperator& op);
Var linear_adjoint(const Var& y, const LinearOperator& op);
Var reshape(const Var& x, Dims dims);
Var sum_abs(const Var& x);
Var sum_squares(const Var& x);
Var sigmoid(const Var& x);
/// a * x + b with scalar constants.
Var affine(const Var& x, double a, double b);
Var spectral_scale(const Var& x, const Var& w_re, const Var& w_im);
Var window_attention(const Var& x, const Var& wq, const Var& wk, const Var& wv, const Var& wo,
                     std::size_t window);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }

}  // namespace ad

// --- finite-difference verification -------------------------------------------

struct FiniteDiffEntry {
  std::string name;
  std::size_t count = 0;
  double rel_err = 0.0;       // ||fd - analytic|| / max(||fd||, ||analytic||, floor)
  double max_abs_diff = 0.0;
  bool pass = false;
};

struct FiniteDiffReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::vector<FiniteDiffEntry> entries;
  std::string message;
};

struct FiniteDiffOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::size_t max_parameters = 50000;
  double norm_floor = 1e-8;
  /// Applied to the analytic gradients before comparison (negative controls).
  std::function<void(ModelParams&)> tamper;
};

using LossBuilder = std::function<ad::Var(ad::Tape&)>;

/// Central differences on every trainable scalar versus Tape::backward.
/// `params` is restored bit-exactly on return; its grads hold the analytic
/// gradient.
FiniteDiffReport finite_diff_check(const LossBuilder& model, ModelParams& params,
                                   const FiniteDiffOptions& options = {});

}  // namespace promptct
