#include "promptct/autodiff.hpp"

#include <algorithm>
#include <cmath>

#include "promptct/errors.hpp"
#include "promptct/kernels.hpp"

namespace promptct {

// --- ModelParams ---------------------------------------------------------------

Parameter& ModelParams::add(std::string name, Tensor value, bool trainable) {
  if (find(name)) throw ArgumentError("duplicate parameter name '" + name + "'");
  Tensor grad = Tensor::zeros_like(value);
  items_.push_back(Parameter{std::move(name), std::move(value), std::move(grad), trainable});
  return items_.back();
}

Parameter* ModelParams::find(std::string_view name) {
  for (auto& p : items_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

const Parameter* ModelParams::find(std::string_view name) const {
  for (const auto& p : items_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

Parameter& ModelParams::get(std::string_view name) {
  if (auto* p = find(name)) return *p;
  throw ArgumentError("unknown parameter '" + std::string(name) + "'");
}

const Parameter& ModelParams::get(std::string_view name) const {
  if (const auto* p = find(name)) return *p;
  throw ArgumentError("unknown parameter '" + std::string(name) + "'");
}

std::vector<std::string> ModelParams::names() const {
  std::vector<std::string> out;
  out.reserve(items_.size());
  for (const auto& p : items_) out.push_back(p.name);
  return out;
}

void ModelParams::zero_grad() {
  for (auto& p : items_) p.grad.fill(0.0);
}

std::size_t ModelParams::scalar_count(bool trainable_only) const {
  std::size_t n = 0;
  for (const auto& p : items_) {
    if (!trainable_only || p.trainable) n += p.value.size();
  }
  return n;
}

namespace ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::Constant: return "constant";
    case Op::Param: return "param";
    case Op::Conv2d: return "conv2d";
    case Op::Conv2dAdjoint: return "conv2d_adjoint";
    case Op::Bias: return "bias";
    case Op::Relu: return "relu";
    case Op::Clamp: return "clamp";
    case Op::SoftThreshold: return "soft_threshold";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::MulScalar: return "mul_scalar";
    case Op::ChannelScale: return "channel_scale";
    case Op::FullyConnected: return "fully_connected";
    case Op::GlobalAvgPool: return "global_avg_pool";
    case Op::Linear: return "linear";
    case Op::LinearAdjoint: return "linear_adjoint";
    case Op::Reshape: return "reshape";
    case Op::SumAbs: return "sum_abs";
    case Op::SumSquares: return "sum_squares";
    case Op::Sigmoid: return "sigmoid";
    case Op::Affine: return "affine";
    case Op::SpectralScale: return "spectral_scale";
    case Op::WindowAttention: return "window_attention";
  }
  return "?";
}

struct Node {
  Op op = Op::Constant;
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  Tape* tape = nullptr;
  std::uint64_t generation = 0;
  Parameter* param = nullptr;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
};

namespace {

void accumulate(Node& n, const Tensor& g) {
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

void accumulate(Node& n, Tensor&& g) {
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = std::move(g);
  } else {
    n.grad += g;
  }
}

}  // namespace

struct Access {
  static const std::shared_ptr<Node>& node(const Var& v) {
    if (!v.node_) throw ConsistencyError("use of an empty variable");
    return v.node_;
  }

  // Builds a node for `op` over `inputs`. The backward closure is installed
  // only when the tape records and some input needs a gradient.
  static Var make(Op op, Tensor value, std::initializer_list<const Var*> inputs,
                  std::function<void(Node&)> backward) {
    Tape* tape = nullptr;
    std::uint64_t generation = 0;
    for (const Var* in : inputs) {
      const auto& n = node(*in);
      if (!tape) {
        tape = n->tape;
        generation = n->generation;
      } else if (n->tape != tape) {
        throw ConsistencyError(std::string(op_name(op)) + ": operands belong to different tapes");
      }
      if (n->generation != generation || n->generation != tape->generation_) {
        throw ConsistencyError(std::string(op_name(op)) + ": operand recorded before a tape reset");
      }
    }
    if (!value.all_finite()) {
      throw NumericError(std::string(op_name(op)) + " produced a non-finite value");
    }
    auto n = std::make_shared<Node>();
    n->op = op;
    n->value = std::move(value);
    n->tape = tape;
    n->generation = generation;
    if (tape->record_) {
      for (const Var* in : inputs) n->requires_grad = n->requires_grad || node(*in)->requires_grad;
      if (n->requires_grad) {
        for (const Var* in : inputs) n->inputs.push_back(node(*in));
        n->backward = std::move(backward);
      }
    }
    return tape->record(std::move(n));
  }

  static Node& in(Node& n, std::size_t i) { return *n.inputs[i]; }
};

const Tensor& Var::value() const { return Access::node(*this)->value; }
bool Var::requires_grad() const noexcept { return node_ && node_->requires_grad; }
Tape* Var::tape() const noexcept { return node_ ? node_->tape : nullptr; }

Tape::~Tape() = default;

Var Tape::record(std::shared_ptr<Node> node) {
  if (record_) nodes_.push_back(node);
  return Var(std::move(node));
}

Var Tape::constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->op = Op::Constant;
  n->value = std::move(value);
  n->tape = this;
  n->generation = generation_;
  return record(std::move(n));
}

Var Tape::param(Parameter& p) {
  auto n = std::make_shared<Node>();
  n->op = Op::Param;
  n->value = p.value;
  n->tape = this;
  n->generation = generation_;
  if (record_ && p.trainable) {
    n->requires_grad = true;
    n->param = &p;
  }
  return record(std::move(n));
}

void Tape::backward(const Var& loss) {
  const auto& root = Access::node(loss);
  if (!record_) throw ConsistencyError("backward on a tape that does not record");
  if (root->tape != this || root->generation != generation_) {
    throw ConsistencyError("backward: loss was not recorded on the current tape");
  }
  if (root->value.size() != 1) {
    throw ConsistencyError("backward: loss must be a scalar, got " + dims_to_string(root->value.dims()));
  }
  for (auto& n : nodes_) n->grad = Tensor();
  if (!root->requires_grad) return;  // constant loss: nothing to propagate
  root->grad = Tensor(root->value.dims(), 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(n);
    if (n.param) {
      if (n.param->grad.dims() != n.param->value.dims()) n.param->grad = Tensor::zeros_like(n.param->value);
      n.param->grad += n.grad;
    }
  }
  for (auto& n : nodes_) n->grad = Tensor();
}

void Tape::reset() {
  nodes_.clear();
  ++generation_;
}

std::vector<Op> Tape::recorded_ops() const {
  std::vector<Op> ops;
  ops.reserve(nodes_.size());
  for (const auto& n : nodes_) ops.push_back(n->op);
  return ops;
}

void backward(const Var& loss) {
  Tape* tape = loss.tape();
  if (!tape) throw ConsistencyError("backward on an empty variable");
  tape->backward(loss);
}

// --- primitives -----------------------------------------------------------------

Var conv2d(const Var& x, const Var& kernels, std::size_t stride) {
  auto out = kernels::conv2d(x.value(), kernels.value(), stride);
  return Access::make(Op::Conv2d, std::move(out), {&x, &kernels}, [stride](Node& n) {
    Node& x = Access::in(n, 0);
    Node& k = Access::in(n, 1);
    if (x.requires_grad) {
      accumulate(x, kernels::conv2d_adjoint(n.grad, k.value, x.value.dim(1), x.value.dim(2), stride));
    }
    if (k.requires_grad) accumulate(k, kernels::conv2d_kernel_grad(x.value, n.grad, k.value.dim(2), stride));
  });
}

Var conv2d_adjoint(const Var& y, const Var& kernels) {
  auto out = kernels::conv2d_adjoint(y.value(), kernels.value());
  return Access::make(Op::Conv2dAdjoint, std::move(out), {&y, &kernels}, [](Node& n) {
    Node& y = Access::in(n, 0);
    Node& k = Access::in(n, 1);
    if (y.requires_grad) accumulate(y, kernels::conv2d(n.grad, k.value));
    // <g, K^T y> = <K g, y>
    if (k.requires_grad) accumulate(k, kernels::conv2d_kernel_grad(n.grad, y.value, k.value.dim(2)));
  });
}

Var add_bias(const Var& x, const Var& bias) {
  Tensor out = x.value();
  kernels::add_channel_bias(out, bias.value());
  return Access::make(Op::Bias, std::move(out), {&x, &bias}, [](Node& n) {
    Node& b = Access::in(n, 1);
    if (b.requires_grad) accumulate(b, kernels::channel_sums(n.grad).reshaped(b.value.dims()));
    accumulate(Access::in(n, 0), std::move(n.grad));
  });
}

Var relu(const Var& x) {
  return Access::make(Op::Relu, kernels::relu(x.value()), {&x}, [](Node& n) {
    Node& x = Access::in(n, 0);
    Tensor g = std::move(n.grad);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!(x.value[i] > 0.0)) g[i] = 0.0;
    }
    accumulate(x, std::move(g));
  });
}

Var clamp(const Var& x, double lo, double hi) {
  return Access::make(Op::Clamp, kernels::clamp(x.value(), lo, hi), {&x}, [lo, hi](Node& n) {
    Node& x = Access::in(n, 0);
    Tensor g = std::move(n.grad);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x.value[i] < lo || x.value[i] > hi) g[i] = 0.0;
    }
    accumulate(x, std::move(g));
  });
}

Var soft_threshold(const Var& u, const Var& e) {
  auto out = kernels::soft_threshold(u.value(), e.value());
  return Access::make(Op::SoftThreshold, std::move(out), {&u, &e}, [](Node& n) {
    Node& u = Access::in(n, 0);
    Node& e = Access::in(n, 1);
    // Subgradient: zero on the closed dead zone |u| <= e.
    Tensor ge = n.grad;
    Tensor gu = std::move(n.grad);
    for (std::size_t i = 0; i < gu.size(); ++i) {
      if (std::abs(u.value[i]) <= e.value[i]) {
        gu[i] = 0.0;
        ge[i] = 0.0;
      } else {
        ge[i] = u.value[i] > 0.0 ? -gu[i] : gu[i];
      }
    }
    accumulate(u, std::move(gu));
    accumulate(e, std::move(ge));
  });
}

Var add(const Var& a, const Var& b) {
  return Access::make(Op::Add, a.value() + b.value(), {&a, &b}, [](Node& n) {
    accumulate(Access::in(n, 0), n.grad);
    accumulate(Access::in(n, 1), std::move(n.grad));
  });
}

Var sub(const Var& a, const Var& b) {
  return Access::make(Op::Sub, a.value() - b.value(), {&a, &b}, [](Node& n) {
    accumulate(Access::in(n, 0), n.grad);
    n.grad *= -1.0;
    accumulate(Access::in(n, 1), std::move(n.grad));
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_dims(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return Access::make(Op::Mul, std::move(out), {&a, &b}, [](Node& n) {
    Node& a = Access::in(n, 0);
    Node& b = Access::in(n, 1);
    if (a.requires_grad) {
      Tensor g = n.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= b.value[i];
      accumulate(a, std::move(g));
    }
    if (b.requires_grad) {
      Tensor g = n.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= a.value[i];
      accumulate(b, std::move(g));
    }
  });
}

Var scale(const Var& x, double s) {
  return Access::make(Op::Scale, x.value() * s, {&x}, [s](Node& n) {
    n.grad *= s;
    accumulate(Access::in(n, 0), std::move(n.grad));
  });
}

Var mul_scalar(const Var& x, const Var& s) {
  if (s.value().size() != 1) throw ShapeError("mul_scalar: scale must have one element");
  const double sv = s.value()[0];
  return Access::make(Op::MulScalar, x.value() * sv, {&x, &s}, [](Node& n) {
    Node& x = Access::in(n, 0);
    Node& s = Access::in(n, 1);
    if (x.requires_grad) accumulate(x, n.grad * s.value[0]);
    if (s.requires_grad) accumulate(s, Tensor(s.value.dims(), dot(n.grad, x.value)));
  });
}

Var channel_scale(const Var& x, const Var& p) {
  const Tensor& xv = x.value();
  if (xv.ndim() != 3 || p.value().size() != xv.dim(0)) {
    throw ShapeError("channel_scale: " + dims_to_string(xv.dims()) + " vs " + dims_to_string(p.value().dims()));
  }
  const std::size_t plane = xv.dim(1) * xv.dim(2);
  Tensor out = xv;
  for (std::size_t c = 0; c < xv.dim(0); ++c) {
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] *= p.value()[c];
  }
  return Access::make(Op::ChannelScale, std::move(out), {&x, &p}, [plane](Node& n) {
    Node& x = Access::in(n, 0);
    Node& p = Access::in(n, 1);
    if (x.requires_grad) {
      Tensor g = n.grad;
      for (std::size_t c = 0; c < p.value.size(); ++c) {
        for (std::size_t i = 0; i < plane; ++i) g[c * plane + i] *= p.value[c];
      }
      accumulate(x, std::move(g));
    }
    if (p.requires_grad) {
      Tensor g(p.value.dims());
      for (std::size_t c = 0; c < p.value.size(); ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += n.grad[c * plane + i] * x.value[c * plane + i];
        g[c] = s;
      }
      accumulate(p, std::move(g));
    }
  });
}

Var fully_connected(const Var& x, const Var& weights, const Var& bias) {
  auto out = kernels::fully_connected(x.value(), weights.value(), bias.value());
  return Access::make(Op::FullyConnected, std::move(out), {&x, &weights, &bias}, [](Node& n) {
    Node& x = Access::in(n, 0);
    Node& w = Access::in(n, 1);
    Node& b = Access::in(n, 2);
    const std::size_t rows = w.value.dim(0), cols = w.value.dim(1);
    if (x.requires_grad) {
      Tensor g(x.value.dims());
      for (std::size_t m = 0; m < rows; ++m) {
        for (std::size_t k = 0; k < cols; ++k) g[k] += w.value.at(m, k) * n.grad[m];
      }
      accumulate(x, std::move(g));
    }
    if (w.requires_grad) {
      Tensor g(w.value.dims());
      for (std::size_t m = 0; m < rows; ++m) {
        for (std::size_t k = 0; k < cols; ++k) g.at(m, k) = n.grad[m] * x.value[k];
      }
      accumulate(w, std::move(g));
    }
    if (b.requires_grad) accumulate(b, n.grad.reshaped(b.value.dims()));
  });
}

Var global_avg_pool(const Var& x) {
  return Access::make(Op::GlobalAvgPool, kernels::global_avg_pool(x.value()), {&x}, [](Node& n) {
    Node& x = Access::in(n, 0);
    const std::size_t plane = x.value.dim(1) * x.value.dim(2);
    Tensor g(x.value.dims());
    for (std::size_t c = 0; c < x.value.dim(0); ++c) {
      const double v = n.grad[c] / static_cast<double>(plane);
      for (std::size_t i = 0; i < plane; ++i) g[c * plane + i] = v;
    }
    accumulate(x, std::move(g));
  });
}

Var linear(const Var& x, const LinearOperator& op) {
  return Access::make(Op::Linear, op.apply(x.value()), {&x},
                      [&op](Node& n) { accumulate(Access::in(n, 0), op.apply_adjoint(n.grad)); });
}

Var linear_adjoint(const Var& y, const LinearOperator& op) {
  return Access::make(Op::LinearAdjoint, op.apply_adjoint(y.value()), {&y},
                      [&op](Node& n) { accumulate(Access::in(n, 0), op.apply(n.grad)); });
}

Var reshape(const Var& x, Dims dims) {
  return Access::make(Op::Reshape, x.value().reshaped(std::move(dims)), {&x}, [](Node& n) {
    Node& x = Access::in(n, 0);
    accumulate(x, n.grad.reshaped(x.value.dims()));
  });
}

Var sum_abs(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += std::abs(v);
  return Access::make(Op::SumAbs, Tensor::scalar(s), {&x}, [](Node& n) {
    Node& x = Access::in(n, 0);
    Tensor g(x.value.dims());
    const double up = n.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = x.value[i] > 0.0 ? up : (x.value[i] < 0.0 ? -up : 0.0);
    accumulate(x, std::move(g));
  });
}

Var sum_squares(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v * v;
  return Access::make(Op::SumSquares, Tensor::scalar(s), {&x}, [](Node& n) {
    Node& x = Access::in(n, 0);
    accumulate(x, x.value * (2.0 * n.grad[0]));
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = 1.0 / (1.0 + std::exp(-v));
  return Access::make(Op::Sigmoid, std::move(out), {&x}, [](Node& n) {
    Tensor g = n.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= n.value[i] * (1.0 - n.value[i]);
    accumulate(Access::in(n, 0), std::move(g));
  });
}

Var affine(const Var& x, double a, double b) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = a * v + b;
  return Access::make(Op::Affine, std::move(out), {&x}, [a](Node& n) { accumulate(Access::in(n, 0), n.grad * a); });
}

Var spectral_scale(const Var& x, const Var& w_re, const Var& w_im) {
  auto out = kernels::spectral_scale(x.value(), w_re.value(), w_im.value());
  return Access::make(Op::SpectralScale, std::move(out), {&x, &w_re, &w_im}, [](Node& n) {
    Node& x = Access::in(n, 0);
    Node& wr = Access::in(n, 1);
    Node& wi = Access::in(n, 2);
    Tensor gx, gr, gi;
    kernels::spectral_scale_backward(x.value, wr.value, wi.value, n.grad, x.requires_grad ? &gx : nullptr,
                                     wr.requires_grad ? &gr : nullptr, wi.requires_grad ? &gi : nullptr);
    if (x.requires_grad) accumulate(x, std::move(gx));
    if (wr.requires_grad) accumulate(wr, std::move(gr));
    if (wi.requires_grad) accumulate(wi, std::move(gi));
  });
}

Var window_attention(const Var& x, const Var& wq, const Var& wk, const Var& wv, const Var& wo,
                     std::size_t window) {
  auto out = kernels::window_attention(x.value(), wq.value(), wk.value(), wv.value(), wo.value(), window);
  return Access::make(Op::WindowAttention, std::move(out), {&x, &wq, &wk, &wv, &wo}, [window](Node& n) {
    Node& x = Access::in(n, 0);
    Node& q = Access::in(n, 1);
    Node& k = Access::in(n, 2);
    Node& v = Access::in(n, 3);
    Node& o = Access::in(n, 4);
    Tensor gx, gq, gk, gv, go;
    kernels::window_attention_backward(x.value, q.value, k.value, v.value, o.value, window, n.grad,
                                       x.requires_grad ? &gx : nullptr, q.requires_grad ? &gq : nullptr,
                                       k.requires_grad ? &gk : nullptr, v.requires_grad ? &gv : nullptr,
                                       o.requires_grad ? &go : nullptr);
    if (x.requires_grad) accumulate(x, std::move(gx));
    if (q.requires_grad) accumulate(q, std::move(gq));
    if (k.requires_grad) accumulate(k, std::move(gk));
    if (v.requires_grad) accumulate(v, std::move(gv));
    if (o.requires_grad) accumulate(o, std::move(go));
  });
}

}  // namespace ad

// --- finite differences ------------------------------------------------------------

namespace {

double evaluate_loss(const LossBuilder& model) {
  ad::Tape tape(false);
  const auto loss = model(tape);
  if (loss.value().size() != 1) throw ConsistencyError("finite_diff_check: model must return a scalar");
  return loss.value()[0];
}

}  // namespace

FiniteDiffReport finite_diff_check(const LossBuilder& model, ModelParams& params, const FiniteDiffOptions& options) {
  FiniteDiffReport report;
  const std::size_t count = params.scalar_count(true);
  if (count > options.max_parameters) {
    report.pass = false;
    report.message = "model has " + std::to_string(count) + " trainable scalars, limit is " +
                     std::to_string(options.max_parameters);
    return report;
  }

  params.zero_grad();
  {
    ad::Tape tape;
    const auto loss = model(tape);
    tape.backward(loss);
  }
  if (options.tamper) options.tamper(params);

  report.pass = true;
  for (auto& p : params.items()) {
    if (!p.trainable) continue;
    Tensor numeric = Tensor::zeros_like(p.value);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + options.step;
      const double up = evaluate_loss(model);
      p.value[i] = saved - options.step;
      const double down = evaluate_loss(model);
      p.value[i] = saved;
      numeric[i] = (up - down) / (2.0 * options.step);
    }
    const Tensor diff = numeric - p.grad;
    FiniteDiffEntry entry;
    entry.name = p.name;
    entry.count = p.value.size();
    entry.max_abs_diff = max_abs(diff);
    const double denom = std::max({norm2(numeric), norm2(p.grad), options.norm_floor});
    entry.rel_err = norm2(diff) / denom;
    entry.pass = entry.rel_err < options.tolerance;
    report.max_rel_err = std::max(report.max_rel_err, entry.rel_err);
    report.pass = report.pass && entry.pass;
    report.entries.push_back(std::move(entry));
  }
  report.message = report.pass ? "ok" : "gradient mismatch";
  return report;
}

}  // namespace promptct
