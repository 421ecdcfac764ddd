#pragma once

// Lipschitz-constrained prior: a learned analysis/synthesis frame W, the
// constant-generating network (CGNet) that turns a noise level into
// spatially varying thresholds, the mask prompt encoder and the inner
// stage recursion
//   z_t = alpha z0 + alpha beta W^T soft_threshold(W z_{t-1}, c_t sigma_t).
//
// Image-valued Vars in this header are 1 x H x W; the Tensor overloads take
// and return H x W images and evaluate on a non-recording tape.

#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "promptct/autodiff.hpp"
#include "promptct/config.hpp"

namespace promptct {

enum class DeepExtractor { Conv, AttentionSpectral };

struct LipNetConfig {
  std::size_t filters = 16;       // F
  std::size_t kernel = 3;         // k
  std::size_t stages = 3;         // inner stages T
  std::size_t hidden = 8;         // CGNet hidden width
  std::size_t prompt_channels = 8;
  double alpha = 0.1;
  double beta = 9.0;
  double c_min = 0.01;
  double c_max = 5.0;
  double sigma0 = 0.05;
  double tau = 0.8;               // initial decay
  bool train_sigma0 = false;
  bool prompt = true;
  DeepExtractor deep = DeepExtractor::Conv;
  std::size_t window = 8;
  std::size_t image_size = 64;    // needed by the spectral branch only

  void validate() const;
  static LipNetConfig from_config(const Config& cfg);
  void to_config(Config& cfg) const;
};

// Stored decay is a logit: tau = 0.01 + 0.98 sigmoid(rho).
double tau_from_logit(double rho);
double logit_from_tau(double tau);

/// Creates every parameter with the documented names:
///   frame.filters                         F x 1 x k x k
///   cgnet.shallow.{0,1}[.bias]            conv banks of F_shallow
///   cgnet.deep.{0,1}[.bias]               conv deep block (default)
///   cgnet.stb.{wq,wk,wv,wo}, cgnet.sfb.*  attention/spectral variant
///   cgnet.head[.bias]
///   prompt.conv.{0,1,2}[.bias], prompt.fc[.bias]   (prompt models only)
///   schedule.sigma0, schedule.tau
ModelParams init_lipnet_params(const LipNetConfig& cfg, std::uint64_t seed);

/// Orthonormal k x k DCT-II basis scaled by 1/k (so W^T W = I for a full
/// basis), first `count` filters, as count x 1 x k x k.
Tensor dct_frame(std::size_t count, std::size_t k);

/// Prompt-encoder parameter count implied by the config.
std::size_t prompt_encoder_size(const LipNetConfig& cfg);

/// Parameters bound to one tape, looked up by name.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, ModelParams& params);
  const ad::Var& operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  ad::Tape& tape() const noexcept { return *tape_; }

 private:
  ad::Tape* tape_;
  std::map<std::string, ad::Var, std::less<>> vars_;
};

namespace net {

/// p = FC(GAP(relu(conv_s2) x 3 (mask))), length F. `mask` is 1 x Np x Nb.
ad::Var prompt_encode(const BoundParams& bp, const LipNetConfig& cfg, const ad::Var& mask);

/// q = F_shallow(u) (.) p + u; with no prompt p is taken as all ones.
ad::Var cgnet_mix(const BoundParams& bp, const LipNetConfig& cfg, const ad::Var& coeffs, const ad::Var* p);
/// c = clamp(head(F_deep(q) + q), c_min, c_max).
ad::Var cgnet_constants(const BoundParams& bp, const LipNetConfig& cfg, const ad::Var& coeffs, const ad::Var* p);
/// e = c * sigma for a one-element sigma.
ad::Var thresholds(const ad::Var& c, const ad::Var& sigma);
/// Decay factor in (0.01, 0.99).
ad::Var decay(const BoundParams& bp);

ad::Var lipnet_stage(const BoundParams& bp, const LipNetConfig& cfg, const ad::Var& z_prev, const ad::Var& z0,
                     const ad::Var& sigma, const ad::Var* p);

struct ApplyResult {
  ad::Var z;
  ad::Var sigma_last;
};

/// Runs `stages` inner stages from z_prev = z0 with sigma_1 = tau * sigma_start.
ApplyResult lipnet_apply(const BoundParams& bp, const LipNetConfig& cfg, const ad::Var& z0, const ad::Var* p,
                         std::size_t stages, const ad::Var& sigma_start);

}  // namespace net

// --- Tensor conveniences (inference) ------------------------------------------

Tensor prompt_encode(ModelParams& params, const LipNetConfig& cfg, const Tensor& mask);
Tensor cgnet_constants(ModelParams& params, const LipNetConfig& cfg, const Tensor& coeffs, const Tensor* p);
/// Throws ArgumentError on negative sigma.
Tensor thresholds(const Tensor& c, double sigma);
Tensor lipnet_stage(ModelParams& params, const LipNetConfig& cfg, const Tensor& z_prev, const Tensor& z0,
                    double sigma, const Tensor* p);
/// Full inner recursion with the learned schedule; the prompt is computed
/// from `mask` when the model has a prompt encoder.
Tensor lipnet_apply(ModelParams& params, const LipNetConfig& cfg, const Tensor& z0, const Tensor* mask,
                    std::optional<std::size_t> stages = std::nullopt);

/// Current noise schedule values.
double schedule_sigma0(const ModelParams& params);
double schedule_tau(const ModelParams& params);

/// ||W||_2 for circular convolution on an h x w grid: sqrt of the dominant
/// eigenvalue of W^T W by power iteration. Throws on all-zero filters.
double frame_spectral_norm(const Tensor& filters, std::size_t h, std::size_t w, std::size_t iters,
                           std::uint64_t seed = 7);

}  // namespace promptct
