#pragma once

// Numerical certification of the LipNet prior and the unfolded iteration:
// threshold-residual bound, bounded-denoiser constant, sampled Lipschitz
// constants, step-size window, fixed-point residuals, stage-wise traces and
// model comparison tables. Measured quantities are sampled maxima, so they
// are lower bounds on the true constants.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "promptct/metrics.hpp"
#include "promptct/reconstructor.hpp"
#include "promptct/simulate.hpp"
#include "promptct/trainer.hpp"

namespace promptct {

using ImageMap = std::function<Tensor(const Tensor&)>;

// --- threshold residual bound ----------------------------------------------------

/// ||W^T W x - W^T T_e(W x)||^2 / (M sigma^2 c_max^2 ||W||_2^2) with e = c sigma,
/// M = number of coefficients. `c` is F x H x W. Zero when sigma == 0.
double lemma1_ratio(const Tensor& filters, const Tensor& x, const Tensor& c, double sigma, double c_max,
                    double frame_norm);

struct Lemma1Report {
  double max_ratio = 0.0;
  double frame_norm = 0.0;  // ||W||_2
  std::size_t trials = 0;
  std::vector<std::pair<double, double>> samples;  // (sigma, ratio)
};

/// c from the model's CGNet on the coefficients of each sampled image; the
/// prompt (if any) comes from `mask`. Inputs alternate between random
/// phantoms and uniform noise images.
Lemma1Report check_lemma1(ModelParams& params, const LipNetConfig& cfg, std::size_t trials,
                          const std::vector<double>& sigma_grid, std::uint64_t seed, const Tensor* mask = nullptr);

// --- bounded denoiser ------------------------------------------------------------

/// D(x; sigma): the T-stage inner recursion started at noise level sigma.
Tensor denoise(ModelParams& params, const LipNetConfig& cfg, const Tensor& x, double sigma, const Tensor* prompt);

struct BoundedReport {
  double n_hat = 0.0;
  std::vector<std::pair<double, double>> profile;  // (sigma, max ratio at sigma)
  std::size_t trials = 0;
};

/// max ||x - D(x; sigma)||^2 / sigma^2 over phantoms plus N(0, sigma^2) noise.
BoundedReport check_bounded(ModelParams& params, const LipNetConfig& cfg, std::size_t trials,
                            const std::vector<double>& sigma_grid, std::uint64_t seed, const Tensor* mask = nullptr);
/// Same with a caller-supplied denoiser.
BoundedReport check_bounded(const std::function<Tensor(const Tensor&, double)>& denoiser,
                            const std::vector<Tensor>& images, std::size_t trials,
                            const std::vector<double>& sigma_grid, std::uint64_t seed);

// --- sampled Lipschitz constants -------------------------------------------------

struct RatioStats {
  std::vector<double> ratios;  // ||f(x1) - f(x2)|| / ||x1 - x2||, unsquared
  std::vector<bool> refined;   // per ratio: pair came from power refinement
  std::size_t skipped = 0;     // coincident pairs
  double max() const;
  double fraction_below(double bound) const;
  /// Nearest-rank percentile, q in [0, 100].
  double percentile(double q) const;
};

struct LipschitzEstimate {
  double squared = 0.0;    // max of squared-norm ratios
  double unsquared = 0.0;  // sqrt(squared)
  RatioStats stats;
};

/// Pairs cycle through: two distinct anchors; an anchor and a random
/// perturbation at relative scales 1e-1, 1e-2, 1e-3; and close pairs refined
/// by `power_steps` steps of difference power iteration.
LipschitzEstimate estimate_lipschitz(const ImageMap& f, const std::vector<Tensor>& anchors, std::size_t pairs,
                                     std::size_t power_steps, std::uint64_t seed);

// --- contraction -----------------------------------------------------------------

struct StepWindow {
  double lower = 0.0;  // 1/eps - 1/(u eps)
  double upper = 0.0;  // 1/zeta + 1/(u zeta)
  bool degenerate = false;  // eps ~ 0: lower bound not meaningful
  bool feasible = false;    // u < (eps + zeta) / (zeta - eps)
  bool contains(double eta) const { return (degenerate || eta > lower) && eta < upper; }
};

StepWindow step_window(double epsilon, double zeta, double upsilon, bool degenerate);

/// ||x_{k+1} - x_k|| for k = 0 .. steps-1 starting at x_0 = x.
std::vector<double> residual_series(const ImageMap& f, Tensor x, std::size_t steps);
/// True when every entry is <= its predecessor up to rel_tol.
bool non_increasing(const std::vector<double>& series, double rel_tol = 1e-9);

struct LinearCaseReport {
  double eta = 0.0;
  double max_rel_error = 0.0;  // per-mode measured ratio vs |1 - eta lambda|
  std::vector<double> residuals;
  StepWindow window;
};

/// Identity prior on a diagonal operator P = diag(sqrt(lambda)).
LinearCaseReport linear_case_check(const std::vector<double>& lambdas, double eta, std::size_t steps);

struct ContractionOptions {
  std::size_t views = 60;
  std::size_t images = 20;
  std::size_t pairs = 200;
  std::size_t power_steps = 5;
  std::size_t extra_stages = 20;
  std::size_t spectrum_iters = 500;
  std::uint64_t seed = 2024;
};

struct TheoryReport {
  // spectra and step size
  double zeta = 0.0;
  double epsilon = 0.0;
  bool epsilon_degenerate = false;
  double eta = 0.0;
  // denoiser constants
  double n_hat = 0.0;
  std::vector<std::pair<double, double>> bounded_profile;
  LipschitzEstimate denoiser_lipschitz;
  double lemma1_max_ratio = 0.0;
  // stage map
  LipschitzEstimate stage_lipschitz;
  StepWindow window_squared;    // window from the squared-norm constant
  StepWindow window_unsquared;  // window from its square root
  std::vector<std::vector<double>> residuals;  // per image, 20 steps after K
  std::size_t monotone_images = 0;

  std::string to_text() const;
};

/// Stage-map pair ratios on the test split, the step window, and fixed-point
/// residuals on noiseless sinograms for `extra_stages` steps after K.
TheoryReport check_contraction(Model& model, const Dataset& data, OperatorBank& bank,
                               const ContractionOptions& options);

// --- stage-wise trace ------------------------------------------------------------

struct TraceRow {
  std::size_t stages = 0;
  std::size_t views = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  double rmse = 0.0;
};

/// Mean metrics over the test split for every K in k_list and view count.
/// Runs max(k_list) stages once and scores each prefix.
std::vector<TraceRow> stagewise_trace(Model& model, const Dataset& data, OperatorBank& bank,
                                      const std::vector<std::size_t>& k_list, const std::vector<std::size_t>& views,
                                      std::size_t threads, std::size_t limit = 0);
void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& rows);
std::vector<TraceRow> read_trace_csv(const std::filesystem::path& path);

// --- model comparison ------------------------------------------------------------

/// A table row: one model per view count (LipCT) or one model for all.
struct ComparisonModel {
  std::string name;
  std::map<std::size_t, Model*> per_view;  // empty key set: use `shared`
  Model* shared = nullptr;
  Model* for_views(std::size_t v) const;
};

struct ComparisonRow {
  std::string name;
  std::size_t parameters = 0;
  std::map<std::size_t, ImageMetrics> by_view;
  ImageMetrics mean() const;
};

/// FBP first, then each model, scored on the test split. Models must share
/// geometry and frame dims.
std::vector<ComparisonRow> ablation_compare(const std::vector<ComparisonModel>& models, const Dataset& data,
                                            OperatorBank& bank, const std::vector<std::size_t>& views,
                                            std::size_t threads, std::size_t limit = 0);
/// model,params,psnr60,ssim60,rmse60,...,psnr_mean,ssim_mean,rmse_mean
void write_comparison_csv(const std::filesystem::path& path, const std::vector<ComparisonRow>& rows,
                          const std::vector<std::size_t>& views);
std::vector<ComparisonRow> read_comparison_csv(const std::filesystem::path& path);

}  // namespace promptct
