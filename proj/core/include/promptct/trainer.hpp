#pragma once

// Supervised end-to-end training of the unfolded model: composite stage
// loss, Adam, LIPC checkpoints and per-epoch validation.

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

namespace promptct {

enum class Regime { SingleView, MultiViewNoPrompt, MultiViewPrompt };

const char* regime_name(Regime r);
/// "single_view", "multi_view_noprompt" or "multi_view_prompt".
Regime parse_regime(const std::string& s);

struct TrainConfig {
  Regime regime = Regime::MultiViewPrompt;
  std::size_t single_views = 60;  // used by Regime::SingleView
  std::size_t epochs = 30;
  std::size_t batch_size = 1;
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double omega1 = 0.1;
  double omega2 = 0.1;
  std::uint64_t seed = 1;
  std::filesystem::path dataset;
  std::filesystem::path out_dir;
  std::filesystem::path operator_cache;  // empty: no on-disk operator cache
  bool gradient_gate = true;
  bool resume = false;
  std::size_t threads = 1;  // validation only; updates are always sequential

  void validate() const;
  /// Keys under `train.` plus `data_dir`.
  static TrainConfig from_config(const Config& cfg);
  void to_config(Config& cfg) const;

  std::filesystem::path checkpoint_path() const { return out_dir / "model.lipc"; }
  std::filesystem::path log_path() const { return out_dir / "train_log.csv"; }
};

/// Prompt path on/off follows the regime.
UnfoldingConfig configure_for_regime(UnfoldingConfig model, Regime regime);

// --- loss ------------------------------------------------------------------------

/// sum_k [w1 |x_k - gt|_1 + w2 |x_k - gt|_2^2] + |x_final - gt|_2^2.
double composite_loss(const std::vector<Tensor>& stages, const Tensor& x_final, const Tensor& gt, double omega1,
                      double omega2);

namespace net {
ad::Var composite_loss(const std::vector<ad::Var>& stages, const ad::Var& x_final, const ad::Var& gt, double omega1,
                       double omega2);
}  // namespace net

// --- optimizer -------------------------------------------------------------------

struct OptimizerState {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;  // completed epochs
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
};

/// Bias-corrected Adam over the trainable parameters.
class Adam {
 public:
  explicit Adam(OptimizerState state) : state_(std::move(state)) {}
  /// Applies one update from the accumulated grads (scaled by 1/batch).
  /// Throws NumericError before touching any parameter if a grad is not finite.
  void step(ModelParams& params, double grad_scale = 1.0);
  const OptimizerState& state() const noexcept { return state_; }
  OptimizerState& state() noexcept { return state_; }

 private:
  OptimizerState state_;
};

// --- checkpoints -----------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kOptimizerVersion = 1;

/// "LIPC", u32 version, u16 count, per parameter (u16 name length, name, LIPT).
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
/// Named tensors in file order.
std::vector<std::pair<std::string, Tensor>> read_checkpoint(const std::filesystem::path& path);
/// Loads into an existing architecture. Missing, unexpected or mis-shaped
/// names raise ParameterMismatchError listing every offender.
void load_checkpoint(const std::filesystem::path& path, ModelParams& params);

/// "LIPA" sidecar: u32 version, u64 step, u64 epoch, f64 lr/beta1/beta2/eps,
/// u16 count, per parameter (name, m LIPT, v LIPT).
void save_optimizer(const std::filesystem::path& path, const OptimizerState& state);
OptimizerState load_optimizer(const std::filesystem::path& path);

/// Architecture sidecar written next to every checkpoint (`model.cfg`).
std::filesystem::path model_config_path(const std::filesystem::path& checkpoint);
void save_model(const std::filesystem::path& checkpoint, const Model& model);
/// Reads the `.cfg` sidecar and the parameters.
Model load_model(const std::filesystem::path& checkpoint);

// --- evaluation ------------------------------------------------------------------

struct EvalItem {
  std::size_t index = 0;
  std::size_t views = 0;
  ImageMetrics metrics;
};

/// Reconstructs every record of `split` at `views` and scores against the
/// ground truth. `stages` overrides K; `fbp_only` scores the FBP initialiser.
std::vector<EvalItem> evaluate_split(Model* model, const Dataset& data, Split split, std::size_t views,
                                     OperatorBank& bank, std::size_t threads,
                                     std::optional<std::size_t> stages = std::nullopt, bool fbp_only = false,
                                     std::size_t limit = 0);
ImageMetrics mean_metrics(const std::vector<EvalItem>& items);

// --- training --------------------------------------------------------------------

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;                 // mean per-sample training loss
  std::vector<double> val_psnr;      // one per dataset view count
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::filesystem::path checkpoint;
  double seconds = 0.0;
  std::size_t steps = 0;
};

/// Central-difference step 1e-6: with 1e-5 the ReLU / clamp / shrinkage kinks
/// are crossed often enough to show up at the 1e-4 tolerance.
FiniteDiffOptions gradient_gate_options();
/// Gradient gate: finite_diff_check on a 1-stage, F = 4, 16 x 16 model at a
/// randomly perturbed parameter point.
FiniteDiffReport gradient_gate(std::uint64_t seed = 11, const FiniteDiffOptions& options = gradient_gate_options());

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains `model_config` (prompt path set from the regime) and writes
/// `model.lipc`, `model.lipc.adam`, `model.cfg`, `train_log.csv` and
/// `summary.txt` to cfg.out_dir. On a non-finite loss or gradient the last
/// completed epoch's checkpoint is left untouched and NumericError is thrown.
TrainResult train(const TrainConfig& cfg, const UnfoldingConfig& model_config, const EpochCallback& on_epoch = {});

/// Parses a training CSV log back into epochs.
std::vector<EpochLog> read_train_log(const std::filesystem::path& path);

}  // namespace promptct
