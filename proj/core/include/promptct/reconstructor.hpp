#pragma once

// K-stage unfolded reconstruction: x0 = FBP(y), then per stage an image
// update x + eta P^T (y - P x) followed by the LipNet prior.

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <vector>

#include "promptct/geometry.hpp"
#include "promptct/lipnet.hpp"

namespace promptct {

enum class SigmaMode { Fresh, Continue };

struct UnfoldingConfig {
  std::size_t stages = 3;  // K
  double eta = 0.0;        // <= 0 selects 1 / zeta for the view set
  SigmaMode sigma_mode = SigmaMode::Fresh;
  LipNetConfig lipnet;
  GeometrySpec geometry;

  void validate() const;
  static UnfoldingConfig from_config(const Config& cfg);
  void to_config(Config& cfg) const;
};

/// Fan-beam operators and their step sizes, keyed by retained view list.
/// Thread-safe; entries live as long as the bank.
class OperatorBank {
 public:
  struct Entry {
    std::vector<std::size_t> views;
    SparseOperator op;
    double zeta = 0.0;
  };

  explicit OperatorBank(GeometrySpec geometry, std::filesystem::path cache_dir = {});

  const Entry& get(const std::vector<std::size_t>& views);
  const Entry& for_mask(const Tensor& mask);
  const GeometrySpec& geometry() const noexcept { return geometry_; }

 private:
  GeometrySpec geometry_;
  std::filesystem::path cache_dir_;
  std::mutex mutex_;
  std::map<std::vector<std::size_t>, std::unique_ptr<Entry>> entries_;
};

/// x + eta P^T (y - P x).
Tensor ium_step(const Tensor& x, const Tensor& y, const SparseOperator& op, double eta);

struct Model {
  UnfoldingConfig config;
  ModelParams params;
};

Model make_model(const UnfoldingConfig& config, std::uint64_t seed);

/// Step size used for an operator entry under this config.
double step_size(const UnfoldingConfig& config, const OperatorBank::Entry& entry);

namespace net {

/// Returns x^(0) .. x^(K) as 1 x H x W Vars. `y` is V x Nb, `mask` is
/// 1 x Np x Nb and only read by prompt models. A non-finite value raises
/// NumericError naming the stage.
std::vector<ad::Var> promptct_forward(const BoundParams& bp, const UnfoldingConfig& config, const ad::Var& x0,
                                      const ad::Var& y, const SparseOperator& op, double eta,
                                      const ad::Var* mask, std::size_t stages);

}  // namespace net

struct ForwardResult {
  std::vector<Tensor> stages;  // x^(0) .. x^(K), H x W
  const Tensor& final_image() const { return stages.back(); }
};

/// Tensor-level forward for inference. `stages` overrides K (shared
/// parameters make any K valid); `x0` overrides the FBP initialiser.
ForwardResult promptct_forward(Model& model, const Tensor& y, const Tensor& mask, OperatorBank& bank,
                               std::optional<std::size_t> stages = std::nullopt, const Tensor* x0 = nullptr);

/// Trainable scalar count.
std::size_t parameter_count(const ModelParams& params);
std::size_t parameter_count(const UnfoldingConfig& config);

/// 16-bit binary PGM of an image, values clipped to [0, 1].
void save_pgm16(const std::filesystem::path& path, const Tensor& image);

/// Writes `final.lipt` and `final.pgm`, plus `stage_K.lipt` for every stage
/// when `all_stages` is set.
void write_reconstruction(const std::filesystem::path& dir, const ForwardResult& result, bool all_stages);

}  // namespace promptct
