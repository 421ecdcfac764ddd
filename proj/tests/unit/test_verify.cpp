#include <cmath>
#include <random>

#include "promptct/errors.hpp"
#include "promptct/kernels.hpp"
#include "promptct/verify.hpp"
#include "test_util.hpp"

using namespace promptct;
using promptct::test::dense_frame;
using promptct::test::random_tensor;
using promptct::test::rel_diff;
using promptct::test::small_geometry;
using promptct::test::TempDir;
using promptct::test::vec;

namespace {

LipNetConfig small_lipnet(std::size_t n = 12) {
  LipNetConfig cfg;
  cfg.filters = 4;
  cfg.hidden = 4;
  cfg.prompt_channels = 4;
  cfg.stages = 2;
  cfg.image_size = n;
  return cfg;
}

UnfoldingConfig small_model() {
  UnfoldingConfig cfg;
  cfg.stages = 2;
  cfg.geometry = small_geometry();
  cfg.lipnet = small_lipnet(32);
  return cfg;
}

Tensor delta_filter() {
  Tensor f({1, 1, 3, 3});
  f[4] = 1.0;
  return f;
}

void perturb(ModelParams& params, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& p : params.items())
    if (p.trainable && p.name != "schedule.tau")
      for (auto& v : p.value.storage()) v += n(rng);
}

}  // namespace

TEST(Lemma1, RatioMatchesDenseEvaluation) {
  const Tensor filters = random_tensor({3, 1, 3, 3}, 1);
  const Tensor x = random_tensor({6, 6}, 2);
  const Tensor c = random_tensor({3, 6, 6}, 3, 0.01, 5.0);
  const double sigma = 0.2, c_max = 5.0;
  const Eigen::MatrixXd W = dense_frame(filters, 6, 6);
  const double norm = Eigen::JacobiSVD<Eigen::MatrixXd>(W).singularValues()(0);
  const Eigen::VectorXd u = W * vec(x);
  Eigen::VectorXd shrunk(u.size());
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    const double e = c[static_cast<std::size_t>(i)] * sigma;
    shrunk(i) = std::copysign(std::max(std::abs(u(i)) - e, 0.0), u(i));
  }
  const Eigen::VectorXd r = W.transpose() * (u - shrunk);
  const double want = r.squaredNorm() / (static_cast<double>(u.size()) * sigma * sigma * c_max * c_max * norm * norm);
  EXPECT_LT(rel_diff(lemma1_ratio(filters, x, c, sigma, c_max, norm), want), 1e-12);
  EXPECT_EQ(lemma1_ratio(filters, x, c, 0.0, c_max, norm), 0.0);
  EXPECT_THROW(lemma1_ratio(filters, x, c, -1.0, c_max, norm), ArgumentError);
}

TEST(Lemma1, BoundHoldsForRandomFrames) {
  // Property: for any frame, any c in [0, c_max] and any sigma the ratio is <= 1.
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> log_sigma(-4.0, 1.0);
  double worst = 0.0;
  for (std::uint64_t t = 0; t < 120; ++t) {
    const Tensor filters = random_tensor({2 + t % 3, 1, 3, 3}, 100 + t);
    const std::size_t n = 6 + t % 4;
    const Tensor x = random_tensor({n, n}, 300 + t, -3.0, 3.0);
    const Tensor c = random_tensor({filters.dim(0), n, n}, 500 + t, 0.01, 5.0);
    const double norm = frame_spectral_norm(filters, n, n, 2000);
    const double r = lemma1_ratio(filters, x, c, std::pow(10.0, log_sigma(rng)), 5.0, norm);
    worst = std::max(worst, r);
  }
  EXPECT_LE(worst, 1.0 + 1e-9);
  EXPECT_GT(worst, 0.0);
}

TEST(Lemma1, IdentityFrameIsTight) {
  // W = I and every |x| above c_max sigma: the residual is c_max sigma per
  // entry, so the ratio is exactly 1.
  const Tensor x = random_tensor({8, 8}, 5, 1.0, 2.0);
  const Tensor c({1, 8, 8}, 5.0);
  EXPECT_NEAR(lemma1_ratio(delta_filter(), x, c, 0.1, 5.0, 1.0), 1.0, 1e-12);
  EXPECT_NEAR(frame_spectral_norm(delta_filter(), 8, 8, 50), 1.0, 1e-12);
}

TEST(Lemma1, ModelCheckStaysBelowOne) {
  auto cfg = small_lipnet(32);
  ModelParams params = init_lipnet_params(cfg, 6);
  perturb(params, 7);
  const Tensor mask = make_mask(24, 25, subsample_views(24, 8));
  const auto rep = check_lemma1(params, cfg, 100, {0.01, 0.05, 0.2, 1.0}, 8, &mask);
  EXPECT_EQ(rep.samples.size(), 100u);
  EXPECT_LE(rep.max_ratio, 1.0);
  EXPECT_GT(rep.max_ratio, 0.0);
  EXPECT_GT(rep.frame_norm, 0.0);
  EXPECT_THROW(check_lemma1(params, cfg, 1, {}, 8, &mask), ArgumentError);
}

TEST(Bounded, GenericDenoiserConstant) {
  // D(x; s) = x - s: ||x - D||^2 / s^2 equals the pixel count exactly.
  const std::vector<Tensor> images{random_tensor({5, 6}, 1), random_tensor({5, 6}, 2)};
  const auto rep = check_bounded([](const Tensor& x, double s) { return x - Tensor(x.dims(), s); }, images, 30,
                                 {0.1, 0.5, 2.0}, 9);
  EXPECT_NEAR(rep.n_hat, 30.0, 1e-9);
  ASSERT_EQ(rep.profile.size(), 3u);
  for (const auto& [s, r] : rep.profile) EXPECT_NEAR(r, 30.0, 1e-9) << s;
  // The identity map has constant zero.
  EXPECT_EQ(check_bounded([](const Tensor& x, double) { return x; }, images, 10, {0.1}, 9).n_hat, 0.0);
  EXPECT_THROW(check_bounded([](const Tensor& x, double) { return x; }, images, 1, {0.0}, 9), ArgumentError);
}

TEST(Bounded, LipNetIsFiniteAndDeterministic) {
  auto cfg = small_lipnet(32);
  ModelParams params = init_lipnet_params(cfg, 10);
  perturb(params, 11);
  const Tensor mask = make_mask(24, 25, subsample_views(24, 8));
  const auto a = check_bounded(params, cfg, 24, {0.05, 0.2}, 12, &mask);
  const auto b = check_bounded(params, cfg, 24, {0.05, 0.2}, 12, &mask);
  EXPECT_TRUE(std::isfinite(a.n_hat));
  EXPECT_EQ(a.n_hat, b.n_hat);
  EXPECT_GT(a.n_hat, 0.0);
  // Maxima over more trials never decrease.
  EXPECT_GE(check_bounded(params, cfg, 48, {0.05, 0.2}, 12, &mask).n_hat, a.n_hat);
}

TEST(Lipschitz, LinearMaps) {
  const std::vector<Tensor> anchors{random_tensor({6, 6}, 1), random_tensor({6, 6}, 2)};
  const auto id = estimate_lipschitz([](const Tensor& x) { return x; }, anchors, 40, 3, 3);
  EXPECT_NEAR(id.squared, 1.0, 1e-12);
  EXPECT_NEAR(id.unsquared, 1.0, 1e-12);
  const auto twice = estimate_lipschitz([](const Tensor& x) { return x * 2.0; }, anchors, 40, 3, 3);
  EXPECT_NEAR(twice.squared, 4.0, 1e-12);
  EXPECT_NEAR(twice.unsquared, 2.0, 1e-12);
  EXPECT_EQ(twice.stats.ratios.size() + twice.stats.skipped, 40u);
}

TEST(Lipschitz, PowerStepsApproachTheTopGain) {
  // Diagonal gains in [0.5, 3]: sampled maxima stay below 3 and the power
  // refinement drives them close to it.
  Tensor gains = random_tensor({8, 8}, 4, 0.5, 2.0);
  gains[17] = 3.0;
  const ImageMap f = [&](const Tensor& x) {
    Tensor y = x;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= gains[i];
    return y;
  };
  const std::vector<Tensor> anchors{random_tensor({8, 8}, 5)};
  const auto est = estimate_lipschitz(f, anchors, 60, 30, 6);
  EXPECT_LE(est.unsquared, 3.0 * (1.0 + 1e-12));
  EXPECT_GT(est.unsquared, 2.9);
  const auto fewer = estimate_lipschitz(f, anchors, 30, 30, 6);
  EXPECT_GE(est.squared, fewer.squared);
}

TEST(RatioStats, PercentilesAndFractions) {
  RatioStats s;
  for (int i = 10; i >= 1; --i) s.ratios.push_back(i);
  EXPECT_EQ(s.max(), 10.0);
  EXPECT_EQ(s.percentile(50), 5.0);
  EXPECT_EQ(s.percentile(95), 10.0);
  EXPECT_EQ(s.percentile(0), 1.0);
  EXPECT_EQ(s.percentile(100), 10.0);
  EXPECT_EQ(s.fraction_below(4.0), 0.3);
  EXPECT_EQ(RatioStats{}.percentile(50), 0.0);
}

TEST(StepWindow, Algebra) {
  const auto w = step_window(1.0, 4.0, 1.0, false);
  EXPECT_NEAR(w.lower, 0.0, 1e-15);
  EXPECT_NEAR(w.upper, 0.5, 1e-15);
  EXPECT_TRUE(w.feasible);
  EXPECT_TRUE(w.contains(0.25));
  EXPECT_FALSE(w.contains(0.5));
  const auto narrow = step_window(1.0, 4.0, 2.0, false);
  EXPECT_NEAR(narrow.lower, 0.5, 1e-15);
  EXPECT_NEAR(narrow.upper, 0.375, 1e-15);
  EXPECT_FALSE(narrow.feasible);
  EXPECT_FALSE(narrow.contains(0.4));
  const auto degenerate = step_window(0.0, 4.0, 2.0, true);
  EXPECT_TRUE(degenerate.contains(0.1));
}

TEST(StepWindow, FeasibilityMeansNonEmpty) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.01, 10.0);
  for (int t = 0; t < 1000; ++t) {
    const double eps = u(rng), zeta = eps + u(rng), ups = 0.2 + u(rng) / 2.0;
    const auto w = step_window(eps, zeta, ups, false);
    EXPECT_NEAR(w.lower, 1.0 / eps - 1.0 / (ups * eps), 1e-12 * (1.0 + std::abs(w.lower)));
    EXPECT_NEAR(w.upper, 1.0 / zeta + 1.0 / (ups * zeta), 1e-12 * w.upper);
    const double margin = (eps + zeta) / (zeta - eps) - ups;
    if (std::abs(margin) > 1e-9) EXPECT_EQ(w.feasible, w.lower < w.upper) << eps << " " << zeta << " " << ups;
  }
}

TEST(Contraction, LinearCaseIsGradientDescent) {
  const auto rep = linear_case_check({0.5, 1.0, 2.0, 4.0}, 0.25, 40);
  EXPECT_LT(rep.max_rel_error, 1e-8);
  EXPECT_NEAR(rep.window.upper, 0.5, 1e-12);
  EXPECT_TRUE(rep.window.contains(0.25));
  ASSERT_EQ(rep.residuals.size(), 40u);
  EXPECT_TRUE(non_increasing(rep.residuals));
  // The slowest mode contracts by |1 - 0.25 * 0.5| = 0.875 per step and
  // dominates late; faster modes only pull the ratio below it.
  const double late = rep.residuals[39] / rep.residuals[38];
  EXPECT_LE(late, 0.875 + 1e-9);
  EXPECT_GT(late, 0.874);
}

TEST(Contraction, NonIncreasingAndResidualSeries) {
  EXPECT_TRUE(non_increasing({3.0, 2.0, 2.0, 1.0}));
  EXPECT_FALSE(non_increasing({3.0, 2.0, 2.1}));
  EXPECT_TRUE(non_increasing({1.0, 1.0 + 1e-12}));
  EXPECT_TRUE(non_increasing({}));
  const auto r = residual_series([](const Tensor& x) { return x * 0.5; }, Tensor({4}, 1.0), 5);
  ASSERT_EQ(r.size(), 5u);
  for (std::size_t k = 0; k < 5; ++k) EXPECT_NEAR(r[k], std::pow(0.5, k + 1) * 2.0, 1e-15);
}

TEST(Csv, TraceRoundTrip) {
  TempDir dir("trace");
  const std::vector<TraceRow> rows{{1, 60, 30.5, 0.9, 0.03}, {3, 90, 33.25, 0.95, 0.0217}};
  write_trace_csv(dir.path() / "t.csv", rows);
  const auto back = read_trace_csv(dir.path() / "t.csv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].stages, 3u);
  EXPECT_EQ(back[1].views, 90u);
  EXPECT_EQ(back[1].psnr, 33.25);
  EXPECT_EQ(back[1].rmse, 0.0217);
}

TEST(Csv, ComparisonRoundTrip) {
  TempDir dir("cmp");
  ComparisonRow a;
  a.name = "FBP";
  a.by_view[60] = {20.0, 0.5, 0.1};
  a.by_view[90] = {22.0, 0.6, 0.08};
  ComparisonRow b = a;
  b.name = "PromptCT";
  b.parameters = 1234;
  b.by_view[60].psnr = std::numeric_limits<double>::infinity();
  write_comparison_csv(dir.path() / "c.csv", {a, b}, {60, 90});
  const auto back = read_comparison_csv(dir.path() / "c.csv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].name, "PromptCT");
  EXPECT_EQ(back[1].parameters, 1234u);
  EXPECT_EQ(back[0].by_view.at(90).ssim, 0.6);
  EXPECT_TRUE(std::isinf(back[1].by_view.at(60).psnr));
  EXPECT_NEAR(a.mean().psnr, 21.0, 1e-12);
}

class SmallExperiment : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("verify");
    DatasetConfig d;
    d.path = dir_->path() / "data";
    d.n_train = 1;
    d.n_val = 1;
    d.n_test = 3;
    d.view_counts = {8, 12};
    d.seed = 21;
    d.geometry = small_geometry();
    generate_dataset(d);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static Dataset data() { return Dataset::open(dir_->path() / "data"); }
  static TempDir* dir_;
};

TempDir* SmallExperiment::dir_ = nullptr;

TEST_F(SmallExperiment, StagewiseTraceMatchesDirectEvaluation) {
  Model model = make_model(small_model(), 1);
  perturb(model.params, 2);
  OperatorBank bank(small_geometry());
  const Dataset ds = data();
  const auto rows = stagewise_trace(model, ds, bank, {1, 3}, {8, 12}, 1);
  ASSERT_EQ(rows.size(), 4u);
  for (const auto& row : rows) {
    const auto direct = mean_metrics(evaluate_split(&model, ds, Split::Test, row.views, bank, 1, row.stages));
    EXPECT_NEAR(row.psnr, direct.psnr, 1e-9) << row.stages << "/" << row.views;
    EXPECT_NEAR(row.ssim, direct.ssim, 1e-12);
  }
  EXPECT_THROW(stagewise_trace(model, ds, bank, {}, {8}, 1), ArgumentError);
}

TEST_F(SmallExperiment, AblationStartsWithFbpAndHonoursPerViewModels) {
  Model a = make_model(small_model(), 3), b = make_model(small_model(), 4);
  perturb(b.params, 5);
  OperatorBank bank(small_geometry());
  const Dataset ds = data();
  ComparisonModel shared{"shared", {}, &a};
  ComparisonModel per_view{"per-view", {{8, &a}, {12, &b}}, nullptr};
  const auto rows = ablation_compare({shared, per_view}, ds, bank, {8, 12}, 1);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].name, "FBP");
  EXPECT_EQ(rows[0].parameters, 0u);
  const auto fbp8 = mean_metrics(evaluate_split(nullptr, ds, Split::Test, 8, bank, 1, std::nullopt, true));
  EXPECT_NEAR(rows[0].by_view.at(8).psnr, fbp8.psnr, 1e-12);
  EXPECT_NEAR(rows[2].by_view.at(8).psnr, rows[1].by_view.at(8).psnr, 1e-12);
  const auto b12 = mean_metrics(evaluate_split(&b, ds, Split::Test, 12, bank, 1));
  EXPECT_NEAR(rows[2].by_view.at(12).psnr, b12.psnr, 1e-12);
  EXPECT_EQ(rows[1].parameters, parameter_count(a.params));
}

TEST_F(SmallExperiment, ContractionReportIsConsistent) {
  Model model = make_model(small_model(), 6);
  OperatorBank bank(small_geometry());
  const Dataset ds = data();
  ContractionOptions o;
  o.views = 8;
  o.images = 2;
  o.pairs = 20;
  o.power_steps = 2;
  o.extra_stages = 5;
  const auto rep = check_contraction(model, ds, bank, o);
  EXPECT_GT(rep.zeta, 0.0);
  EXPECT_LE(rep.epsilon, rep.zeta);
  EXPECT_NEAR(rep.eta, 1.0 / bank.get(subsample_views(72, 8)).zeta, 1e-12);
  EXPECT_EQ(rep.stage_lipschitz.stats.ratios.size() + rep.stage_lipschitz.stats.skipped, 20u);
  EXPECT_NEAR(rep.stage_lipschitz.squared, rep.stage_lipschitz.unsquared * rep.stage_lipschitz.unsquared, 1e-12);
  EXPECT_TRUE(std::isfinite(rep.n_hat));
  EXPECT_LE(rep.lemma1_max_ratio, 1.0);
  ASSERT_EQ(rep.residuals.size(), 2u);
  EXPECT_EQ(rep.residuals[0].size(), 5u);
  const double u = rep.denoiser_lipschitz.squared;
  EXPECT_NEAR(rep.window_squared.upper, 1.0 / rep.zeta + 1.0 / (u * rep.zeta), 1e-9 * rep.window_squared.upper);
  EXPECT_NEAR(rep.window_unsquared.upper, 1.0 / rep.zeta + 1.0 / (std::sqrt(u) * rep.zeta),
              1e-9 * rep.window_unsquared.upper);
  const std::string text = rep.to_text();
  EXPECT_NE(text.find("percentile"), std::string::npos);
}
