#include <fstream>
#include <iterator>

#include "cli.hpp"
#include "promptct/errors.hpp"
#include "promptct/trainer.hpp"
#include "promptct/verify.hpp"
#include "test_util.hpp"

using namespace promptct;
using promptct::test::TempDir;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "promptct");
  ::testing::internal::CaptureStdout();
  ::testing::internal::CaptureStderr();
  Outcome o;
  o.code = cli::run(args);
  o.out = ::testing::internal::GetCapturedStdout();
  o.err = ::testing::internal::GetCapturedStderr();
  return o;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

const char* kSmallConfig = R"(# 32 x 32 smoke scale
image_size=32
pixel_size=1.0
n_views_full=72
n_bins=49
source_to_center=100
center_to_detector=80
bin_size=1.0
n_train=2
n_val=1
n_test=1
views=8,12
seed=3
unfold.stages=2
lipnet.filters=4
lipnet.hidden=4
lipnet.prompt_channels=4
lipnet.stages=2
train.epochs=1
train.lr=1e-3
train.gradient_gate=false
)";

}  // namespace

TEST(CliHelp, EveryCommandListsItsFlags) {
  const std::map<std::string, std::vector<std::string>> flags{
      {"simulate", {"--out", "--views"}},
      {"train", {"--regime", "--views", "--out", "--data"}},
      {"reconstruct", {"--checkpoint", "--sino", "--mask", "--out", "--stages-out", "--stages"}},
      {"verify", {"--checkpoint", "--suite", "--out", "--data", "--views", "--stages-out", "--noprompt", "--lipct"}},
      {"report", {"--out", "--data"}},
      {"info", {"--checkpoint"}},
  };
  const auto top = run({"--help"});
  EXPECT_EQ(top.code, 0);
  for (const auto& [cmd, list] : flags) {
    EXPECT_NE(top.out.find(cmd), std::string::npos) << cmd;
    const auto o = run({cmd, "--help"});
    EXPECT_EQ(o.code, 0) << cmd;
    for (const char* common : {"--config", "--geometry", "--seed", "--threads", "--set"}) {
      EXPECT_NE(o.out.find(common), std::string::npos) << cmd << " " << common;
    }
    for (const auto& f : list) EXPECT_NE(o.out.find(f), std::string::npos) << cmd << " " << f;
    // Defaults are printed.
    EXPECT_NE(o.out.find("[1]"), std::string::npos) << cmd;
  }
  EXPECT_NE(run({"verify", "--help"}).out.find("[all]"), std::string::npos);
  EXPECT_EQ(run({"--version"}).code, 0);
}

TEST(CliErrors, UserErrorsExitWithOne) {
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"frobnicate"}).code, 1);
  EXPECT_EQ(run({"info", "--bogus"}).code, 1);
  EXPECT_EQ(run({"train", "--regime", "sometimes"}).code, 1);
  EXPECT_EQ(run({"info", "--set", "novalue"}).code, 1);
  EXPECT_EQ(run({"info", "--threads", "0"}).code, 1);
  EXPECT_EQ(run({"reconstruct", "--sino", "x"}).code, 1);
  EXPECT_EQ(run({"info", "--checkpoint", "/nonexistent/model.lipc"}).code, 1);
  const auto o = run({"info", "--set", "lipnet.filters=-3"});
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.err.find("error"), std::string::npos);
}

TEST(CliInfo, PrintsConfigurationSummary) {
  const auto o = run({"info", "--set", "lipnet.filters=4"});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_NE(o.out.find("lipnet.filters=4"), std::string::npos);
  EXPECT_NE(o.out.find("promptct info status=ok"), std::string::npos);
  EXPECT_NE(o.out.find("prompt_params="), std::string::npos);
}

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("cli");
    std::ofstream(cfg()) << kSmallConfig;
    sim_ = new Outcome(run({"simulate", "--config", cfg().string(), "--out", data().string()}));
    train_ = new Outcome(run({"train", "--config", cfg().string(), "--data", data().string(), "--out", runp().string()}));
  }
  static void TearDownTestSuite() {
    delete sim_;
    delete train_;
    delete dir_;
  }
  static std::filesystem::path root() { return dir_->path(); }
  static std::filesystem::path cfg() { return root() / "small.cfg"; }
  static std::filesystem::path data() { return root() / "data"; }
  static std::filesystem::path runp() { return root() / "run"; }
  static TempDir* dir_;
  static Outcome* sim_;
  static Outcome* train_;
};

TempDir* CliPipeline::dir_ = nullptr;
Outcome* CliPipeline::sim_ = nullptr;
Outcome* CliPipeline::train_ = nullptr;

TEST_F(CliPipeline, SimulateWritesDataset) {
  ASSERT_EQ(sim_->code, 0) << sim_->err;
  EXPECT_NE(sim_->out.find("promptct simulate status=ok"), std::string::npos);
  EXPECT_NE(sim_->out.find("views=8,12"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(data() / "manifest.txt"));
  // Same inputs and seed: same bytes.
  const auto again = run({"simulate", "--config", cfg().string(), "--out", (root() / "data2").string()});
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(slurp(data() / "test" / "0000.sino_12.lipt"), slurp(root() / "data2" / "test" / "0000.sino_12.lipt"));
  const auto reseeded =
      run({"simulate", "--config", cfg().string(), "--seed", "4", "--out", (root() / "data3").string()});
  ASSERT_EQ(reseeded.code, 0);
  EXPECT_NE(slurp(data() / "test" / "0000.sino_12.lipt"), slurp(root() / "data3" / "test" / "0000.sino_12.lipt"));
}

TEST_F(CliPipeline, TrainWritesRunDirectory) {
  ASSERT_EQ(train_->code, 0) << train_->err;
  EXPECT_NE(train_->out.find("promptct train status=ok"), std::string::npos);
  EXPECT_NE(train_->out.find("regime=multi_view_prompt"), std::string::npos);
  for (const char* f : {"model.lipc", "model.cfg", "model.lipc.adam", "train_log.csv", "metrics.csv", "train.cfg"}) {
    EXPECT_TRUE(std::filesystem::exists(runp() / f)) << f;
  }
  EXPECT_EQ(slurp(runp() / "train_log.csv").substr(0, 33), "epoch,regime,loss,psnr8,psnr12\n1,");
  EXPECT_EQ(slurp(runp() / "metrics.csv").substr(0, 27), "model,views,psnr,ssim,rmse\n");
}

TEST_F(CliPipeline, ReconstructWritesImages) {
  ASSERT_EQ(train_->code, 0);
  const auto o = run({"reconstruct", "--checkpoint", (runp() / "model.lipc").string(), "--sino",
                      (data() / "test" / "0000.sino_8.lipt").string(), "--mask",
                      (data() / "test" / "0000.mask_8.lipt").string(), "--out", (root() / "rec").string(),
                      "--stages-out", (root() / "rec_stages").string(), "--stages", "3"});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_NE(o.out.find("stages=3"), std::string::npos);
  EXPECT_NE(o.out.find("views=8"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(root() / "rec" / "final.pgm"));
  EXPECT_EQ(load_tensor(root() / "rec" / "final.lipt").dims(), (Dims{32, 32}));
  EXPECT_TRUE(std::filesystem::exists(root() / "rec_stages" / "stage_3.lipt"));
  // A sinogram that does not fit the mask is a user error.
  const auto bad = run({"reconstruct", "--checkpoint", (runp() / "model.lipc").string(), "--sino",
                        (data() / "test" / "0000.sino_12.lipt").string(), "--mask",
                        (data() / "test" / "0000.mask_8.lipt").string(), "--out", (root() / "rec2").string()});
  EXPECT_EQ(bad.code, 1);
}

TEST_F(CliPipeline, NonFiniteModelExitsWithTwo) {
  ASSERT_EQ(train_->code, 0);
  const auto dir = root() / "broken";
  std::filesystem::create_directories(dir);
  Model m = load_model(runp() / "model.lipc");
  // Largest f32-representable filters: every frame application multiplies
  // magnitudes by ~1e77, so a few stages overflow f64.
  auto& w = m.params.get("frame.filters").value;
  double peak = 0.0;
  for (double v : w.data()) peak = std::max(peak, std::abs(v));
  w *= 3e38 / peak;
  save_model(dir / "model.lipc", m);
  const auto o = run({"reconstruct", "--checkpoint", (dir / "model.lipc").string(), "--sino",
                      (data() / "test" / "0000.sino_8.lipt").string(), "--mask",
                      (data() / "test" / "0000.mask_8.lipt").string(), "--out", (root() / "rec3").string(),
                      "--stages", "5"});
  EXPECT_EQ(o.code, 2) << o.err;
  EXPECT_NE(o.err.find("numeric failure"), std::string::npos);
}

TEST_F(CliPipeline, InfoListsCheckpoint) {
  ASSERT_EQ(train_->code, 0);
  const auto o = run({"info", "--checkpoint", (runp() / "model.lipc").string()});
  ASSERT_EQ(o.code, 0);
  EXPECT_NE(o.out.find("frame.filters"), std::string::npos);
  EXPECT_NE(o.out.find("status=ok"), std::string::npos);
  // A truncated checkpoint is reported, not crashed on.
  const std::string bytes = slurp(runp() / "model.lipc");
  std::ofstream(root() / "cut.lipc", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_EQ(run({"info", "--checkpoint", (root() / "cut.lipc").string()}).code, 1);
}

TEST_F(CliPipeline, ReportAddsFbpRow) {
  ASSERT_EQ(train_->code, 0);
  const auto o = run({"report", runp().string(), "--out", (root() / "report").string()});
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_NE(o.out.find("rows=2"), std::string::npos);
  const std::string csv = slurp(root() / "report" / "report.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "model,params,psnr8,ssim8,rmse8,psnr12,ssim12,rmse12,psnr_mean,ssim_mean,rmse_mean");
  EXPECT_EQ(csv.substr(csv.find('\n') + 1, 6), "FBP,0,");
  EXPECT_TRUE(std::filesystem::exists(root() / "report" / "report.md"));
  EXPECT_EQ(run({"report", (root() / "nothing").string(), "--out", (root() / "r2").string()}).code, 1);
}

TEST_F(CliPipeline, VerifySuites) {
  ASSERT_EQ(train_->code, 0);
  const std::string ckpt = (runp() / "model.lipc").string();
  const auto lemma = run({"verify", "--checkpoint", ckpt, "--suite", "lemma1", "--views", "8", "--out",
                          (root() / "v1").string()});
  ASSERT_EQ(lemma.code, 0) << lemma.err;
  EXPECT_NE(lemma.out.find("lemma1_max_ratio="), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(root() / "v1" / "lemma1.csv"));
  const auto stages = run({"verify", "--checkpoint", ckpt, "--suite", "stages", "--views", "8", "--data", data().string(), "--out",
                           (root() / "v2").string()});
  ASSERT_EQ(stages.code, 0) << stages.err << stages.out;
  EXPECT_EQ(read_trace_csv(root() / "v2" / "stages.csv").size(), 10u);
  // Dataset-backed suites need a dataset.
  EXPECT_EQ(run({"verify", "--checkpoint", ckpt, "--suite", "contraction", "--views", "8", "--out",
                 (root() / "v3").string()})
                .code,
            1);
  EXPECT_EQ(run({"verify", "--checkpoint", ckpt, "--suite", "everything"}).code, 1);
}
