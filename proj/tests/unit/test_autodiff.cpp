#include <chrono>
#include <random>

#include "promptct/autodiff.hpp"
#include "promptct/errors.hpp"
#include "promptct/geometry.hpp"
#include "promptct/lipnet.hpp"
#include "promptct/simulate.hpp"
#include "test_util.hpp"

using namespace promptct;
using promptct::test::random_tensor;
using promptct::test::rel_err;

namespace {

// Central differences written directly against a loss closure.
Tensor central_difference(const std::function<double()>& loss, Tensor& value, double h) {
  Tensor g = Tensor::zeros_like(value);
  for (std::size_t i = 0; i < value.size(); ++i) {
    const double saved = value[i];
    value[i] = saved + h;
    const double up = loss();
    value[i] = saved - h;
    const double down = loss();
    value[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Weighted sum of squares keeps every output entry in the loss.
ad::Var probe_loss(ad::Tape& tape, const ad::Var& out, std::uint64_t seed) {
  return ad::sum_squares(ad::mul(out, tape.constant(random_tensor(out.dims(), seed, 0.5, 1.5))));
}

class DiagonalOperator final : public ad::LinearOperator {
 public:
  explicit DiagonalOperator(Tensor d) : d_(std::move(d)) {}
  Tensor apply(const Tensor& x) const override {
    Tensor y = x;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= d_[i];
    return y;
  }
  Tensor apply_adjoint(const Tensor& y) const override { return apply(y); }

 private:
  Tensor d_;
};

}  // namespace

TEST(Tape, SquaredNormGradient) {
  ModelParams params;
  Parameter& p = params.add("p", random_tensor({3, 4}, 1));
  params.zero_grad();
  ad::Tape tape;
  tape.backward(ad::sum_squares(tape.param(p)));
  EXPECT_LT(rel_err(p.grad, p.value * 2.0), 1e-15);
}

TEST(Tape, ConvLayerMatchesCentralDifferences) {
  ModelParams params;
  Parameter& K = params.add("k", random_tensor({2, 1, 3, 3}, 2));
  const Tensor x = random_tensor({1, 6, 6}, 3);
  const Tensor target = random_tensor({2, 6, 6}, 4);
  auto build = [&](ad::Tape& tape) {
    return ad::sum_squares(ad::sub(ad::conv2d(tape.constant(x), tape.param(K)), tape.constant(target)));
  };
  params.zero_grad();
  {
    ad::Tape tape;
    tape.backward(build(tape));
  }
  auto eval = [&] {
    ad::Tape tape(false);
    return build(tape).value()[0];
  };
  EXPECT_LT(rel_err(K.grad, central_difference(eval, K.value, 1e-5)), 1e-6);
}

TEST(Tape, ConstantLossGivesZeroGradients) {
  ModelParams params;
  Parameter& p = params.add("p", random_tensor({4}, 5));
  params.zero_grad();
  ad::Tape tape;
  tape.param(p);
  tape.backward(ad::sum_squares(tape.constant(random_tensor({4}, 6))));
  EXPECT_EQ(max_abs(p.grad), 0.0);
}

TEST(Tape, RepeatedBackwardAccumulates) {
  ModelParams params;
  Parameter& p = params.add("p", random_tensor({5}, 7));
  params.zero_grad();
  ad::Tape tape;
  const auto loss = ad::sum_squares(tape.param(p));
  tape.backward(loss);
  tape.backward(loss);
  EXPECT_LT(rel_err(p.grad, p.value * 4.0), 1e-15);
  params.zero_grad();
  EXPECT_EQ(max_abs(p.grad), 0.0);
}

TEST(Tape, RecordsForwardOrder) {
  ModelParams params;
  Parameter& p = params.add("p", random_tensor({1, 4, 4}, 8));
  Parameter& k = params.add("k", random_tensor({1, 1, 3, 3}, 9));
  ad::Tape tape;
  auto x = tape.param(p);
  auto y = ad::relu(ad::conv2d(x, tape.param(k)));
  ad::sum_squares(y);
  const std::vector<ad::Op> want{ad::Op::Param, ad::Op::Param, ad::Op::Conv2d, ad::Op::Relu, ad::Op::SumSquares};
  EXPECT_EQ(tape.recorded_ops(), want);
}

TEST(Tape, ForeignOrStaleVariablesAreRejected) {
  ModelParams params;
  Parameter& p = params.add("p", random_tensor({3}, 10));
  ad::Tape a;
  ad::Tape b;
  auto va = a.param(p);
  auto vb = b.param(p);
  EXPECT_THROW(ad::add(va, vb), ConsistencyError);
  EXPECT_THROW(b.backward(ad::sum_squares(va)), ConsistencyError);

  a.reset();
  EXPECT_THROW(ad::relu(va), ConsistencyError);
  EXPECT_THROW(ad::add(va, a.param(p)), ConsistencyError);
  EXPECT_THROW(ad::relu(ad::Var()), ConsistencyError);
}

TEST(Tape, NonScalarLossRejected) {
  ModelParams params;
  Parameter& p = params.add("p", random_tensor({3}, 11));
  ad::Tape tape;
  EXPECT_THROW(tape.backward(tape.param(p)), ConsistencyError);
  ad::Tape quiet(false);
  EXPECT_THROW(quiet.backward(ad::sum_squares(quiet.param(p))), ConsistencyError);
}

TEST(Tape, ResetDropsGraph) {
  ModelParams params;
  Parameter& p = params.add("p", random_tensor({3}, 12));
  ad::Tape tape;
  ad::sum_squares(tape.param(p));
  EXPECT_GT(tape.size(), 0u);
  tape.reset();
  EXPECT_EQ(tape.size(), 0u);
  params.zero_grad();
  tape.backward(ad::sum_squares(tape.param(p)));
  EXPECT_LT(rel_err(p.grad, p.value * 2.0), 1e-15);
}

TEST(Tape, NonFiniteValuesRaise) {
  ad::Tape tape;
  Tensor bad({2}, std::vector<double>{1.0, 1e308});
  EXPECT_THROW(ad::scale(tape.constant(bad), 1e10), NumericError);
}

TEST(Params, NamesAreUnique) {
  ModelParams params;
  params.add("a", Tensor({2}));
  EXPECT_THROW(params.add("a", Tensor({2})), ArgumentError);
  EXPECT_THROW(params.get("missing"), ArgumentError);
  params.add("b", Tensor({3}), false);
  EXPECT_EQ(params.scalar_count(), 5u);
  EXPECT_EQ(params.scalar_count(true), 2u);
}

// --- every primitive in isolation ---------------------------------------------------

struct PrimitiveCase {
  const char* name;
  std::function<ad::Var(ad::Tape&, ModelParams&)> build;
  std::function<void(ModelParams&)> setup;
};

class PrimitiveGradient : public ::testing::TestWithParam<int> {};

static std::vector<PrimitiveCase> primitive_cases() {
  static const DiagonalOperator diag(random_tensor({12}, 99, 0.5, 2.0));
  std::vector<PrimitiveCase> cases;
  auto P = [](ModelParams& ps, const char* n) { return std::ref(ps.get(n)); };
  cases.push_back({"conv2d",
                   [P](ad::Tape& t, ModelParams& ps) {
                     return probe_loss(t, ad::conv2d(t.param(P(ps, "x")), t.param(P(ps, "k"))), 1);
                   },
                   [](ModelParams& ps) {
                     ps.add("x", random_tensor({2, 5, 6}, 20));
                     ps.add("k", random_tensor({3, 2, 3, 3}, 21));
                   }});
  cases.push_back({"conv2d_stride2",
                   [P](ad::Tape& t, ModelParams& ps) {
                     return probe_loss(t, ad::conv2d(t.param(P(ps, "x")), t.param(P(ps, "k")), 2), 2);
                   },
                   [](ModelParams& ps) {
                     ps.add("x", random_tensor({2, 7, 6}, 22));
                     ps.add("k", random_tensor({2, 2, 3, 3}, 23));
                   }});
  cases.push_back({"conv2d_adjoint",
                   [P](ad::Tape& t, ModelParams& ps) {
                     return probe_loss(t, ad::conv2d_adjoint(t.param(P(ps, "y")), t.param(P(ps, "k"))), 3);
                   },
                   [](ModelParams& ps) {
                     ps.add("y", random_tensor({3, 5, 5}, 24));
                     ps.add("k", random_tensor({3, 1, 3, 3}, 25));
                   }});
  cases.push_back({"add_bias",
                   [P](ad::Tape& t, ModelParams& ps) {
                     return probe_loss(t, ad::add_bias(t.param(P(ps, "x")), t.param(P(ps, "b"))), 4);
                   },
                   [](ModelParams& ps) {
                     ps.add("x", random_tensor({3, 4, 4}, 26));
                     ps.add("b", random_tensor({3}, 27));
                   }});
  cases.push_back({"relu",
                   [P](ad::Tape& t, ModelParams& ps) { return probe_loss(t, ad::relu(t.param(P(ps, "x"))), 5); },
                   [](ModelParams& ps) { ps.add("x", random_tensor({40}, 28)); }});
  cases.push_back({"clamp",
                   [P](ad::Tape& t, ModelParams& ps) {
                     return probe_loss(t, ad::clamp(t.param(P(ps, "x")), -0.5, 0.6), 6);
                   },
                   [](ModelParams& ps) { ps.add("x", random_tensor({40}, 29)); }});
  cases.push_back({"soft_threshold",
                   [P](ad::Tape& t, ModelParams& ps) {
                     return probe_loss(t, ad::soft_threshold(t.param(P(ps, "u")), t.param(P(ps, "e"))), 7);
                   },
                   [](ModelParams& ps) {
                     ps.add("u", random_tensor({40}, 30, -2.0, 2.0));
                     ps.add("e", random_tensor({40}, 31, 0.1, 1.0));
                   }});
  cases.push_back({"mul_sub_add",
                   [P](ad::Tape& t, ModelParams& ps) {
                     auto a = t.param(P(ps, "a"));
                     auto b = t.param(P(ps, "b"));
                     return probe_loss(t, ad::add(ad::mul(a, b), ad::sub(a, ad::scale(b, 0.3))), 8);
                   },
                   [](ModelParams& ps) {
                     ps.add("a", random_tensor({2, 3}, 32));
                     ps.add("b", random_tensor({2, 3}, 33));
                   }});
  cases.push_back({"mul_scalar",
                   [P](ad::Tape& t, ModelParams& ps) {
                     return probe_loss(t, ad::mul_scalar(t.param(P(ps, "x")), t.param(P(ps, "s"))), 9);
                   },
                   [](ModelParams& ps) {
                     ps.add("x", random_tensor({2, 3, 3}, 34));
                     ps.add("s", random_tensor({1}, 35));
                   }});
  cases.push_back({"channel_scale",
                   [P](ad::Tape& t, ModelParams& ps) {
                     return probe_loss(t, ad::channel_scale(t.param(P(ps, "x")), t.param(P(ps, "p"))), 10);
                   },
                   [](ModelParams& ps) {
                     ps.add("x", random_tensor({3, 4, 4}, 36));
                     ps.add("p", random_tensor({3}, 37));
                   }});
  cases.push_back({"fully_connected",
                   [P](ad::Tape& t, ModelParams& ps) {
                     return probe_loss(
                         t, ad::fully_connected(t.param(P(ps, "x")), t.param(P(ps, "w")), t.param(P(ps, "b"))), 11);
                   },
                   [](ModelParams& ps) {
                     ps.add("x", random_tensor({5}, 38));
                     ps.add("w", random_tensor({3, 5}, 39));
                     ps.add("b", random_tensor({3}, 40));
                   }});
  cases.push_back({"global_avg_pool",
                   [P](ad::Tape& t, ModelParams& ps) {
                     return probe_loss(t, ad::global_avg_pool(t.param(P(ps, "x"))), 12);
                   },
                   [](ModelParams& ps) { ps.add("x", random_tensor({3, 4, 5}, 41)); }});
  cases.push_back({"linear_and_adjoint",
                   [P](ad::Tape& t, ModelParams& ps) {
                     auto x = t.param(P(ps, "x"));
                     return probe_loss(t, ad::add(ad::linear(x, diag), ad::linear_adjoint(x, diag)), 13);
                   },
                   [](ModelParams& ps) { ps.add("x", random_tensor({12}, 42)); }});
  cases.push_back({"reshape_sigmoid_affine",
                   [P](ad::Tape& t, ModelParams& ps) {
                     auto x = ad::reshape(t.param(P(ps, "x")), {3, 4});
                     return probe_loss(t, ad::affine(ad::sigmoid(x), 0.7, -0.2), 14);
                   },
                   [](ModelParams& ps) { ps.add("x", random_tensor({12}, 43, -3.0, 3.0)); }});
  cases.push_back({"sum_abs",
                   [P](ad::Tape& t, ModelParams& ps) { return ad::sum_abs(t.param(P(ps, "x"))); },
                   [](ModelParams& ps) { ps.add("x", random_tensor({30}, 44)); }});
  cases.push_back({"spectral_scale",
                   [P](ad::Tape& t, ModelParams& ps) {
                     return probe_loss(
                         t, ad::spectral_scale(t.param(P(ps, "x")), t.param(P(ps, "wr")), t.param(P(ps, "wi"))), 15);
                   },
                   [](ModelParams& ps) {
                     ps.add("x", random_tensor({2, 8, 8}, 45));
                     ps.add("wr", random_tensor({8, 8}, 46));
                     ps.add("wi", random_tensor({8, 8}, 47));
                   }});
  cases.push_back({"window_attention",
                   [P](ad::Tape& t, ModelParams& ps) {
                     return probe_loss(t,
                                       ad::window_attention(t.param(P(ps, "x")), t.param(P(ps, "q")),
                                                            t.param(P(ps, "k")), t.param(P(ps, "v")),
                                                            t.param(P(ps, "o")), 4),
                                       16);
                   },
                   [](ModelParams& ps) {
                     ps.add("x", random_tensor({2, 8, 8}, 48));
                     ps.add("q", random_tensor({2, 2}, 49));
                     ps.add("k", random_tensor({2, 2}, 50));
                     ps.add("v", random_tensor({2, 2}, 51));
                     ps.add("o", random_tensor({2, 2}, 52));
                   }});
  return cases;
}

TEST_P(PrimitiveGradient, MatchesFiniteDifferences) {
  const auto cases = primitive_cases();
  const auto& c = cases.at(static_cast<std::size_t>(GetParam()));
  ModelParams params;
  c.setup(params);
  FiniteDiffOptions opt;
  opt.step = 1e-6;
  const auto report = finite_diff_check([&](ad::Tape& t) { return c.build(t, params); }, params, opt);
  EXPECT_TRUE(report.pass) << c.name << " max rel err " << report.max_rel_err;
  EXPECT_LT(report.max_rel_err, 1e-4) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient,
                         ::testing::Range(0, static_cast<int>(primitive_cases().size())),
                         [](const ::testing::TestParamInfo<int>& info) {
                           return std::string(primitive_cases()[static_cast<std::size_t>(info.param)].name);
                         });

// --- finite_diff_check ------------------------------------------------------------------

TEST(FiniteDiff, LinearModelIsExact) {
  ModelParams params;
  Parameter& x = params.add("x", random_tensor({6}, 60));
  const Tensor w = random_tensor({1, 6}, 61);
  const auto report = finite_diff_check(
      [&](ad::Tape& t) { return ad::fully_connected(t.param(x), t.constant(w), t.constant(Tensor({1}))); }, params);
  EXPECT_TRUE(report.pass);
  EXPECT_LT(report.max_rel_err, 1e-9);
}

TEST(FiniteDiff, CorruptedGradientFails) {
  ModelParams params;
  Parameter& x = params.add("x", random_tensor({6}, 62));
  FiniteDiffOptions opt;
  opt.tamper = [](ModelParams& ps) { ps.get("x").grad[2] += 0.5; };
  const auto report = finite_diff_check([&](ad::Tape& t) { return ad::sum_squares(t.param(x)); }, params, opt);
  EXPECT_FALSE(report.pass);
  ASSERT_EQ(report.entries.size(), 1u);
  EXPECT_FALSE(report.entries[0].pass);
}

TEST(FiniteDiff, ParameterLimitEnforced) {
  ModelParams params;
  Parameter& x = params.add("x", Tensor({50001}, 0.1));
  const auto report = finite_diff_check([&](ad::Tape& t) { return ad::sum_squares(t.param(x)); }, params);
  EXPECT_FALSE(report.pass);
  EXPECT_NE(report.message.find("limit"), std::string::npos);
}

TEST(FiniteDiff, RestoresParameters) {
  ModelParams params;
  Parameter& x = params.add("x", random_tensor({8}, 63));
  const Tensor before = x.value;
  finite_diff_check([&](ad::Tape& t) { return ad::sum_abs(ad::relu(t.param(x))); }, params);
  EXPECT_EQ(x.value, before);
}

// Desk-size LipNet (F = 16, 64 x 64, prompt on a 360 x 95 mask), one inner
// stage, at a perturbed parameter point.
TEST(FiniteDiff, DeskScaleLipNetOneStage) {
  LipNetConfig cfg;
  cfg.stages = 1;
  ModelParams params = init_lipnet_params(cfg, 5);
  std::mt19937_64 rng(77);
  std::normal_distribution<double> jitter(0.0, 0.1);
  for (auto& p : params.items()) {
    if (!p.trainable || p.name == "schedule.tau") continue;
    for (auto& v : p.value.storage()) v += jitter(rng);
  }
  const Tensor x = rasterize(shepp_logan(64).ellipses, 64) + random_tensor({64, 64}, 64, -0.05, 0.05);
  const Tensor gt = rasterize(shepp_logan(64).ellipses, 64);
  const Tensor mask = make_mask(360, 95, subsample_views(360, 60));
  auto builder = [&](ad::Tape& tape) {
    BoundParams bp(tape, params);
    const auto p = net::prompt_encode(bp, cfg, tape.constant(mask.reshaped({1, 360, 95})));
    const auto res =
        net::lipnet_apply(bp, cfg, tape.constant(x.reshaped({1, 64, 64})), &p, 1, bp["schedule.sigma0"]);
    return ad::sum_squares(ad::sub(res.z, tape.constant(gt.reshaped({1, 64, 64}))));
  };
  FiniteDiffOptions opt;
  opt.step = 1e-6;
  const auto report = finite_diff_check(builder, params, opt);
  for (const auto& e : report.entries) EXPECT_TRUE(e.pass) << e.name << " rel err " << e.rel_err;
  EXPECT_LT(report.max_rel_err, 1e-4);
}
