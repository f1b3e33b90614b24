#include <gtest/gtest.h>

#include <numbers>
#include <set>

#include "ept/data.hpp"
#include "ept/ratio_fit.hpp"
#include "test_support.hpp"

namespace {

using namespace ept;
using ad::Var;

Var constant_field(Var x, double c) { return 0.0 * ad::row_sqnorm(x) + c; }
Var identity_1d(Var x) { return ad::reshape(x, Shape{x.value().rows()}); }

Tensor column(std::vector<double> v) {
  const auto n = v.size();
  return Tensor::matrix(n, 1, std::move(v));
}

// p = N(0,1) and q = N(1,1) in one dimension.
struct GaussianPair {
  Tensor p, q;
  explicit GaussianPair(std::size_t n, std::uint64_t seed = 0) {
    Stream s(seed, "gaussian-pair");
    p = normal_matrix(n, 1, s);
    q = normal_matrix(n, 1, s);
    for (double& v : q.values()) v += 1.0;
  }
};

TEST(Lsdr, ConstantOneGivesMinusOne) {
  ad::Tape t;
  const auto f = [](Var x) { return constant_field(x, 1.0); };
  EXPECT_DOUBLE_EQ(lsdr_loss(t, f, column({0, 1, 2}), column({3, 4, 5}), 0.0).total.value().item(), -1.0);
}

TEST(Lsdr, ZeroFieldGivesZeroForAnyAlpha) {
  for (double alpha : {0.0, 0.5, 3.0}) {
    ad::Tape t;
    const auto f = [](Var x) { return constant_field(x, 0.0); };
    EXPECT_EQ(lsdr_loss(t, f, column({0, 1}), column({2, 3}), alpha).total.value().item(), 0.0);
  }
}

TEST(Lsdr, HandArithmetic) {
  ad::Tape t;
  EXPECT_DOUBLE_EQ(lsdr_loss(t, identity_1d, column({0, 2}), column({1, 1}), 0.0).total.value().item(), 0.0);
  ad::Tape u;
  EXPECT_DOUBLE_EQ(lsdr_loss(u, identity_1d, column({0, 2}), column({1, 1}), 1.0).total.value().item(), 1.0);
}

TEST(Lsdr, RejectsEmptyOrMismatchedBatches) {
  ad::Tape t;
  EXPECT_THROW(lsdr_loss(t, identity_1d, Tensor(Shape{0, 1}), column({1}), 0.0), std::invalid_argument);
  EXPECT_THROW(lsdr_loss(t, identity_1d, column({1}), Tensor(Shape{1, 2}), 0.0), ShapeError);
}

TEST(Lsdr, PointwiseTermsAverageToTheLoss) {
  const Tensor rx = Tensor::vector({0.5, 2.0, 1.5}), ry = Tensor::vector({1.0, 0.25, 3.0});
  const Tensor terms = lsdr_pointwise(rx, ry);
  double mean = 0;
  for (double v : terms.storage()) mean += v / 3;
  EXPECT_DOUBLE_EQ(mean, (0.25 + 4 + 2.25) / 3 - 2 * (1 + 0.25 + 3) / 3);
}

TEST(Lr, ConstantOneMatchesDirectFormula) {
  ad::Tape t;
  const auto f = [](Var x) { return constant_field(x, 1.0); };
  const double got = lr_loss(t, f, column({0, 1}), column({2, 3}), 0.0).total.value().item();
  // g'(1) R - g(1) = log 2 and g'(1) = log(1/2).
  const double want = std::log(2.0) - std::log(0.5);
  EXPECT_NEAR(got, want, 1e-12);
  EXPECT_NEAR(got, 2 * std::numbers::ln2, 1e-12);
}

TEST(Lr, ZeroAlphaIsTheRawScore) {
  const Mlp net = init_scalar_net(1, {8}, 2);
  const NetField f{&net, OutputLink::Softplus};
  ad::Tape t;
  const LossTerms a = lr_loss(t, f, column({0.1, -0.4}), column({1.2, 0.7}), 0.0);
  EXPECT_EQ(a.total.value().item(), a.score.value().item());
  ad::Tape u;
  const LossTerms b = lr_loss(u, f, column({0.1, -0.4}), column({1.2, 0.7}), 0.3);
  EXPECT_EQ(b.score.value().item(), a.score.value().item());
  EXPECT_GT(b.total.value().item(), b.score.value().item());
}

TEST(Lr, TrueRatioBeatsShiftedRatio) {
  const GaussianPair pair(100000);
  const auto truth = [](Var x) { return ad::exp(identity_1d(x) - 0.5); };
  const auto shifted = [&](Var x) { return truth(x) + 0.1; };
  ad::Tape t;
  const double at_truth = lr_loss(t, truth, pair.p, pair.q, 0.0).total.value().item();
  const double at_shift = lr_loss(t, shifted, pair.p, pair.q, 0.0).total.value().item();
  EXPECT_LT(at_truth, at_shift);
}

TEST(DensityDiff, ZeroAndConstantFields) {
  ad::Tape t;
  const auto zero = [](Var x) { return constant_field(x, 0.0); };
  EXPECT_EQ(density_diff_loss(t, zero, column({0, 1}), column({2}), nullptr, 1.0).total.value().item(), 0.0);
  for (double c : {-1.5, 0.3, 2.0}) {
    const auto fc = [c](Var x) { return constant_field(x, c); };
    const double got = density_diff_loss(t, fc, column({0, 1, 4}), column({2, 5}), nullptr, 0.0).total.value().item();
    EXPECT_NEAR(got, 2 * c - 2 * c + c * c, 1e-14);
  }
}

TEST(DensityDiff, ExplicitBaseBatchIsUsed) {
  ad::Tape t;
  const Tensor w = column({3.0});
  const double got = density_diff_loss(t, identity_1d, column({1}), column({2}), &w, 0.0).total.value().item();
  EXPECT_DOUBLE_EQ(got, 2 * 1 - 2 * 2 + 9);
}

TEST(DensityDiff, FittedFieldRecoversDifferenceSign) {
  // The minimiser is (q - p) / w with w the pooled law: zero at x = 0.5.
  const GaussianPair pair(20000, 1);
  RatioFitter fitter({ObjectiveKind::DensityDiff, 0.0}, init_scalar_net(1, {64, 64, 64}, 1), RmsPropOptions{1e-3},
                     1000, 1);
  fitter.fit(pair.p, pair.q, 3000);
  const Tensor d = eval_batch(fitter.net(), column({-1.5, 0.5, 2.5}));
  EXPECT_NEAR(d[1], 0.0, 0.05);
  EXPECT_LT(d[0], -0.3);
  EXPECT_GT(d[2], 0.3);
}

TEST(FitLoop, ZeroStepsIsAPreconditionError) {
  Mlp net = init_scalar_net(2, {4}, 0);
  RmsProp opt;
  EXPECT_THROW(fit_step_loop({}, net, Tensor(Shape{10, 2}), Tensor(Shape{10, 2}), 0, 5, opt), std::invalid_argument);
}

TEST(FitLoop, DefaultStepsAndBatch) {
  Stream s(2, "data");
  const Tensor x = normal_matrix(5000, 2, s), y = normal_matrix(5000, 2, s);
  Mlp net = init_scalar_net(2, {64, 64, 64}, 0);
  RmsProp opt(RmsPropOptions{5e-4});
  const FitReport r = fit_step_loop({ObjectiveKind::Lsdr, 0.5}, net, x, y, 5, 1000, opt);
  EXPECT_EQ(r.steps, 5u);
  EXPECT_EQ(r.loss.size(), 5u);
  EXPECT_EQ(r.penalty.size(), 5u);
  EXPECT_GT(r.mean_grad_norm, 0.0);
  EXPECT_EQ(opt.accumulators().size(), net.parameters().size());
}

TEST(FitLoop, ZeroLearningRateFreezesEverything) {
  Stream s(3, "data");
  const Tensor x = normal_matrix(400, 2, s), y = normal_matrix(400, 2, s);
  Mlp net = init_scalar_net(2, {16, 16}, 5);
  const Mlp before = net;
  RmsProp opt(RmsPropOptions{0.0});
  // Full-population batches: every step sees the same points in a new order.
  const FitReport r = fit_step_loop({ObjectiveKind::Lsdr, 0.0}, net, x, y, 6, 400, opt);
  for (std::size_t k = 0; k < net.parameters().size(); ++k)
    EXPECT_EQ(net.parameters()[k]->storage(), before.parameters()[k]->storage());
  for (double l : r.loss) EXPECT_NEAR(l, r.loss.front(), 1e-12);
}

TEST(FitLoop, DivergentLossAborts) {
  Mlp net = Mlp::zeros({1, 4, 1});
  net.layers().back().bias[0] = 1e4;
  RmsProp opt;
  try {
    fit_step_loop({}, net, column({0, 1, 2}), column({0, 1, 2}), 3, 2, opt);
    FAIL() << "expected a divergence";
  } catch (const FitDivergence& e) {
    EXPECT_EQ(e.report.steps, 1u);
    EXPECT_GT(e.report.final_loss, kDivergentLoss);
  }
}

TEST(FitLoop, BatchLargerThanDataIsRejected) {
  Mlp net = init_scalar_net(1, {4}, 0);
  RmsProp opt;
  EXPECT_THROW(fit_step_loop({}, net, column({0, 1}), column({0, 1, 2}), 1, 3, opt), std::invalid_argument);
}

TEST(EpochSampler, EachEpochIsAPermutationWithoutReplacement) {
  EpochSampler s(Stream(1, "sampler"), 10, 3);
  for (int epoch = 0; epoch < 4; ++epoch) {
    std::set<std::size_t> seen;
    for (int b = 0; b < 3; ++b)
      for (std::size_t i : s.next()) EXPECT_TRUE(seen.insert(i).second);
    EXPECT_EQ(seen.size(), 9u);
  }
  EXPECT_EQ(s.epoch(), 3u);
}

TEST(EpochSampler, RestoreContinuesTheSameSequence) {
  EpochSampler a(Stream(1, "sampler"), 50, 7);
  for (int i = 0; i < 11; ++i) a.next();
  EpochSampler b(Stream(1, "sampler"), 50, 7);
  b.restore(a.epoch(), a.cursor());
  for (int i = 0; i < 20; ++i) EXPECT_EQ(a.next(), b.next());
}

TEST(Objective, NamesRoundTrip) {
  for (auto k : {ObjectiveKind::Lsdr, ObjectiveKind::Lr, ObjectiveKind::DensityDiff})
    EXPECT_EQ(parse_objective_kind(to_string(k)), k);
  EXPECT_THROW(parse_objective_kind("kliep"), std::invalid_argument);
  EXPECT_THROW((FitObjective{ObjectiveKind::Lsdr, -1.0}.validate()), std::invalid_argument);
}

// Monte Carlo LSDR loss of a plain function and the standard error of its
// difference to a reference function on the same samples.
struct MonteCarloGap {
  double gap = 0, se = 0;
};

template <class F, class G>
MonteCarloGap lsdr_gap(const GaussianPair& pair, F truth, G other) {
  const std::size_t n = pair.p.rows();
  std::vector<double> d(n);
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = pair.p[i], y = pair.q[i];
    const double a = truth(x) * truth(x) - 2 * truth(y);
    const double b = other(x) * other(x) - 2 * other(y);
    d[i] = b - a;
    mean += d[i] / static_cast<double>(n);
  }
  double var = 0;
  for (double v : d) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n - 1);
  return {mean, std::sqrt(var / static_cast<double>(n))};
}

TEST(Properties, TrueRatioMinimisesLsdrLoss) {
  const GaussianPair pair(100000, 2);
  const auto r = [](double x) { return std::exp(x - 0.5); };
  for (double eps : {0.1, 0.3}) {
    const auto perturbed = [&](double x) { return r(x) * (1 + eps * std::sin(x)); };
    const MonteCarloGap g = lsdr_gap(pair, r, perturbed);
    EXPECT_GT(g.gap, 0.0) << "eps " << eps;
    // The 3-standard-error margin is only resolvable at the larger
    // perturbation with this sample size; the acceptance runner reports both.
    if (eps > 0.2) {
      EXPECT_GT(g.gap, 3 * g.se) << "eps " << eps;
    }
  }
  // The taped loss agrees with the plain evaluation.
  ad::Tape t;
  const auto truth = [](Var x) { return ad::exp(identity_1d(x) - 0.5); };
  double plain = 0;
  for (std::size_t i = 0; i < pair.p.rows(); ++i) plain += r(pair.p[i]) * r(pair.p[i]) - 2 * r(pair.q[i]);
  plain /= static_cast<double>(pair.p.rows());
  EXPECT_NEAR(lsdr_loss(t, truth, pair.p, pair.q, 0.0).total.value().item(), plain, 1e-10);
}

TEST(Properties, PenaltyShrinksFittedGradients) {
  Stream s(4, "pair2d");
  const Tensor x = normal_matrix(4000, 2, s);
  Tensor y = normal_matrix(4000, 2, s);
  for (double& v : y.values()) v = 0.7 * v + 0.8;
  double previous = std::numeric_limits<double>::infinity();
  for (double alpha : {0.0, 0.5, 2.0}) {
    RatioFitter fitter({ObjectiveKind::Lsdr, alpha}, init_scalar_net(2, {32, 32}, 3), RmsPropOptions{1e-3}, 500, 3);
    fitter.fit(x, y, 600);
    const double norm = RatioFitter::mean_row_norm(evaluate_field(fitter.field(), x).gradients);
    EXPECT_LE(norm, previous) << "alpha " << alpha;
    previous = norm;
  }
}

TEST(Properties, ObjectiveGradientsMatchFiniteDifferences) {
  Stream s(5, "tiny");
  const Tensor x = ept::testing::uniform_tensor(Shape{7, 2}, -2, 2, s);
  const Tensor y = ept::testing::uniform_tensor(Shape{7, 2}, -2, 2, s);
  for (auto kind : {ObjectiveKind::Lsdr, ObjectiveKind::Lr, ObjectiveKind::DensityDiff}) {
    const FitObjective obj{kind, 0.7};
    Mlp net = init_scalar_net(2, {2}, 8);
    net.layers()[0].bias[0] = 0.3;
    net.layers()[0].bias[1] = 0.2;
    auto loss_of = [&](const Mlp& n) {
      ad::Tape t;
      return objective_loss(t, obj, NetField{&n, obj.link()}, x, y).total.value().item();
    };
    ad::Tape t;
    const auto params = net.bind(t, true);
    const NetField nf{&net, obj.link()};
    const auto field = [&](Var xs) { return nf(xs, params); };
    const auto grads = ad::second_order_param_grad(objective_loss(t, obj, field, x, y).total, params);
    std::vector<double> got, want;
    Mlp probe = net;
    auto ps = probe.parameters();
    const double h = 1e-5;
    for (std::size_t k = 0; k < ps.size(); ++k) {
      for (std::size_t i = 0; i < ps[k]->size(); ++i) {
        const double orig = (*ps[k])[i];
        (*ps[k])[i] = orig + h;
        const double up = loss_of(probe);
        (*ps[k])[i] = orig - h;
        const double down = loss_of(probe);
        (*ps[k])[i] = orig;
        got.push_back(grads[k][i]);
        want.push_back((up - down) / (2 * h));
      }
    }
    EXPECT_LT(ept::testing::rel_err(got, want), 1e-4) << to_string(kind);
  }
}

TEST(Properties, MatchedDistributionsDriveLossToMinusOne) {
  Stream s(6, "matched");
  const Tensor x = normal_matrix(10000, 2, s), y = normal_matrix(10000, 2, s);
  RatioFitter fitter({ObjectiveKind::Lsdr, 0.0}, init_scalar_net(2, {64, 64, 64}, 6), RmsPropOptions{5e-4}, 1000, 6);
  const FitReport r = fitter.fit(x, y, 1000);
  EXPECT_NEAR(r.final_loss, -1.0, 0.1);
}

}  // namespace
