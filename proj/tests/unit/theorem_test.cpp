#include <gtest/gtest.h>

#include <cmath>

#include "ctxedit/autodiff.hpp"
#include "ctxedit/rng.hpp"
#include "ctxedit/theorem.hpp"

namespace ctxedit::theorem {
namespace {

ScenarioParams base(std::size_t M = 512, double delta = 1.0, std::uint64_t seed = 0) {
  ScenarioParams p;
  p.M = M;
  p.T = 12;
  p.N = 2;
  p.delta = delta;
  p.eta_fraction = 0.6;
  p.seed = seed;
  return p;
}

double max_abs(const Tensor& a, const Tensor& b) {
  double w = 0;
  for (std::size_t i = 0; i < a.size(); ++i) w = std::max(w, std::abs(a[i] - b[i]));
  return w;
}

TEST(BuildScenario, ReferenceInstance) {
  const auto built = build_scenario(base());
  const auto& s = built.scenario;
  EXPECT_NEAR(s.r, 0.70711, 1e-5);
  EXPECT_NEAR(s.eta, 0.8, 1e-15);
  EXPECT_NEAR(s.A, 18.71, 5e-3);
  EXPECT_EQ(s.context.size(), 11u);
  EXPECT_NE(s.p, s.q);
}

TEST(BuildScenario, TokenLayout) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = build_scenario(base(256, 2.0, seed)).scenario;
    std::vector<TokenId> all = s.context;
    all.push_back(s.query);
    all.push_back(s.target);
    std::sort(all.begin(), all.end());
    EXPECT_EQ(std::adjacent_find(all.begin(), all.end()), all.end()) << "tokens not distinct";
    for (TokenId t : all) {
      EXPECT_GE(t, 2);
      EXPECT_LT(t, 254);
    }
    EXPECT_EQ(std::count(s.context.begin(), s.context.end(), s.p), 1);
    EXPECT_EQ(std::count(s.context.begin(), s.context.end(), s.q), 1);
    EXPECT_GE(s.s_p + s.s_q, 1.0 - 1.0 / 256);
  }
}

TEST(BuildScenario, RejectsBadParameters) {
  auto p = base();
  p.M = 32;
  EXPECT_THROW(build_scenario(p), std::invalid_argument);
  p = base();
  p.T = 2;
  EXPECT_THROW(build_scenario(p), std::invalid_argument);
  p = base();
  p.N = 9;
  EXPECT_THROW(build_scenario(p), std::invalid_argument);
  p = base();
  p.delta = 0;
  EXPECT_THROW(build_scenario(p), std::invalid_argument);
  p = base();
  p.eta_fraction = 1.0;
  EXPECT_THROW(build_scenario(p), std::invalid_argument);
}

TEST(BuildScenario, MassesFromSoftmaxDirectly) {
  // Softmax over the context evaluated from the raw row of Z.
  for (double delta : {0.5, 1.0, 2.0}) {
    const auto built = build_scenario(base(512, delta));
    const auto& s = built.scenario;
    const auto q = static_cast<std::size_t>(s.query);
    double z = 0;
    for (TokenId t : s.context) z += std::exp(built.model.Z(q, static_cast<std::size_t>(t)));
    const double sp = std::exp(built.model.Z(q, static_cast<std::size_t>(s.p))) / z;
    const double sq = std::exp(built.model.Z(q, static_cast<std::size_t>(s.q))) / z;
    EXPECT_NEAR(sq / sp, delta, 1e-12);
    EXPECT_LT(1.0 - sp - sq, 1.0 / 512);
    EXPECT_NEAR(s.s_p, sp, 1e-15);
  }
}

TEST(BuildScenario, SymmetricAtUnitDelta) {
  const auto built = build_scenario(base());
  const auto& s = built.scenario;
  EXPECT_NEAR(s.s_p, s.s_q, 1e-15);
  const auto f = forward(built.model, s.context, s.query);
  EXPECT_NEAR(f.norm_u, s.s_p * std::sqrt(2.0), 1e-12);
}

TEST(Forward, ZeroHeadIsUniform) {
  auto built = build_scenario(base(256));
  built.model.Y.fill(0.0);
  const auto f = forward(built.model, built.scenario.context, built.scenario.query);
  for (double x : f.logits.data()) EXPECT_EQ(x, 0.0);
  for (double x : f.probs.data()) EXPECT_NEAR(x, 1.0 / 256, 1e-15);
}

TEST(Forward, PreUpdateLogitsAndTargetProbability) {
  const auto built = build_scenario(base(512, 2.0));
  const auto& s = built.scenario;
  const auto f = forward(built.model, s.context, s.query);
  const double Delta = f.norm_u;
  const double rp = s.s_p * s.r / Delta;
  const double rq = s.s_q * s.r / Delta;
  for (TokenId k : s.assoc_p) EXPECT_NEAR(f.logits[k], rp, 1e-14);
  for (TokenId k : s.assoc_q) EXPECT_NEAR(f.logits[k], rq, 1e-14);
  EXPECT_EQ(f.logits[s.target], 0.0);
  const double denom = 512 - 4 + 2 * (std::exp(rp) + std::exp(rq));
  EXPECT_NEAR(f.probs[s.target], 1.0 / denom, 1e-15);
  EXPECT_NEAR(Delta, std::sqrt(s.s_p * s.s_p + s.s_q * s.s_q), 1e-6);
}

TEST(Forward, DegenerateContextRejected) {
  ReparamModel m{Tensor(Shape{64, 64}), Tensor(Shape{64, 64})};
  EXPECT_THROW(forward(m, {}, 3), std::invalid_argument);
}

TEST(ManualGradY, MatchesAutodiffAndClosedForms) {
  const auto built = build_scenario(base(512, 1.0));
  const auto& s = built.scenario;
  const Tensor dY = manual_grad_Y(built.model, s);
  Tensor ad = autodiff_gradients(built.model, s).dY;
  for (auto& x : ad.data()) x *= s.eta;
  EXPECT_LE(max_abs(dY, ad), 1e-10);

  const auto f = forward(built.model, s.context, s.query);
  const double scale = s.eta * s.s_p / f.norm_u;
  const auto p = static_cast<std::size_t>(s.p);
  EXPECT_NEAR(dY(p, static_cast<std::size_t>(s.target)) / scale, 1.0, 50.0 / 512);
  EXPECT_NEAR(dY(p, static_cast<std::size_t>(s.target)), scale * (1 - f.probs[s.target]), 1e-15);
  const double rp = s.s_p * s.r / f.norm_u;
  for (TokenId k : s.assoc_p) {
    const double expect = -scale * std::exp(rp) / 512;
    EXPECT_NEAR(dY(p, static_cast<std::size_t>(k)) / expect, 1.0, 50.0 / 512);
  }
}

TEST(ManualGradZ, ExactFormMatchesAutodiff) {
  for (double delta : {0.5, 1.0, 2.0}) {
    const auto built = build_scenario(base(256, delta, 4));
    const auto& s = built.scenario;
    const auto z = manual_grad_Z(built.model, s);
    Tensor ad = autodiff_gradients(built.model, s).dZrow;
    for (auto& x : ad.data()) x *= s.eta;
    EXPECT_LE(max_abs(z.exact, ad), 1e-12);
    EXPECT_TRUE(z.literal.all_finite());
  }
}

TEST(ManualGradZ, SymmetricCaseHasNoPQDifference) {
  const auto built = build_scenario(base(512, 1.0));
  const auto& s = built.scenario;
  const auto z = manual_grad_Z(built.model, s);
  EXPECT_NEAR(z.literal[s.q] - z.literal[s.p], 0.0, 1e-12);
  EXPECT_NEAR(z.exact[s.q] - z.exact[s.p], 0.0, 1e-12);
}

TEST(OneStep, DeltaDriftAtDeltaTwo) {
  for (auto source : {GradSource::kLiteral, GradSource::kAutodiff}) {
    const auto run = run_scenario(base(512, 2.0), source);
    EXPECT_GE(run.report.delta_drift, 1.0 - 10.0 / 512);
    EXPECT_LE(run.report.delta_drift, 1.0 + 10.0 / 512);
  }
}

TEST(OneStep, ZeroStepLeavesModelUnchanged) {
  const auto built = build_scenario_with_eta(base(256), 0.0);
  for (auto source : {GradSource::kLiteral, GradSource::kAutodiff}) {
    const auto m = one_step_update(built.model, built.scenario, source);
    EXPECT_EQ(m.Y, built.model.Y);
    EXPECT_EQ(m.Z, built.model.Z);
  }
}

TEST(OneStep, PostUpdateLogitsWithContext) {
  for (double delta : {0.5, 1.0, 2.0}) {
    const auto built = build_scenario(base(1024, delta));
    const auto& s = built.scenario;
    const auto rep = verify_theorem(one_step_update(built.model, s, GradSource::kAutodiff), s);
    const double tol = 50.0 / 1024;
    EXPECT_NEAR(rep.logits_with[s.target] / s.eta, 1.0, tol);
    const double k_expect = s.r / std::sqrt(1 + delta * delta);
    for (TokenId k : s.assoc_p) EXPECT_NEAR(rep.logits_with[k] / k_expect, 1.0, tol);
  }
}

TEST(VerifyTheorem, ReferenceInstanceDichotomy) {
  for (auto source : {GradSource::kLiteral, GradSource::kAutodiff}) {
    const auto run = run_scenario(base(512, 1.0), source);
    const auto& s = run.scenario;
    EXPECT_TRUE(run.report.success_with);
    EXPECT_EQ(run.report.argmax_with, s.target);
    EXPECT_TRUE(run.report.failure_without);
    EXPECT_TRUE(run.report.argmax_without == 0 || run.report.argmax_without == 1);
    // Without q the target logit sits near eta / sqrt(1 + delta^2), under r.
    const double tgt = run.report.logits_without[s.target];
    EXPECT_NEAR(tgt / (s.eta / std::sqrt(2.0)), 1.0, 50.0 / 512);
    EXPECT_LT(tgt, s.r);
  }
}

TEST(VerifyTheorem, LearningRateBelowRegimeFailsWithContext) {
  auto p = base(512, 1.0);
  const auto built = build_scenario_with_eta(p, 0.3);
  const auto rep = verify_theorem(
      one_step_update(built.model, built.scenario, GradSource::kAutodiff), built.scenario);
  EXPECT_FALSE(rep.success_with);
  EXPECT_LT(rep.margin_with, 0.0);
}

// For delta > 1 the q-associated logits sit at about delta / (1 + delta^2),
// above the p-associated ones, so a learning rate just inside the interval
// lower bound still loses to them.
TEST(VerifyTheorem, RegimeGapForLargeDelta) {
  auto p = base(1024, 2.0);
  p.eta_fraction = 0.1;  // eta = 0.28 < 2 / 5
  const auto run = run_scenario(p, GradSource::kAutodiff);
  EXPECT_FALSE(run.report.success_with);
  const auto& aq = run.scenario.assoc_q;
  EXPECT_NE(std::find(aq.begin(), aq.end(), run.report.argmax_with), aq.end());
  p.eta_fraction = 0.3;  // eta = 0.44 > 2 / 5
  EXPECT_TRUE(run_scenario(p, GradSource::kAutodiff).report.success_with);
}

TEST(GradSourceNames, RoundTrip) {
  for (auto g : {GradSource::kLiteral, GradSource::kAutodiff}) {
    EXPECT_EQ(grad_source_from_string(to_string(g)), g);
  }
  EXPECT_THROW(grad_source_from_string("exact"), std::invalid_argument);
}

// Loss log alpha_target as a function of Y (or Z) with everything else fixed.
TEST(ReparamLoss, GradCheck) {
  Rng rng(21);
  std::normal_distribution<double> dist(0.0, 0.5);
  ScenarioParams p;
  p.M = 64;
  p.T = 6;
  p.N = 2;
  p.delta = 1.5;
  for (int trial = 0; trial < 3; ++trial) {
    p.seed = static_cast<std::uint64_t>(trial);
    auto built = build_scenario(p);
    for (auto& x : built.model.Y.data()) x = dist(rng);
    for (auto& x : built.model.Z.data()) x = dist(rng);
    const auto& s = built.scenario;
    const Tensor X = one_hot_rows(s.context, p.M);
    auto loss = [&](auto& t, Var Y, Var Z) {
      const std::size_t qrow[] = {static_cast<std::size_t>(s.query)};
      auto zr = gather_rows(t, Z, std::span<const std::size_t>(qrow));
      auto Xv = t.constant(X);
      auto b = row_softmax(t, matmul(t, zr, transpose(t, Xv)));
      auto logits = matmul(t, l2_normalize(t, matmul(t, b, Xv)), Y);
      const TokenId tgt[] = {s.target};
      return scale(t, log_softmax_nll(t, logits, std::span<const TokenId>(tgt)), -1.0);
    };
    EXPECT_LE(grad_check([&](auto& t, Var Y) { return loss(t, Y, t.constant(built.model.Z)); },
                         built.model.Y, 1e-5),
              1e-6);
    EXPECT_LE(grad_check([&](auto& t, Var Z) { return loss(t, t.constant(built.model.Y), Z); },
                         built.model.Z, 1e-5),
              1e-6);
  }
}

TEST(Properties, ExactnessAndDeltaStability) {
  Rng rng(8);
  std::uniform_real_distribution<double> delta_dist(0.3, 3.0);
  const std::size_t sizes[] = {256, 512, 1024};
  for (int i = 0; i < 100; ++i) {
    ScenarioParams p = base(sizes[i % 3], delta_dist(rng), 1000 + i);
    p.N = 1 + static_cast<std::size_t>(i % 4);
    const auto run = run_scenario(p, GradSource::kAutodiff);
    EXPECT_LE(run.report.gradY_dev, 1e-10);
    EXPECT_LE(std::abs(run.report.delta_drift - 1.0), 50.0 / static_cast<double>(p.M));
  }
}

TEST(Properties, DichotomyOverSeeds) {
  for (std::size_t M : {256, 1024}) {
    for (double delta : {0.5, 1.0, 2.0}) {
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        for (auto source : {GradSource::kLiteral, GradSource::kAutodiff}) {
          const auto rep = run_scenario(base(M, delta, seed), source).report;
          EXPECT_TRUE(rep.success_with && rep.failure_without)
              << "M=" << M << " delta=" << delta << " seed=" << seed;
        }
      }
    }
  }
}

// The margin stays positive at every size and approaches its large-M value
// eta - 1 / (1 + delta^2) from above: the O(1/M) term comes from the
// -eta v_p alpha_k entries of the head update, which lower the competing
// logits more when M is small.
TEST(Properties, MarginPositiveAndConvergesInVocabulary) {
  for (double delta : {0.5, 1.0, 2.0}) {
    double prev_gap = INFINITY;
    for (std::size_t M : {256, 512, 1024, 2048}) {
      const auto run = run_scenario(base(M, delta, 3), GradSource::kAutodiff);
      const double margin = run.report.margin_with;
      const double limit = run.scenario.eta - 1.0 / (1.0 + delta * delta);
      EXPECT_GT(margin, 0.0);
      const double gap = margin - limit;
      EXPECT_GE(gap, 0.0);
      EXPECT_LE(gap, 50.0 / static_cast<double>(M));
      EXPECT_LT(gap, prev_gap) << "M=" << M;
      prev_gap = gap;
    }
  }
}

}  // namespace
}  // namespace ctxedit::theorem
