#include "ctxedit/theorem.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "ctxedit/autodiff.hpp"
#include "ctxedit/rng.hpp"

namespace ctxedit::theorem {
namespace {

void validate(const ScenarioParams& p) {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("theorem scenario: " + what);
  };
  if (p.M < 64) fail("M must be >= 64");
  if (p.T < 3 || p.T > p.M / 4) fail("T must lie in [3, M/4]");
  if (p.N < 1 || p.N > 8) fail("N must lie in [1, 8]");
  if (!(p.delta > 0) || !std::isfinite(p.delta)) fail("delta must be positive");
  if (!(p.eta_fraction > 0 && p.eta_fraction < 1)) fail("eta_fraction must lie in (0, 1)");
}

std::size_t argmax(const Tensor& t) {
  return static_cast<std::size_t>(std::max_element(t.data().begin(), t.data().end()) -
                                  t.data().begin());
}

double best_of(const Tensor& logits, const std::vector<TokenId>& set) {
  double best = -INFINITY;
  for (TokenId k : set) best = std::max(best, logits[static_cast<std::size_t>(k)]);
  return best;
}

bool contains(const std::vector<TokenId>& set, TokenId t) {
  return std::find(set.begin(), set.end(), t) != set.end();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

// Masses on the p and q positions of the full context.
std::pair<double, double> pq_masses(const Forward& f, const Scenario& s) {
  double sp = 0, sq = 0;
  for (std::size_t i = 0; i < s.context.size(); ++i) {
    if (s.context[i] == s.p) sp += f.b[i];
    if (s.context[i] == s.q) sq += f.b[i];
  }
  return {sp, sq};
}

}  // namespace

Built build_scenario(const ScenarioParams& params) {
  validate(params);
  const double d2 = params.delta * params.delta;
  return build_scenario_with_eta(params, 1.0 / (1.0 + d2) +
                                             params.eta_fraction * (1.0 - 1.0 / (1.0 + d2)));
}

Built build_scenario_with_eta(const ScenarioParams& params, double eta) {
  validate(params);
  const std::size_t M = params.M, N = params.N, T = params.T;
  Built out;
  Scenario& s = out.scenario;
  s.params = params;
  s.eta = eta;
  s.r = 1.0 / std::sqrt(1.0 + params.delta * params.delta);
  s.A = 3.0 * std::log(static_cast<double>(M));
  for (std::size_t i = 0; i < N; ++i) {
    s.assoc_p.push_back(static_cast<TokenId>(i));
    s.assoc_q.push_back(static_cast<TokenId>(M - N + i));
  }

  Rng rng(derive_seed(params.seed, "theorem-scenario"));
  std::vector<TokenId> pool(M - 2 * N);
  std::iota(pool.begin(), pool.end(), static_cast<TokenId>(N));
  std::shuffle(pool.begin(), pool.end(), rng);
  s.p = pool[0];
  s.q = pool[1];
  s.query = pool[2];
  s.target = pool[3];
  // Fillers take pool[4 ..]; positions of p and q are drawn separately.
  const std::size_t ctx_len = T - 1;
  std::vector<std::size_t> slots(ctx_len);
  std::iota(slots.begin(), slots.end(), 0);
  std::shuffle(slots.begin(), slots.end(), rng);
  s.context.assign(ctx_len, -1);
  s.context[slots[0]] = s.p;
  s.context[slots[1]] = s.q;
  for (std::size_t i = 2; i < ctx_len; ++i) s.context[slots[i]] = pool[4 + i - 2];

  ReparamModel& m = out.model;
  m.Y = Tensor(Shape{M, M});
  m.Z = Tensor(Shape{M, M});
  const auto qrow = static_cast<std::size_t>(s.query);
  for (std::size_t j = 0; j < M; ++j) m.Z(qrow, j) = -s.A;
  // exp(z_p) + exp(z_q) = 1 with ratio delta; fillers at -A then shave the
  // same relative amount off both masses.
  m.Z(qrow, static_cast<std::size_t>(s.p)) = std::log(1.0 / (1.0 + params.delta));
  m.Z(qrow, static_cast<std::size_t>(s.q)) = std::log(params.delta / (1.0 + params.delta));
  for (TokenId k : s.assoc_p) m.Y(static_cast<std::size_t>(s.p), static_cast<std::size_t>(k)) = s.r;
  for (TokenId k : s.assoc_q) m.Y(static_cast<std::size_t>(s.q), static_cast<std::size_t>(k)) = s.r;

  const Forward f = forward(m, s.context, s.query);
  std::tie(s.s_p, s.s_q) = pq_masses(f, s);
  return out;
}

Tensor one_hot_rows(const std::vector<TokenId>& tokens, std::size_t M) {
  Tensor x(Shape{tokens.size(), M});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= M) {
      throw std::out_of_range("one_hot_rows: token outside vocabulary");
    }
    x(i, static_cast<std::size_t>(tokens[i])) = 1.0;
  }
  return x;
}

Forward forward(const ReparamModel& model, const std::vector<TokenId>& context, TokenId query) {
  const std::size_t M = model.Y.rows();
  if (context.empty()) throw std::invalid_argument("forward: empty context");
  const auto qrow = static_cast<std::size_t>(query);
  Forward f;
  f.b = Tensor(Shape{context.size()});
  double mx = -INFINITY;
  for (std::size_t i = 0; i < context.size(); ++i) {
    f.b[i] = model.Z(qrow, static_cast<std::size_t>(context[i]));
    mx = std::max(mx, f.b[i]);
  }
  double z = 0;
  for (auto& x : f.b.data()) z += (x = std::exp(x - mx));
  for (auto& x : f.b.data()) x /= z;

  f.u = Tensor(Shape{M});
  for (std::size_t i = 0; i < context.size(); ++i) f.u[static_cast<std::size_t>(context[i])] += f.b[i];
  double sq = 0;
  for (double x : f.u.data()) sq += x * x;
  f.norm_u = std::sqrt(sq);
  if (!(f.norm_u > 0)) throw DegenerateInputError("forward: X^T b is zero");
  f.v = f.u;
  for (auto& x : f.v.data()) x /= f.norm_u;

  // Only rows of Y at tokens with v != 0 contribute.
  f.logits = Tensor(Shape{M});
  for (std::size_t i = 0; i < M; ++i) {
    if (f.v[i] == 0.0) continue;
    const double* row = model.Y.ptr() + i * M;
    for (std::size_t j = 0; j < M; ++j) f.logits[j] += f.v[i] * row[j];
  }
  f.probs = f.logits;
  mx = *std::max_element(f.probs.data().begin(), f.probs.data().end());
  z = 0;
  for (auto& x : f.probs.data()) z += (x = std::exp(x - mx));
  for (auto& x : f.probs.data()) x /= z;
  return f;
}

Gradients autodiff_gradients(const ReparamModel& model, const Scenario& s) {
  const std::size_t M = s.params.M;
  Tape tape;
  const Var Y = tape.leaf(model.Y, true);
  const Var Z = tape.leaf(model.Z, true);
  const Var X = tape.constant(one_hot_rows(s.context, M));
  const std::size_t qrow[] = {static_cast<std::size_t>(s.query)};
  const Var zrow = gather_rows(tape, Z, std::span<const std::size_t>(qrow));
  const Var b = row_softmax(tape, matmul(tape, zrow, transpose(tape, X)));
  const Var v = l2_normalize(tape, matmul(tape, b, X));
  const Var logits = matmul(tape, v, Y);
  const TokenId tgt[] = {s.target};
  const Var loglik = scale(tape, log_softmax_nll(tape, logits, std::span<const TokenId>(tgt)), -1.0);
  tape.backward(loglik);

  Gradients g;
  g.dY = tape.grad(Y);
  g.dZrow = Tensor(Shape{M});
  const auto& dz = tape.grad(Z);
  std::copy_n(dz.ptr() + qrow[0] * M, M, g.dZrow.ptr());
  return g;
}

Tensor manual_grad_Y(const ReparamModel& model, const Scenario& s) {
  const std::size_t M = s.params.M;
  const Forward f = forward(model, s.context, s.query);
  Tensor err(Shape{M});
  for (std::size_t j = 0; j < M; ++j) err[j] = -f.probs[j];
  err[static_cast<std::size_t>(s.target)] += 1.0;
  Tensor dY(Shape{M, M});
  for (std::size_t i = 0; i < M; ++i) {
    if (f.v[i] == 0.0) continue;
    const double a = s.eta * f.v[i];
    for (std::size_t j = 0; j < M; ++j) dY(i, j) = a * err[j];
  }
  return dY;
}

ZUpdate manual_grad_Z(const ReparamModel& model, const Scenario& s) {
  const std::size_t M = s.params.M;
  const Forward f = forward(model, s.context, s.query);
  Tensor err(Shape{M});
  for (std::size_t j = 0; j < M; ++j) err[j] = -f.probs[j];
  err[static_cast<std::size_t>(s.target)] += 1.0;

  // w = Y (e - alpha), then through the normalization: (I - v v^T) w / |u|.
  std::vector<double> w(M, 0.0);
  for (std::size_t i = 0; i < M; ++i) {
    const double* row = model.Y.ptr() + i * M;
    double acc = 0;
    for (std::size_t j = 0; j < M; ++j) acc += row[j] * err[j];
    w[i] = acc;
  }
  double vw = 0;
  for (std::size_t i = 0; i < M; ++i) vw += f.v[i] * w[i];
  std::vector<double> du(M);
  for (std::size_t i = 0; i < M; ++i) du[i] = (w[i] - f.v[i] * vw) / f.norm_u;

  // X du picks one entry per context position.
  const std::size_t n = s.context.size();
  std::vector<double> g(n);
  double bg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    g[i] = du[static_cast<std::size_t>(s.context[i])];
    bg += f.b[i] * g[i];
  }
  ZUpdate out{Tensor(Shape{M}), Tensor(Shape{M})};
  for (std::size_t i = 0; i < n; ++i) {
    const auto tok = static_cast<std::size_t>(s.context[i]);
    out.literal[tok] += s.eta * f.b[i] * g[i];
    out.exact[tok] += s.eta * f.b[i] * (g[i] - bg);
  }
  return out;
}

std::string to_string(GradSource g) {
  return g == GradSource::kLiteral ? "literal" : "autodiff";
}

GradSource grad_source_from_string(const std::string& name) {
  if (name == "literal") return GradSource::kLiteral;
  if (name == "autodiff") return GradSource::kAutodiff;
  throw std::invalid_argument("unknown grad source '" + name + "'");
}

ReparamModel one_step_update(const ReparamModel& model, const Scenario& s, GradSource source) {
  ReparamModel out = model;
  const std::size_t M = s.params.M;
  const auto qrow = static_cast<std::size_t>(s.query);
  if (source == GradSource::kAutodiff) {
    const Gradients g = autodiff_gradients(model, s);
    for (std::size_t i = 0; i < out.Y.size(); ++i) out.Y[i] += s.eta * g.dY[i];
    for (std::size_t j = 0; j < M; ++j) out.Z(qrow, j) += s.eta * g.dZrow[j];
  } else {
    const Tensor dY = manual_grad_Y(model, s);
    const ZUpdate dZ = manual_grad_Z(model, s);
    for (std::size_t i = 0; i < out.Y.size(); ++i) out.Y[i] += dY[i];
    for (std::size_t j = 0; j < M; ++j) out.Z(qrow, j) += dZ.literal[j];
  }
  return out;
}

OneStepReport verify_theorem(const ReparamModel& updated, const Scenario& s) {
  OneStepReport rep;
  rep.s_p_before = s.s_p;
  rep.s_q_before = s.s_q;

  const Forward with = forward(updated, s.context, s.query);
  std::tie(rep.s_p_after, rep.s_q_after) = pq_masses(with, s);
  rep.delta_drift = (rep.s_q_after / rep.s_p_after) / s.params.delta;
  rep.logits_with = with.logits;
  rep.argmax_with = static_cast<TokenId>(argmax(with.logits));
  const double tgt_with = with.logits[static_cast<std::size_t>(s.target)];
  rep.margin_with = tgt_with - best_of(with.logits, s.assoc_p);
  rep.success_with = rep.argmax_with == s.target;

  std::vector<TokenId> without;
  for (TokenId t : s.context) {
    if (t != s.q) without.push_back(t);
  }
  const Forward wo = forward(updated, without, s.query);
  rep.logits_without = wo.logits;
  rep.argmax_without = static_cast<TokenId>(argmax(wo.logits));
  const double tgt_wo = wo.logits[static_cast<std::size_t>(s.target)];
  rep.margin_without = tgt_wo - best_of(wo.logits, s.assoc_p);
  rep.failure_without = contains(s.assoc_p, rep.argmax_without) && rep.margin_without < 0;
  return rep;
}

Run run_scenario(const ScenarioParams& params, GradSource source) {
  const Built built = build_scenario(params);
  const Scenario& s = built.scenario;
  const Gradients ad = autodiff_gradients(built.model, s);
  const Tensor dY = manual_grad_Y(built.model, s);
  const ZUpdate dZ = manual_grad_Z(built.model, s);

  Tensor ad_Y = ad.dY;
  for (auto& x : ad_Y.data()) x *= s.eta;
  Tensor ad_Z = ad.dZrow;
  for (auto& x : ad_Z.data()) x *= s.eta;

  Run run{s, verify_theorem(one_step_update(built.model, s, source), s)};
  run.report.Delta = forward(built.model, s.context, s.query).norm_u;
  run.report.gradY_dev = max_abs_diff(dY, ad_Y);
  run.report.gradZ_dev = max_abs_diff(dZ.literal, ad_Z);
  return run;
}

}  // namespace ctxedit::theorem
