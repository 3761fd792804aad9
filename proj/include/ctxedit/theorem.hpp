#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctxedit/tensor.hpp"

namespace ctxedit::theorem {

// One-layer reparameterized model: logits = Y^T l2norm(X^T softmax(X Z^T x_T)).
struct ReparamModel {
  Tensor Y;  // [M x M], row = context token, column = predicted token
  Tensor Z;  // [M x M], row = query token, column = attended token
};

struct ScenarioParams {
  std::size_t M = 512;
  std::size_t T = 12;
  std::size_t N = 2;
  double delta = 1.0;
  double eta_fraction = 0.6;
  std::uint64_t seed = 0;
};

struct Scenario {
  ScenarioParams params;
  TokenId p = 0;
  TokenId q = 0;
  TokenId query = 0;   // x_T
  TokenId target = 0;  // x_{T+1}
  std::vector<TokenId> context;  // x_1 .. x_{T-1}
  std::vector<TokenId> assoc_p;  // 0 .. N-1
  std::vector<TokenId> assoc_q;  // M-N .. M-1
  double r = 0;
  double eta = 0;
  double A = 0;
  // Attention masses realized by construction.
  double s_p = 0;
  double s_q = 0;
};

// Throws std::invalid_argument when the parameters fall outside
// M >= 64, 3 <= T <= M/4, 1 <= N <= 8, delta > 0, 0 < eta_fraction < 1.
struct Built {
  Scenario scenario;
  ReparamModel model;
};
Built build_scenario(const ScenarioParams& params);

// Same construction, with eta replaced by an arbitrary value (used to probe
// the regime boundary).
Built build_scenario_with_eta(const ScenarioParams& params, double eta);

struct Forward {
  Tensor b;       // attention over context positions [T-1]
  Tensor u;       // X^T b [M]
  double norm_u = 0;
  Tensor v;       // u / |u|
  Tensor logits;  // [M]
  Tensor probs;   // [M]
};

Tensor one_hot_rows(const std::vector<TokenId>& tokens, std::size_t M);
Forward forward(const ReparamModel& model, const std::vector<TokenId>& context, TokenId query);

// Gradients of log alpha_target (not yet scaled by eta).
struct Gradients {
  Tensor dY;     // [M x M]
  Tensor dZrow;  // [M], row `query` of dZ
};

Gradients autodiff_gradients(const ReparamModel& model, const Scenario& s);

// eta * v (e_target - alpha)^T, over every row.
Tensor manual_grad_Y(const ReparamModel& model, const Scenario& s);

struct ZUpdate {
  Tensor literal;  // eta X^T diag(b) X (P/|u|) Y (e - alpha)
  Tensor exact;    // same with the full softmax Jacobian diag(b) - b b^T
};
ZUpdate manual_grad_Z(const ReparamModel& model, const Scenario& s);

enum class GradSource { kLiteral, kAutodiff };
std::string to_string(GradSource g);
GradSource grad_source_from_string(const std::string& name);

// Gradient ascent on log alpha_target: Y += Ydot, Z[query] += Zdot.
ReparamModel one_step_update(const ReparamModel& model, const Scenario& s, GradSource source);

struct OneStepReport {
  double s_p_before = 0, s_q_before = 0;
  double s_p_after = 0, s_q_after = 0;
  double Delta = 0;
  Tensor logits_with;
  Tensor logits_without;
  TokenId argmax_with = -1;
  TokenId argmax_without = -1;
  // Target logit minus the best logit over assoc_p.
  double margin_with = 0;
  double margin_without = 0;
  bool success_with = false;
  bool failure_without = false;
  double delta_drift = 0;  // (s_q'/s_p') / delta
  double gradY_dev = 0;    // max |manual - autodiff| over Y
  double gradZ_dev = 0;    // max |literal - autodiff| over the Z row
};

// Evaluates an updated model on the full context and on the context with q
// removed. Gradient deviations are left at zero.
OneStepReport verify_theorem(const ReparamModel& updated, const Scenario& s);

// build -> gradients -> one update -> verify, with gradient deviations filled.
struct Run {
  Scenario scenario;
  OneStepReport report;
};
Run run_scenario(const ScenarioParams& params, GradSource source);

}  // namespace ctxedit::theorem
