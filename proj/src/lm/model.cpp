#include <cmath>
#include <random>
#include <stdexcept>

#include "ctxedit/lm.hpp"
#include "ctxedit/rng.hpp"

namespace ctxedit {

void LMConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("LMConfig: " + what); };
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    fail("d_model must be a positive multiple of n_heads");
  }
  if (n_layers == 0) fail("n_layers must be >= 1");
  if (d_ff == 0) fail("d_ff must be >= 1");
  if (max_seq_len < 2) fail("max_seq_len must be >= 2");
}

void to_json(nlohmann::json& j, const LMConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                     {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                     {"d_ff", c.d_ff},             {"max_seq_len", c.max_seq_len},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, LMConfig& c) {
  LMConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.d_model = j.value("d_model", d.d_model);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.seed = j.value("seed", d.seed);
}

EditTarget EditTarget::default_for(const LMConfig& config) {
  return EditTarget{config.n_layers >= 2 ? config.n_layers - 2 : 0};
}

std::string target_name(EditTarget target) {
  return "blocks." + std::to_string(target.layer) + ".w_down";
}

std::vector<std::pair<std::string, const Tensor*>> LMParams::named() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.emplace_back("tok_emb", &tok_emb);
  out.emplace_back("pos_emb", &pos_emb);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.emplace_back(p + "ln1_g", &b.ln1_g);
    out.emplace_back(p + "ln1_b", &b.ln1_b);
    out.emplace_back(p + "w_q", &b.w_q);
    out.emplace_back(p + "w_k", &b.w_k);
    out.emplace_back(p + "w_v", &b.w_v);
    out.emplace_back(p + "w_o", &b.w_o);
    out.emplace_back(p + "ln2_g", &b.ln2_g);
    out.emplace_back(p + "ln2_b", &b.ln2_b);
    out.emplace_back(p + "w_up", &b.w_up);
    out.emplace_back(p + "w_down", &b.w_down);
  }
  out.emplace_back("lnf_g", &lnf_g);
  out.emplace_back("lnf_b", &lnf_b);
  out.emplace_back("head", &head);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> LMParams::named() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& [name, t] : std::as_const(*this).named()) {
    out.emplace_back(name, const_cast<Tensor*>(t));
  }
  return out;
}

const Tensor& LMParams::matrix(const std::string& name) const {
  for (const auto& [n, t] : named()) {
    if (n == name) return *t;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

Tensor& LMParams::matrix(const std::string& name) {
  return const_cast<Tensor&>(std::as_const(*this).matrix(name));
}

LMParams init_params(const LMConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, "lm-init"));
  const std::size_t d = config.d_model;
  auto gauss = [&](Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor t(std::move(shape));
    for (auto& x : t.data()) x = dist(rng);
    return t;
  };
  const double base = 1.0 / std::sqrt(static_cast<double>(d));
  // Residual outputs shrink with depth; the head starts small so the initial
  // distribution is close to uniform.
  const double resid = base / std::sqrt(2.0 * static_cast<double>(config.n_layers));

  LMParams p;
  p.config = config;
  p.config.seed = seed;
  p.tok_emb = gauss({config.vocab_size, d}, base);
  p.pos_emb = gauss({config.max_seq_len, d}, base);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    BlockParams b;
    b.ln1_g = Tensor(Shape{d}, 1.0);
    b.ln1_b = Tensor(Shape{d});
    b.w_q = gauss({d, d}, base);
    b.w_k = gauss({d, d}, base);
    b.w_v = gauss({d, d}, base);
    b.w_o = gauss({d, d}, resid);
    b.ln2_g = Tensor(Shape{d}, 1.0);
    b.ln2_b = Tensor(Shape{d});
    b.w_up = gauss({d, config.d_ff}, base);
    b.w_down = gauss({config.d_ff, d}, resid * std::sqrt(static_cast<double>(d) /
                                                         static_cast<double>(config.d_ff)));
    p.blocks.push_back(std::move(b));
  }
  p.lnf_g = Tensor(Shape{d}, 1.0);
  p.lnf_b = Tensor(Shape{d});
  p.head = gauss({d, config.vocab_size}, 0.1 * base);
  return p;
}

Tensor snapshot_target(const LMParams& params, EditTarget target) {
  if (target.layer >= params.blocks.size()) throw std::out_of_range("edit target layer out of range");
  return params.blocks[target.layer].w_down;
}

void restore_target(LMParams& params, EditTarget target, const Tensor& w0) {
  if (target.layer >= params.blocks.size()) throw std::out_of_range("edit target layer out of range");
  Tensor& w = params.blocks[target.layer].w_down;
  if (w.shape() != w0.shape()) {
    throw ShapeError("restore_target: expected " + shape_str(w.shape()) + ", got " +
                     shape_str(w0.shape()));
  }
  w = w0;
}

SequenceBatch SequenceBatch::from(const std::vector<std::vector<TokenId>>& sequences) {
  SequenceBatch b;
  for (const auto& s : sequences) {
    if (s.empty()) throw std::invalid_argument("SequenceBatch: empty sequence");
    b.segments.push_back({b.tokens.size(), s.size()});
    b.tokens.insert(b.tokens.end(), s.begin(), s.end());
  }
  return b;
}

std::vector<std::pair<std::string, Var>> ParamVars::named() const {
  std::vector<std::pair<std::string, Var>> out;
  out.emplace_back("tok_emb", tok_emb);
  out.emplace_back("pos_emb", pos_emb);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    for (auto [n, v] : {std::pair{"ln1_g", b.ln1_g}, {"ln1_b", b.ln1_b}, {"w_q", b.w_q},
                        {"w_k", b.w_k}, {"w_v", b.w_v}, {"w_o", b.w_o}, {"ln2_g", b.ln2_g},
                        {"ln2_b", b.ln2_b}, {"w_up", b.w_up}, {"w_down", b.w_down}}) {
      out.emplace_back(p + n, v);
    }
  }
  out.emplace_back("lnf_g", lnf_g);
  out.emplace_back("lnf_b", lnf_b);
  out.emplace_back("head", head);
  return out;
}

template <typename T>
ParamVars bind_params(BasicTape<T>& tape, const LMParams& params, Trainable trainable,
                      EditTarget target) {
  const bool all = trainable == Trainable::kAll;
  auto bind = [&](const Tensor& t, bool is_target = false) {
    return tape.leaf(t, all || (is_target && trainable == Trainable::kTargetOnly));
  };
  ParamVars pv;
  pv.tok_emb = bind(params.tok_emb);
  pv.pos_emb = bind(params.pos_emb);
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    const auto& b = params.blocks[l];
    BlockVars v;
    v.ln1_g = bind(b.ln1_g);
    v.ln1_b = bind(b.ln1_b);
    v.w_q = bind(b.w_q);
    v.w_k = bind(b.w_k);
    v.w_v = bind(b.w_v);
    v.w_o = bind(b.w_o);
    v.ln2_g = bind(b.ln2_g);
    v.ln2_b = bind(b.ln2_b);
    v.w_up = bind(b.w_up);
    v.w_down = bind(b.w_down, l == target.layer);
    pv.blocks.push_back(v);
  }
  pv.lnf_g = bind(params.lnf_g);
  pv.lnf_b = bind(params.lnf_b);
  pv.head = bind(params.head);
  return pv;
}

template <typename T>
Var forward_hidden(BasicTape<T>& tape, const ParamVars& pv, const LMConfig& config,
                   const SequenceBatch& batch, std::vector<Var>* keys) {
  if (batch.tokens.empty()) throw std::invalid_argument("forward: empty batch");
  std::vector<std::size_t> tok_rows(batch.tokens.size());
  std::vector<std::size_t> pos_rows(batch.tokens.size());
  for (const Segment& s : batch.segments) {
    if (s.length > config.max_seq_len) {
      throw ShapeError("sequence of length " + std::to_string(s.length) +
                       " exceeds max_seq_len " + std::to_string(config.max_seq_len));
    }
    for (std::size_t i = 0; i < s.length; ++i) pos_rows[s.offset + i] = i;
  }
  for (std::size_t i = 0; i < batch.tokens.size(); ++i) {
    const TokenId t = batch.tokens[i];
    if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(t) + " outside vocabulary");
    }
    tok_rows[i] = static_cast<std::size_t>(t);
  }
  Var x = add(tape, gather_rows(tape, pv.tok_emb, std::span<const std::size_t>(tok_rows)),
              gather_rows(tape, pv.pos_emb, std::span<const std::size_t>(pos_rows)));
  const std::span<const Segment> segs(batch.segments);
  for (const BlockVars& b : pv.blocks) {
    const Var h = layer_norm(tape, x, b.ln1_g, b.ln1_b);
    const Var att = causal_attention(tape, matmul(tape, h, b.w_q), matmul(tape, h, b.w_k),
                                     matmul(tape, h, b.w_v), segs, config.n_heads);
    x = add(tape, x, matmul(tape, att, b.w_o));
    const Var h2 = layer_norm(tape, x, b.ln2_g, b.ln2_b);
    const Var key = gelu(tape, matmul(tape, h2, b.w_up));
    if (keys) keys->push_back(key);
    x = add(tape, x, matmul(tape, key, b.w_down));
  }
  return layer_norm(tape, x, pv.lnf_g, pv.lnf_b);
}

template <typename T>
Var forward_logits(BasicTape<T>& tape, const ParamVars& pv, const LMConfig& config,
                   const SequenceBatch& batch, std::span<const std::size_t> rows) {
  Var h = forward_hidden(tape, pv, config, batch);
  if (!rows.empty()) h = gather_rows(tape, h, rows);
  return matmul(tape, h, pv.head);
}

template <typename T>
Var batch_nll(BasicTape<T>& tape, const ParamVars& pv, const LMConfig& config,
              const SequenceBatch& batch) {
  std::vector<std::size_t> rows;
  std::vector<TokenId> targets;
  std::vector<T> weights;
  const T per_seq = T(1) / static_cast<T>(batch.size());
  for (const Segment& s : batch.segments) {
    if (s.length < 2) throw std::invalid_argument("nll: sequences need at least 2 tokens");
    const T w = per_seq / static_cast<T>(s.length - 1);
    for (std::size_t i = 0; i + 1 < s.length; ++i) {
      rows.push_back(s.offset + i);
      targets.push_back(batch.tokens[s.offset + i + 1]);
      weights.push_back(w);
    }
  }
  const Var logits = forward_logits(tape, pv, config, batch, std::span<const std::size_t>(rows));
  return log_softmax_nll(tape, logits, std::span<const TokenId>(targets),
                         std::span<const T>(weights));
}

template ParamVars bind_params<double>(Tape&, const LMParams&, Trainable, EditTarget);
template ParamVars bind_params<long double>(BasicTape<long double>&, const LMParams&, Trainable,
                                            EditTarget);
template Var forward_hidden<double>(Tape&, const ParamVars&, const LMConfig&,
                                    const SequenceBatch&, std::vector<Var>*);
template Var forward_hidden<long double>(BasicTape<long double>&, const ParamVars&,
                                         const LMConfig&, const SequenceBatch&,
                                         std::vector<Var>*);
template Var forward_logits<double>(Tape&, const ParamVars&, const LMConfig&,
                                    const SequenceBatch&, std::span<const std::size_t>);
template Var forward_logits<long double>(BasicTape<long double>&, const ParamVars&,
                                         const LMConfig&, const SequenceBatch&,
                                         std::span<const std::size_t>);
template Var batch_nll<double>(Tape&, const ParamVars&, const LMConfig&, const SequenceBatch&);
template Var batch_nll<long double>(BasicTape<long double>&, const ParamVars&, const LMConfig&,
                                    const SequenceBatch&);

Tensor forward_logits(const LMParams& params, const SequenceBatch& batch) {
  Tape tape;
  const ParamVars pv = bind_params(tape, params, Trainable::kNone);
  return tape.value(forward_logits(tape, pv, params.config, batch));
}

double batch_nll(const LMParams& params, const SequenceBatch& batch) {
  Tape tape;
  const ParamVars pv = bind_params(tape, params, Trainable::kNone);
  return tape.value(batch_nll(tape, pv, params.config, batch)).item();
}

double nll_loss(const LMParams& params, const std::vector<TokenId>& tokens) {
  return batch_nll(params, SequenceBatch::from({tokens}));
}

std::pair<double, std::size_t> total_logprob(const LMParams& params, const SequenceBatch& batch) {
  std::vector<std::size_t> rows;
  std::vector<TokenId> targets;
  for (const Segment& s : batch.segments) {
    for (std::size_t i = 0; i + 1 < s.length; ++i) {
      rows.push_back(s.offset + i);
      targets.push_back(batch.tokens[s.offset + i + 1]);
    }
  }
  if (rows.empty()) return {0.0, 0};
  Tape tape;
  const ParamVars pv = bind_params(tape, params, Trainable::kNone);
  const Var logits = forward_logits(tape, pv, params.config, batch,
                                    std::span<const std::size_t>(rows));
  const std::vector<double> ones(rows.size(), 1.0);
  const double nll = tape.value(log_softmax_nll(tape, logits, std::span<const TokenId>(targets),
                                                std::span<const double>(ones)))
                         .item();
  return {-nll, rows.size()};
}

std::vector<double> next_token_logprobs(const LMParams& params, const std::vector<TokenId>& tokens) {
  const SequenceBatch batch = SequenceBatch::from({tokens});
  const std::size_t last[] = {tokens.size() - 1};
  Tape tape;
  const ParamVars pv = bind_params(tape, params, Trainable::kNone);
  const Tensor& logits = tape.value(
      forward_logits(tape, pv, params.config, batch, std::span<const std::size_t>(last)));
  std::vector<double> out(logits.data().begin(), logits.data().end());
  double mx = out[0];
  for (double x : out) mx = std::max(mx, x);
  double z = 0;
  for (double x : out) z += std::exp(x - mx);
  const double lse = mx + std::log(z);
  for (double& x : out) x -= lse;
  return out;
}

Tensor key_activations(const LMParams& params, const SequenceBatch& batch, EditTarget target) {
  if (target.layer >= params.blocks.size()) throw std::out_of_range("edit target layer out of range");
  Tape tape;
  const ParamVars pv = bind_params(tape, params, Trainable::kNone);
  std::vector<Var> keys;
  forward_hidden(tape, pv, params.config, batch, &keys);
  return tape.value(keys[target.layer]);
}

Tensor key_activations(const LMParams& params, const std::vector<TokenId>& tokens,
                       EditTarget target) {
  return key_activations(params, SequenceBatch::from({tokens}), target);
}

}  // namespace ctxedit
