#include "ctxedit/edit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "ctxedit/errors.hpp"
#include "ctxedit/optim.hpp"
#include "ctxedit/rng.hpp"

namespace ctxedit {
using nlohmann::json;

void TrainConfig::validate() const {
  if (max_steps < 1) throw std::invalid_argument("max_steps must be >= 1");
  if (!(loss_threshold > 0)) throw std::invalid_argument("loss_threshold must be > 0");
  if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
  if (!(weight_decay >= 0)) throw std::invalid_argument("weight_decay must be >= 0");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"learning_rate", c.learning_rate}, {"max_steps", c.max_steps},
           {"loss_threshold", c.loss_threshold}, {"beta1", c.beta1},
           {"beta2", c.beta2}, {"eps", c.eps},
           {"weight_decay", c.weight_decay}, {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
  const TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.max_steps = j.value("max_steps", d.max_steps);
  c.loss_threshold = j.value("loss_threshold", d.loss_threshold);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.seed = j.value("seed", d.seed);
}

EditSession run_edit(const LMParams& params, const std::vector<std::vector<TokenId>>& documents,
                     const CoinConfig& coin, const TrainConfig& train, EditTarget target,
                     const SecondMoment* moment) {
  train.validate();
  coin.validate();
  if (documents.empty()) throw std::invalid_argument("run_edit: no documents");
  if (coin.effective_beta() > 0 && moment == nullptr) {
    throw std::invalid_argument("run_edit: beta > 0 needs a precomputed second moment");
  }
  const auto start = std::chrono::steady_clock::now();
  EditSession s;
  s.params = params;
  s.target = target;
  s.w0 = snapshot_target(params, target);
  s.coin = coin;
  s.train = train;
  s.variant = to_string(coin.method);
  s.stop_reason = "max_steps";

  const SequenceBatch batch = SequenceBatch::from(documents);
  const std::string name = target_name(target);
  AdamW opt({train.learning_rate, train.beta1, train.beta2, train.eps, train.weight_decay});
  Tensor& w = s.params.matrix(name);

  for (std::size_t step = 1; step <= train.max_steps; ++step) {
    Tape tape;
    const ParamVars pv = bind_params(tape, s.params, Trainable::kTargetOnly, target);
    const CoinTerms terms =
        coin_loss(tape, pv, s.params.config, target, s.w0, batch, coin, moment);
    const CoinBreakdown b = breakdown(tape, terms);
    s.log.push_back({step, b});
    s.steps = step;
    if (!std::isfinite(b.total) || !std::isfinite(b.nll)) {
      std::ostringstream os;
      os << "edit loss is not finite at step " << step << " (nll " << b.nll << ", align "
         << b.align << ", cons " << b.cons << ", total " << b.total << ")";
      throw NumericalError(os.str());
    }
    if (b.nll <= train.loss_threshold) {
      s.stop_reason = "threshold";
      break;
    }
    tape.backward(terms.total);
    double frozen = 0;
    for (const auto& [n, v] : pv.named()) {
      if (n == name || !tape.has_grad(v)) continue;
      for (double g : tape.grad(v).data()) frozen = std::max(frozen, std::abs(g));
    }
    s.log.back().frozen_grad_max = frozen;
    if (frozen != 0) throw std::logic_error("a frozen parameter got a gradient at step " + std::to_string(step));
    const Tensor g = tape.grad(pv.blocks[target.layer].w_down);
    opt.step({&w}, {&g});
    ++s.updates;
  }
  s.wall_time_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return s;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kFT: return "FT";
    case Variant::kCOIN: return "COIN";
    case Variant::kSplit: return "split";
    case Variant::kParaphrase: return "paraphrase";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  for (Variant v : {Variant::kFT, Variant::kCOIN, Variant::kSplit, Variant::kParaphrase}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown variant '" + s + "'");
}

std::vector<TokenId> encode(const std::string& text) {
  const Vocabulary& vocab = inventory().vocab;
  std::vector<TokenId> out{vocab.bos()};
  const auto ids = vocab.tokenize(text);
  out.insert(out.end(), ids.begin(), ids.end());
  return out;
}

std::vector<std::vector<TokenId>> variant_training_set(const EditDocument& doc, Variant v,
                                                       std::size_t n_variants, std::uint64_t seed) {
  std::vector<std::vector<TokenId>> out;
  switch (v) {
    case Variant::kFT:
    case Variant::kCOIN:
      out.push_back(encode(doc.text));
      break;
    case Variant::kSplit:
      for (const auto& f : split_transform(doc)) out.push_back(encode(f));
      break;
    case Variant::kParaphrase:
      out.push_back(encode(doc.text));
      for (const auto& p : paraphrase_transform(doc, n_variants, derive_seed(seed, doc.doc_id))) {
        out.push_back(encode(p.text));
      }
      break;
  }
  return out;
}

EditSession run_edit_variant(const LMParams& params, const EditDocument& doc, Variant v,
                             const CoinConfig& coin, const TrainConfig& train, EditTarget target,
                             const SecondMoment* moment, std::size_t n_variants) {
  CoinConfig c = coin;
  if (v == Variant::kFT || v == Variant::kSplit || v == Variant::kParaphrase) c.method = Method::kFT;
  if (v == Variant::kCOIN && c.method == Method::kFT) c.method = Method::kCOIN;
  EditSession s =
      run_edit(params, variant_training_set(doc, v, n_variants, train.seed), c, train, target, moment);
  s.variant = to_string(v);
  return s;
}

EditSession batch_edit(const LMParams& params, const std::vector<EditDocument>& docs,
                       const CoinConfig& coin, const TrainConfig& train, EditTarget target,
                       const SecondMoment* moment) {
  std::vector<std::vector<TokenId>> seqs;
  for (const auto& d : docs) seqs.push_back(encode(d.text));
  return run_edit(params, seqs, coin, train, target, moment);
}

json session_report(const EditSession& s) {
  json log = json::array();
  for (const auto& l : s.log) {
    log.push_back({{"step", l.step},
                   {"nll", l.terms.nll},
                   {"align", l.terms.align},
                   {"cons", l.terms.cons},
                   {"total", l.terms.total}});
  }
  return {{"method", to_string(s.coin.method)},
          {"variant", s.variant},
          {"config", {{"coin", s.coin}, {"train", s.train}, {"target_layer", s.target.layer}}},
          {"steps", s.steps},
          {"updates", s.updates},
          {"stop_reason", s.stop_reason},
          {"loss_log", std::move(log)},
          {"wall_time_ms", s.wall_time_ms}};
}

}  // namespace ctxedit
