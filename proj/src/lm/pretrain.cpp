#include "ctxedit/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "ctxedit/optim.hpp"
#include "ctxedit/rng.hpp"

namespace ctxedit {

void to_json(nlohmann::json& j, const PretrainConfig& c) {
  j = nlohmann::json{{"max_epochs", c.max_epochs},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"warmup_steps", c.warmup_steps},
                     {"grad_clip", c.grad_clip},
                     {"patience", c.patience},
                     {"min_rel_improvement", c.min_rel_improvement},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PretrainConfig& c) {
  const PretrainConfig d;
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.patience = j.value("patience", d.patience);
  c.min_rel_improvement = j.value("min_rel_improvement", d.min_rel_improvement);
  c.seed = j.value("seed", d.seed);
}

double holdout_perplexity(const LMParams& params, const std::vector<std::vector<TokenId>>& seqs,
                          std::size_t batch_size) {
  double logprob = 0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < seqs.size(); start += batch_size) {
    const std::size_t end = std::min(seqs.size(), start + batch_size);
    std::vector<std::vector<TokenId>> chunk(seqs.begin() + static_cast<std::ptrdiff_t>(start),
                                            seqs.begin() + static_cast<std::ptrdiff_t>(end));
    const auto [lp, n] = total_logprob(params, SequenceBatch::from(chunk));
    logprob += lp;
    count += n;
  }
  if (count == 0) throw std::invalid_argument("holdout_perplexity: no predicted tokens");
  return std::exp(-logprob / static_cast<double>(count));
}

PretrainResult pretrain(LMParams& params, const std::vector<std::vector<TokenId>>& train,
                        const std::vector<std::vector<TokenId>>& holdout,
                        const PretrainConfig& config,
                        const std::function<void(const EpochStats&)>& on_epoch) {
  if (train.empty()) throw std::invalid_argument("pretrain: empty training set");
  if (config.batch_size == 0) throw std::invalid_argument("pretrain: batch_size must be >= 1");
  PretrainResult result;
  auto report = [&](EpochStats s) {
    result.history.push_back(s);
    if (on_epoch) on_epoch(s);
  };
  report({0, std::nan(""), holdout_perplexity(params, holdout)});

  AdamW opt({config.lr, 0.9, 0.999, 1e-8, config.weight_decay});
  const std::size_t per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = per_epoch * config.max_epochs;
  std::size_t step = 0;
  double best = result.history.back().holdout_ppl;
  std::size_t stale = 0;
  result.stop_reason = "max_epochs";

  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(config.seed, "pretrain-shuffle", epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      std::vector<std::vector<TokenId>> seqs;
      for (std::size_t i = b * config.batch_size;
           i < std::min(train.size(), (b + 1) * config.batch_size); ++i) {
        seqs.push_back(train[order[i]]);
      }
      Tape tape;
      const ParamVars pv = bind_params(tape, params, Trainable::kAll);
      const Var loss = batch_nll(tape, pv, params.config, SequenceBatch::from(seqs));
      const double value = tape.value(loss).item();
      if (!std::isfinite(value)) {
        std::ostringstream os;
        os << "pretraining loss became " << value << " at epoch " << epoch << ", batch " << b;
        throw NumericalError(os.str());
      }
      loss_sum += value;
      tape.backward(loss);

      std::vector<Tensor*> targets;
      std::vector<Tensor> grads;
      const auto named_vars = pv.named();
      const auto named_params = params.named();
      grads.reserve(named_vars.size());
      for (std::size_t k = 0; k < named_vars.size(); ++k) {
        targets.push_back(named_params[k].second);
        grads.push_back(tape.grad(named_vars[k].second));
      }
      std::vector<Tensor*> gptr;
      std::vector<const Tensor*> cgptr;
      for (auto& g : grads) {
        gptr.push_back(&g);
        cgptr.push_back(&g);
      }
      if (config.grad_clip > 0) clip_grad_norm(gptr, config.grad_clip);

      ++step;
      double scale = 1.0;
      if (step <= config.warmup_steps) {
        scale = static_cast<double>(step) / static_cast<double>(config.warmup_steps);
      } else if (total_steps > config.warmup_steps) {
        const double progress = static_cast<double>(step - config.warmup_steps) /
                                static_cast<double>(total_steps - config.warmup_steps);
        scale = 0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
      }
      opt.step(targets, cgptr, scale);
    }
    const double ppl = holdout_perplexity(params, holdout);
    report({epoch, loss_sum / static_cast<double>(per_epoch), ppl});
    if (!std::isfinite(ppl)) throw NumericalError("holdout perplexity is not finite");
    if (ppl < best * (1.0 - config.min_rel_improvement)) {
      best = ppl;
      stale = 0;
    } else if (++stale >= config.patience) {
      result.stop_reason = "plateau";
      break;
    }
  }
  if (!(result.history.back().holdout_ppl < result.history.front().holdout_ppl)) {
    throw NumericalError("pretraining did not converge: holdout perplexity " +
                         std::to_string(result.history.back().holdout_ppl) +
                         " is not below the initial " +
                         std::to_string(result.history.front().holdout_ppl));
  }
  return result;
}

}  // namespace ctxedit
