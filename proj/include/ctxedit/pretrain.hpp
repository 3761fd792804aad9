#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ctxedit/lm.hpp"

namespace ctxedit {

struct PretrainConfig {
  std::size_t max_epochs = 30;
  std::size_t batch_size = 32;
  double lr = 3e-3;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 50;
  double grad_clip = 1.0;
  // Plateau: holdout perplexity has not improved by `min_rel_improvement`
  // (relative) for `patience` consecutive epochs.
  std::size_t patience = 2;
  double min_rel_improvement = 0.005;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct EpochStats {
  std::size_t epoch = 0;  // 0 = before training
  double train_loss = 0;  // mean batch loss over the epoch (NaN for epoch 0)
  double holdout_ppl = 0;
};

struct PretrainResult {
  std::vector<EpochStats> history;
  std::string stop_reason;  // "plateau" or "max_epochs"
};

// Trains every parameter with AdamW, linear warmup and cosine decay. Raises
// NumericalError on a non-finite loss, and NumericalError as well when holdout
// perplexity ends no lower than before training.
PretrainResult pretrain(LMParams& params, const std::vector<std::vector<TokenId>>& train,
                        const std::vector<std::vector<TokenId>>& holdout,
                        const PretrainConfig& config,
                        const std::function<void(const EpochStats&)>& on_epoch = {});

// exp of the mean per-token NLL over every predicted position.
double holdout_perplexity(const LMParams& params, const std::vector<std::vector<TokenId>>& seqs,
                          std::size_t batch_size = 64);

}  // namespace ctxedit
