#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxedit/coin.hpp"
#include "ctxedit/corpus.hpp"
#include "ctxedit/lm.hpp"

namespace ctxedit {

struct TrainConfig {
  double learning_rate = 5e-4;
  std::size_t max_steps = 25;
  double loss_threshold = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct StepLog {
  std::size_t step = 0;  // 1-based
  CoinBreakdown terms;
  double frozen_grad_max = 0;  // largest |gradient| on any non-target parameter
};

struct EditSession {
  LMParams params;
  EditTarget target;
  Tensor w0;
  CoinConfig coin;
  TrainConfig train;
  std::string variant;  // training-set construction: FT, COIN, split, paraphrase
  std::size_t steps = 0;    // logged steps
  std::size_t updates = 0;  // optimizer updates applied
  std::string stop_reason;  // "threshold" or "max_steps"
  std::vector<StepLog> log;
  double wall_time_ms = 0;
};

// Full-batch editing of `target` on `documents` (each already tokenized,
// starting with <bos>). Every step evaluates the objective and logs it; the
// session stops on NLL <= threshold before updating, or after max_steps.
EditSession run_edit(const LMParams& params, const std::vector<std::vector<TokenId>>& documents,
                     const CoinConfig& coin, const TrainConfig& train, EditTarget target,
                     const SecondMoment* moment = nullptr);

enum class Variant { kFT, kCOIN, kSplit, kParaphrase };
std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);  // throws ConfigError

// <bos> + words of `text`.
std::vector<TokenId> encode(const std::string& text);

// Training sequences for one document under a variant: the document itself
// (FT, COIN), its sentence fragments (split), or itself plus paraphrases.
std::vector<std::vector<TokenId>> variant_training_set(const EditDocument& doc, Variant v,
                                                       std::size_t n_variants, std::uint64_t seed);

// split and paraphrase train with the plain NLL objective.
EditSession run_edit_variant(const LMParams& params, const EditDocument& doc, Variant v,
                             const CoinConfig& coin, const TrainConfig& train, EditTarget target,
                             const SecondMoment* moment = nullptr, std::size_t n_variants = 3);

// One session over every document jointly.
EditSession batch_edit(const LMParams& params, const std::vector<EditDocument>& docs,
                       const CoinConfig& coin, const TrainConfig& train, EditTarget target,
                       const SecondMoment* moment = nullptr);

nlohmann::json session_report(const EditSession& s);

}  // namespace ctxedit
