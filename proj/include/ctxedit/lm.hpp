#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxedit/autodiff.hpp"
#include "ctxedit/tensor.hpp"

namespace ctxedit {

struct LMConfig {
  std::size_t vocab_size = 2048;
  std::size_t d_model = 128;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t max_seq_len = 256;
  std::uint64_t seed = 0;

  void validate() const;  // throws std::invalid_argument
  friend bool operator==(const LMConfig&, const LMConfig&) = default;
};

void to_json(nlohmann::json& j, const LMConfig& c);
void from_json(const nlohmann::json& j, LMConfig& c);

// The MLP down-projection of one layer. Stored as [d_ff x d_model] and applied
// as keys * W, so a key vector is a row.
struct EditTarget {
  std::size_t layer = 0;
  // Penultimate layer (layer 0 for a single-layer model).
  static EditTarget default_for(const LMConfig& config);
};

struct BlockParams {
  Tensor ln1_g, ln1_b;
  Tensor w_q, w_k, w_v, w_o;  // [d x d]
  Tensor ln2_g, ln2_b;
  Tensor w_up;    // [d x d_ff]
  Tensor w_down;  // [d_ff x d]

  friend bool operator==(const BlockParams&, const BlockParams&) = default;
};

struct LMParams {
  LMConfig config;
  Tensor tok_emb;  // [V x d]
  Tensor pos_emb;  // [max_seq_len x d]
  std::vector<BlockParams> blocks;
  Tensor lnf_g, lnf_b;
  Tensor head;  // [d x V]

  // Every matrix under a stable name, in a fixed order.
  std::vector<std::pair<std::string, const Tensor*>> named() const;
  std::vector<std::pair<std::string, Tensor*>> named();
  Tensor& matrix(const std::string& name);
  const Tensor& matrix(const std::string& name) const;

  friend bool operator==(const LMParams&, const LMParams&) = default;
};

std::string target_name(EditTarget target);

LMParams init_params(const LMConfig& config, std::uint64_t seed);

Tensor snapshot_target(const LMParams& params, EditTarget target);
void restore_target(LMParams& params, EditTarget target, const Tensor& w0);

// Flattened ragged batch: each segment is one sequence starting at position 0.
struct SequenceBatch {
  std::vector<TokenId> tokens;
  std::vector<Segment> segments;

  static SequenceBatch from(const std::vector<std::vector<TokenId>>& sequences);
  std::size_t size() const { return segments.size(); }
};

// Tape handles for every parameter. Fields can be swapped for other Vars
// (e.g. a grad_check probe) before running the forward pass.
struct BlockVars {
  Var ln1_g, ln1_b, w_q, w_k, w_v, w_o, ln2_g, ln2_b, w_up, w_down;
};

struct ParamVars {
  Var tok_emb, pos_emb;
  std::vector<BlockVars> blocks;
  Var lnf_g, lnf_b, head;

  std::vector<std::pair<std::string, Var>> named() const;
};

enum class Trainable { kNone, kAll, kTargetOnly };

template <typename T>
ParamVars bind_params(BasicTape<T>& tape, const LMParams& params, Trainable trainable,
                      EditTarget target = {});

// Records the transformer on the tape and returns final hidden states
// [tokens x d]. When `keys` is given it receives, per layer, the input rows of
// that layer's down-projection.
template <typename T>
Var forward_hidden(BasicTape<T>& tape, const ParamVars& pv, const LMConfig& config,
                   const SequenceBatch& batch, std::vector<Var>* keys = nullptr);

// Logits for the selected flattened rows (all rows when `rows` is empty).
template <typename T>
Var forward_logits(BasicTape<T>& tape, const ParamVars& pv, const LMConfig& config,
                   const SequenceBatch& batch, std::span<const std::size_t> rows = {});

// Mean over sequences of the per-sequence mean next-token NLL. Every sequence
// needs length >= 2.
template <typename T>
Var batch_nll(BasicTape<T>& tape, const ParamVars& pv, const LMConfig& config,
              const SequenceBatch& batch);

// Plain evaluation helpers (no gradients).
Tensor forward_logits(const LMParams& params, const SequenceBatch& batch);
double nll_loss(const LMParams& params, const std::vector<TokenId>& tokens);
double batch_nll(const LMParams& params, const SequenceBatch& batch);
// Summed next-token log-probability over every predicted position, plus the
// number of such positions.
std::pair<double, std::size_t> total_logprob(const LMParams& params, const SequenceBatch& batch);
// Log-softmax row for the last position of `tokens`.
std::vector<double> next_token_logprobs(const LMParams& params, const std::vector<TokenId>& tokens);

// Rows are the key vectors (one per token) of `target`'s down-projection.
Tensor key_activations(const LMParams& params, const SequenceBatch& batch, EditTarget target);
Tensor key_activations(const LMParams& params, const std::vector<TokenId>& tokens,
                       EditTarget target);

// --- Checkpoints ------------------------------------------------------------------

inline constexpr int kCheckpointFormat = 1;

nlohmann::json params_to_json(const LMParams& params);
LMParams params_from_json(const nlohmann::json& doc);

void save_checkpoint(const LMParams& params, const std::filesystem::path& path);
// Writes only `target`'s matrix plus a reference to the base checkpoint.
void save_delta_checkpoint(const LMParams& params, EditTarget target,
                           const std::filesystem::path& base,
                           const std::filesystem::path& path);
// Resolves delta checkpoints against their base. Missing files raise
// MissingArtifactError.
LMParams load_checkpoint(const std::filesystem::path& path);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const nlohmann::json& doc, const std::filesystem::path& path);

}  // namespace ctxedit
