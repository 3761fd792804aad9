#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ctxedit/autodiff.hpp"
#include "ctxedit/lm.hpp"

namespace ctxedit {

enum class Method { kFT, kCOIN, kCOINNoAlign, kCOINNoCons };

std::string to_string(Method m);
Method method_from_string(const std::string& s);  // throws ConfigError

struct CoinConfig {
  double alpha = 0.1;
  double beta = 0.5;
  std::size_t k = 5;
  Method method = Method::kCOIN;
  // Experimental switches; both off reproduces the printed objective.
  bool detach_teacher = false;
  bool reverse_kl = false;

  void validate() const;  // throws std::invalid_argument
  // Weights after the method tag has switched terms off.
  double effective_alpha() const;
  double effective_beta() const;
};

void to_json(nlohmann::json& j, const CoinConfig& c);
void from_json(const nlohmann::json& j, CoinConfig& c);

// --- Second moment of key vectors -------------------------------------------------

enum class MomentMode { kSum, kMean };

struct SecondMoment {
  Tensor matrix;  // [d_ff x d_ff]
  std::size_t sample_count = 0;
  MomentMode mode = MomentMode::kMean;
  std::size_t layer = 0;
};

// Streaming sum of k k^T over rows of key batches.
class MomentAccumulator {
 public:
  explicit MomentAccumulator(std::size_t dim);
  void add(const Tensor& keys);  // rows are keys; throws ShapeError on dimension drift
  void merge(const MomentAccumulator& other);
  std::size_t count() const noexcept { return count_; }
  SecondMoment finish(MomentMode mode) const;

 private:
  Eigen::MatrixXd sum_;
  std::size_t count_ = 0;
};

// Keys of `target` over `sequences`, at most `max_keys` of them (in order).
SecondMoment second_moment_from_corpus(const LMParams& params, EditTarget target,
                                       const std::vector<std::vector<TokenId>>& sequences,
                                       MomentMode mode, std::size_t max_keys = 100000,
                                       std::size_t batch_size = 64);

void save_second_moment(const SecondMoment& m, const std::filesystem::path& path);
SecondMoment load_second_moment(const std::filesystem::path& path);

// --- Loss terms ------------------------------------------------------------------

// ||(W - W0) C||_F^2 with C the moment matrix, in the stored [d_ff x d] layout
// (equal to ||C (W - W0)||_F^2 there, since C is symmetric).
template <typename T>
Var consistency_loss(BasicTape<T>& tape, Var w, const Tensor& w0, const SecondMoment& moment);
double consistency_loss(const Tensor& w, const Tensor& w0, const SecondMoment& moment);

// Both readings of the consistency term, for reporting.
struct ConsistencyForms {
  double literal = 0;  // ||dW C||^2
  double trace = 0;    // tr(dW C dW^T) = ||dW K0||^2 up to normalization
};
ConsistencyForms consistency_forms(const Tensor& w, const Tensor& w0, const SecondMoment& moment);

struct AlignOptions {
  std::size_t k = 5;
  bool detach_teacher = false;
  bool reverse_kl = false;
};

// Mean over sequences of (1/(T-1)) sum_t KL(P(.|x_1..x_t) || P(.|last k tokens)).
// Windows are re-positioned to start at 0. `global_logits`, when given, must
// hold the logits of every row of `batch` (shared with the NLL forward).
template <typename T>
Var align_loss(BasicTape<T>& tape, const ParamVars& pv, const LMConfig& config,
               const SequenceBatch& batch, const AlignOptions& opts,
               std::optional<Var> global_logits = std::nullopt);
double align_loss(const LMParams& params, const std::vector<TokenId>& tokens, std::size_t k);

struct CoinTerms {
  Var total, nll;
  std::optional<Var> align, cons;
};

struct CoinBreakdown {
  double total = 0, nll = 0, align = 0, cons = 0;
};

// nll + alpha * align + beta * cons. Terms with zero effective weight are not
// recorded, so alpha = beta = 0 is exactly the NLL objective.
template <typename T>
CoinTerms coin_loss(BasicTape<T>& tape, const ParamVars& pv, const LMConfig& config,
                    EditTarget target, const Tensor& w0, const SequenceBatch& batch,
                    const CoinConfig& coin, const SecondMoment* moment);

CoinBreakdown breakdown(const Tape& tape, const CoinTerms& terms);

}  // namespace ctxedit
