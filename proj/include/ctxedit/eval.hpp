#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxedit/corpus.hpp"
#include "ctxedit/lm.hpp"

namespace ctxedit {

struct RougeScore {
  double precision = 0, recall = 0, f1 = 0;
};

std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b);
// Throws std::invalid_argument for an empty reference.
RougeScore rouge_l(std::span<const TokenId> candidate, std::span<const TokenId> reference);

// Greedy continuation of `prompt`, at most `budget` tokens, stopping before
// `stop` (not included in the result).
std::vector<TokenId> greedy_decode(const LMParams& params, const std::vector<TokenId>& prompt,
                                   std::size_t budget, std::optional<TokenId> stop);

// Gold span at the start of the decode.
bool exact_match(std::span<const TokenId> decoded, std::span<const TokenId> gold);

// Sum of log P(answer_i | query + answer_<i). Over-length input raises ShapeError.
double answer_logprob(const LMParams& params, const std::vector<TokenId>& query,
                      const std::vector<TokenId>& answer);

enum class QueryFormat { kCompletion, kQA };
std::string to_string(QueryFormat f);
QueryFormat format_from_string(const std::string& s);  // throws ConfigError

struct PositionMetrics {
  std::size_t position = 0;
  std::size_t count = 0;
  double rouge_p = 0, rouge_r = 0, rouge_f1 = 0, em = 0, answer_logprob = 0;
};

struct PositionalReport {
  QueryFormat format = QueryFormat::kCompletion;
  std::vector<PositionMetrics> positions;  // ascending, one entry per observed position
};

inline constexpr std::size_t kDecodeBudget = 16;

// Per-query metrics in document order, then averaged per position.
struct QueryResult {
  std::string doc_id;
  std::size_t position = 0;
  RougeScore rouge;
  bool em = false;
  double answer_logprob = 0;
  std::string decoded;
};

std::vector<QueryResult> evaluate_queries(const LMParams& params, const EditDocument& doc,
                                          QueryFormat format, std::size_t budget = kDecodeBudget);
PositionalReport aggregate_positions(const std::vector<QueryResult>& results, QueryFormat format);
PositionalReport positional_eval(const LMParams& params, const std::vector<EditDocument>& docs,
                                 QueryFormat format, std::size_t budget = kDecodeBudget);

struct RestorationRow {
  std::size_t position = 0;
  double logprob_without = 0, logprob_with = 0, gap = 0;
};

std::vector<RestorationRow> restoration_gap(const LMParams& params,
                                            const std::vector<Probe>& probes);
// Mean per position, ascending.
std::vector<RestorationRow> aggregate_restoration(const std::vector<RestorationRow>& rows);

enum class Metric { kF1, kAnswerLogprob, kEM };

struct RelianceStats {
  double first = 0, last = 0;
  double drop_abs = 0;
  std::optional<double> drop_rel;  // undefined when first <= 0
};

RelianceStats reliance_drop(const PositionalReport& report, Metric metric);
// 1 - drop_rel(coin) / drop_rel(ft); undefined if either drop is.
std::optional<double> mitigation_ratio(const RelianceStats& coin, const RelianceStats& ft);

// --- Statistics -------------------------------------------------------------------

struct SignTest {
  std::size_t wins = 0, losses = 0, ties = 0;
  double p_value = 1;
};

// One-sided exact binomial sign test of H1: x_i > y_i more often than not.
// Ties are dropped.
SignTest paired_sign_test(std::span<const double> x, std::span<const double> y);
double binomial_upper_tail(std::size_t n, std::size_t k);  // P(X >= k), X ~ Bin(n, 1/2)

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

// "1".."6" and ">6" beyond six positions.
std::string position_bin(std::size_t position);

// --- CSV --------------------------------------------------------------------------

struct PositionalCsvRow {
  std::uint64_t seed = 0;
  std::string method, format;
  PositionMetrics m;
};
struct RestorationCsvRow {
  std::uint64_t seed = 0;
  std::string method;
  RestorationRow r;
};
struct LocalityCsvRow {
  std::uint64_t seed = 0;
  std::string method;
  double ppl_pre = 0, ppl_post = 0;
};

inline constexpr const char* kPositionalHeader =
    "seed,method,format,position,rouge_p,rouge_r,rouge_f1,em,answer_logprob";
inline constexpr const char* kRestorationHeader =
    "seed,method,position,logprob_without,logprob_with,gap";
inline constexpr const char* kLocalityHeader = "seed,method,ppl_pre,ppl_post";

void write_positional_csv(const std::vector<PositionalCsvRow>& rows,
                          const std::filesystem::path& path);
void write_restoration_csv(const std::vector<RestorationCsvRow>& rows,
                           const std::filesystem::path& path);
void write_locality_csv(const std::vector<LocalityCsvRow>& rows, const std::filesystem::path& path);

// A parsed CSV file: header names and string cells.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Column index; throws ConfigError naming the missing column.
  std::size_t column(const std::string& name) const;
};
CsvTable read_csv(const std::filesystem::path& path);  // MissingArtifactError if absent

// Shortest round-trip decimal representation.
std::string format_double(double x);

}  // namespace ctxedit
