#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>

#include "ctxedit/edit.hpp"
#include "ctxedit/errors.hpp"
#include "ctxedit/eval.hpp"
#include "ctxedit/rng.hpp"

namespace ctxedit {
namespace {

using Seq = std::vector<TokenId>;

// Memoized recursion over suffixes, independent of the iterative table.
std::size_t lcs_oracle(const Seq& a, const Seq& b) {
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
  std::function<std::size_t(std::size_t, std::size_t)> go = [&](std::size_t i, std::size_t j) {
    if (i == a.size() || j == b.size()) return std::size_t{0};
    const auto key = std::pair{i, j};
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    const std::size_t r = a[i] == b[j] ? 1 + go(i + 1, j + 1) : std::max(go(i + 1, j), go(i, j + 1));
    memo[key] = r;
    return r;
  };
  return go(0, 0);
}

LMConfig small() {
  LMConfig c;
  c.vocab_size = inventory().vocab.size();
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 24;
  c.max_seq_len = 160;
  return c;
}

// Final LayerNorm outputs a constant row, so logits equal head row 0.
LMParams constant_model(const std::vector<std::pair<TokenId, double>>& logits) {
  auto p = init_params(small(), 1);
  for (auto& x : p.lnf_g.data()) x = 0;
  for (auto& x : p.lnf_b.data()) x = 0;
  p.lnf_b[0] = 1;
  for (auto& x : p.head.data()) x = 0;
  for (auto [t, v] : logits) p.head(0, static_cast<std::size_t>(t)) = v;
  return p;
}

TEST(Rouge, HandExamples) {
  const Seq abcd{1, 2, 3, 4}, ac{1, 3};
  const auto s = rouge_l(abcd, ac);
  EXPECT_EQ(s.precision, 0.5);
  EXPECT_EQ(s.recall, 1.0);
  EXPECT_NEAR(s.f1, 2.0 / 3.0, 1e-15);
  const auto same = rouge_l(abcd, abcd);
  EXPECT_EQ(same.precision, 1.0);
  EXPECT_EQ(same.recall, 1.0);
  EXPECT_EQ(same.f1, 1.0);
  const auto none = rouge_l(Seq{5, 6}, Seq{7, 8});
  EXPECT_EQ(none.f1, 0.0);
  EXPECT_EQ(none.precision, 0.0);
  EXPECT_EQ(rouge_l(Seq{}, ac).f1, 0.0);
  EXPECT_THROW(rouge_l(ac, Seq{}), std::invalid_argument);
}

TEST(Rouge, MatchesBruteForceOracle) {
  Rng rng(1);
  std::uniform_int_distribution<std::size_t> len(0, 20);
  std::uniform_int_distribution<TokenId> tok(0, 5);
  for (int n = 0; n < 1000; ++n) {
    Seq a(len(rng)), b(1 + len(rng) % 20);
    for (auto& t : a) t = tok(rng);
    for (auto& t : b) t = tok(rng);
    const double l = static_cast<double>(lcs_oracle(a, b));
    const auto s = rouge_l(a, b);
    const double p = a.empty() ? 0.0 : l / static_cast<double>(a.size());
    const double r = a.empty() ? 0.0 : l / static_cast<double>(b.size());
    const double f = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    ASSERT_EQ(s.precision, p);
    ASSERT_EQ(s.recall, r);
    ASSERT_EQ(s.f1, f);
    EXPECT_LE(s.f1, std::min(2 * s.precision, 2 * s.recall) + 1e-15);
    EXPECT_EQ(s.f1 == 0.0, l == 0.0 || a.empty());
  }
}

TEST(AnswerLogprob, UniformModel) {
  const auto p = constant_model({});
  const double v = static_cast<double>(p.config.vocab_size);
  EXPECT_NEAR(answer_logprob(p, {0, 5, 6}, {7, 8, 9}), -3 * std::log(v), 1e-10);
  EXPECT_EQ(answer_logprob(p, {0, 5}, {}), 0.0);
}

TEST(AnswerLogprob, AdditiveAndMonotone) {
  const auto p = init_params(small(), 2);
  Rng rng(3);
  std::uniform_int_distribution<TokenId> tok(1, 200);
  for (int n = 0; n < 10; ++n) {
    Seq q{0}, a;
    for (int i = 0; i < 4; ++i) q.push_back(tok(rng));
    for (int i = 0; i < 5; ++i) a.push_back(tok(rng));
    double direct = 0, prev = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      Seq ctx = q;
      ctx.insert(ctx.end(), a.begin(), a.begin() + static_cast<std::ptrdiff_t>(i));
      direct += next_token_logprobs(p, ctx)[static_cast<std::size_t>(a[i])];
      const double cur = answer_logprob(p, q, Seq(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(i + 1)));
      EXPECT_LE(cur, prev);
      prev = cur;
    }
    EXPECT_NEAR(answer_logprob(p, q, a), direct, 1e-10);
  }
  EXPECT_THROW(answer_logprob(p, Seq(150, 1), Seq(20, 2)), ShapeError);
}

TEST(GreedyDecode, BudgetStopAndSaturation) {
  const auto p = constant_model({{42, 30.0}});
  EXPECT_EQ(greedy_decode(p, {0, 1}, 5, std::nullopt), Seq(5, 42));
  EXPECT_TRUE(greedy_decode(p, {0, 1}, 5, TokenId{42}).empty());
  EXPECT_EQ(greedy_decode(p, Seq(158, 1), 16, std::nullopt).size(), 2u);
  EXPECT_NEAR(answer_logprob(p, {0, 1}, {42, 42}), 0.0, 1e-9);
}

TEST(ExactMatch, PrefixSemantics) {
  EXPECT_TRUE(exact_match(Seq{3, 4, 9, 9}, Seq{3, 4}));
  EXPECT_FALSE(exact_match(Seq{9, 3, 4}, Seq{3, 4}));
  EXPECT_FALSE(exact_match(Seq{3}, Seq{3, 4}));
}

TEST(PositionalEval, DeterministicAndCounterfactualBaseline) {
  const auto p = init_params(small(), 4);
  std::vector<EditDocument> docs;
  for (std::uint64_t s = 0; s < 3; ++s) docs.push_back(gen_edit_document(6, s));
  const auto a = positional_eval(p, docs, QueryFormat::kCompletion);
  const auto b = positional_eval(p, docs, QueryFormat::kCompletion);
  ASSERT_EQ(a.positions.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(a.positions[i].position, i + 1);
    EXPECT_EQ(a.positions[i].count, 3u);
    EXPECT_EQ(a.positions[i].rouge_f1, b.positions[i].rouge_f1);
    EXPECT_EQ(a.positions[i].answer_logprob, b.positions[i].answer_logprob);
    EXPECT_EQ(a.positions[i].em, 0.0);
    EXPECT_GE(a.positions[i].rouge_f1, 0.0);
    EXPECT_LE(a.positions[i].rouge_f1, 1.0);
  }
  const auto qa = positional_eval(p, docs, QueryFormat::kQA);
  EXPECT_EQ(qa.format, QueryFormat::kQA);
  EXPECT_EQ(qa.positions.size(), 6u);
}

TEST(PositionalEval, PaddedVocabularyIdsDecodeWithoutThrowing) {
  // The model vocabulary is padded past the word list; a model that prefers a
  // padding id still gets scored (as a miss) and printed.
  LMConfig c = small();
  c.vocab_size = inventory().vocab.size() + 4;
  auto p = init_params(c, 9);
  for (auto& x : p.lnf_g.data()) x = 0;
  for (auto& x : p.lnf_b.data()) x = 0;
  p.lnf_b[0] = 1;
  for (auto& x : p.head.data()) x = 0;
  const auto pad = static_cast<TokenId>(inventory().vocab.size() + 2);
  p.head(0, static_cast<std::size_t>(pad)) = 10;
  const auto r = evaluate_queries(p, gen_edit_document(3, 1), QueryFormat::kCompletion, 2);
  ASSERT_EQ(r.size(), 3u);
  EXPECT_EQ(r[0].rouge.f1, 0.0);
  EXPECT_EQ(r[0].decoded, "<id:" + std::to_string(pad) + "> <id:" + std::to_string(pad) + ">");
}

TEST(PositionalEval, AggregationArithmetic) {
  std::vector<QueryResult> r(3);
  r[0].position = 1;
  r[0].rouge = {1, 1, 1};
  r[0].em = true;
  r[1].position = 1;
  r[1].rouge = {0.5, 0.5, 0.5};
  r[2].position = 2;
  r[2].answer_logprob = -3;
  const auto rep = aggregate_positions(r, QueryFormat::kCompletion);
  ASSERT_EQ(rep.positions.size(), 2u);
  EXPECT_EQ(rep.positions[0].rouge_f1, 0.75);
  EXPECT_EQ(rep.positions[0].em, 0.5);
  EXPECT_EQ(rep.positions[1].answer_logprob, -3.0);
}

TEST(Restoration, FirstPositionGapIsExactlyZero) {
  const auto p = init_params(small(), 5);
  std::vector<Probe> probes;
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto d = gen_edit_document(6, s);
    for (std::size_t pos = 1; pos <= 6; ++pos) probes.push_back(build_probe(d, pos));
  }
  const auto rows = restoration_gap(p, probes);
  ASSERT_EQ(rows.size(), 30u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.gap, r.logprob_with - r.logprob_without);
    if (r.position == 1) EXPECT_EQ(r.gap, 0.0);
  }
  const auto agg = aggregate_restoration(rows);
  ASSERT_EQ(agg.size(), 6u);
  EXPECT_EQ(agg[0].gap, 0.0);
}

TEST(RelianceDrop, Arithmetic) {
  PositionalReport rep;
  rep.positions = {{1, 1, 0, 0, 1.0, 1, -1}, {2, 1, 0, 0, 0.8, 1, -2}, {3, 1, 0, 0, 0.6, 0, -4}};
  const auto f1 = reliance_drop(rep, Metric::kF1);
  EXPECT_NEAR(f1.drop_abs, 0.4, 1e-15);
  EXPECT_NEAR(*f1.drop_rel, 0.4, 1e-15);
  EXPECT_FALSE(reliance_drop(rep, Metric::kAnswerLogprob).drop_rel.has_value());
  EXPECT_EQ(reliance_drop(rep, Metric::kAnswerLogprob).drop_abs, 3.0);
  PositionalReport flat;
  flat.positions = {{1, 1, 0, 0, 0.5, 0, 0}, {2, 1, 0, 0, 0.5, 0, 0}};
  EXPECT_EQ(reliance_drop(flat, Metric::kF1).drop_abs, 0.0);
  RelianceStats coin, ft;
  coin.drop_rel = 0.2;
  ft.drop_rel = 0.4;
  EXPECT_NEAR(*mitigation_ratio(coin, ft), 0.5, 1e-15);
  EXPECT_THROW(reliance_drop(PositionalReport{}, Metric::kF1), std::invalid_argument);
}

TEST(SignTest, ExactBinomialTail) {
  std::vector<double> x(10, 1.0), y(10, 0.0);
  auto t = paired_sign_test(x, y);
  EXPECT_EQ(t.wins, 10u);
  EXPECT_DOUBLE_EQ(t.p_value, 1.0 / 1024);
  y[0] = 2.0;
  EXPECT_DOUBLE_EQ(paired_sign_test(x, y).p_value, 11.0 / 1024);
  y[1] = 1.0;  // a tie is dropped: 8 of 9
  t = paired_sign_test(x, y);
  EXPECT_EQ(t.ties, 1u);
  EXPECT_DOUBLE_EQ(t.p_value, 10.0 / 512);
  EXPECT_DOUBLE_EQ(binomial_upper_tail(4, 0), 1.0);
  EXPECT_DOUBLE_EQ(binomial_upper_tail(4, 2), 11.0 / 16);
}

TEST(Spearman, RanksWithTies) {
  const std::vector<double> pos{1, 2, 3, 4, 5};
  EXPECT_NEAR(spearman(pos, std::vector<double>{5, 4, 3, 2, 1}), -1.0, 1e-15);
  EXPECT_NEAR(spearman(pos, std::vector<double>{1, 3, 7, 8, 20}), 1.0, 1e-15);
  // x ranks 1,2.5,2.5,4 and y ranks 1,3,2,4: Pearson of ranks by hand = 4.5 / sqrt(4.5 * 5).
  EXPECT_NEAR(spearman(std::vector<double>{1, 2, 2, 3}, std::vector<double>{1, 3, 2, 4}),
              4.5 / std::sqrt(4.5 * 5.0), 1e-15);
  EXPECT_EQ(spearman(pos, std::vector<double>(5, 1.0)), 0.0);
}

TEST(PositionBin, FollowsSixPlusScheme) {
  EXPECT_EQ(position_bin(1), "1");
  EXPECT_EQ(position_bin(6), "6");
  EXPECT_EQ(position_bin(7), ">6");
  EXPECT_EQ(position_bin(12), ">6");
  EXPECT_THROW(position_bin(0), std::invalid_argument);
}

TEST(Csv, HeadersAndRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "ctxedit_eval_csv";
  write_positional_csv({{3, "FT", "completion", {2, 4, 0.5, 0.25, 1.0 / 3, 0, -1.5}}},
                       dir / "positional.csv");
  write_restoration_csv({{3, "FT", {1, -2, -2, 0}}}, dir / "restoration.csv");
  write_locality_csv({{3, "COIN", 10.5, 11.25}}, dir / "locality.csv");
  std::ifstream in(dir / "positional.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "seed,method,format,position,rouge_p,rouge_r,rouge_f1,em,answer_logprob");
  EXPECT_EQ(row, "3,FT,completion,2,0.5,0.25,0.3333333333333333,0,-1.5");
  const auto t = read_csv(dir / "restoration.csv");
  EXPECT_EQ(t.header.size(), 6u);
  EXPECT_EQ(t.rows[0][t.column("gap")], "0");
  EXPECT_THROW(t.column("bogus"), ConfigError);
  EXPECT_EQ(read_csv(dir / "locality.csv").rows[0][3], "11.25");
  EXPECT_THROW(read_csv(dir / "none.csv"), MissingArtifactError);
  EXPECT_EQ(std::stod(format_double(0.1 + 0.2)), 0.1 + 0.2);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace ctxedit
