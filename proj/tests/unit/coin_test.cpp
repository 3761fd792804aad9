#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "ctxedit/coin.hpp"
#include "ctxedit/errors.hpp"
#include "ctxedit/rng.hpp"

namespace ctxedit {
namespace {

LMConfig tiny() {
  LMConfig c;
  c.vocab_size = 19;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 10;
  c.max_seq_len = 24;
  return c;
}

std::vector<TokenId> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::uniform_int_distribution<TokenId> d(0, static_cast<TokenId>(vocab) - 1);
  std::vector<TokenId> out(n);
  for (auto& t : out) t = d(rng);
  return out;
}

Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0, scale);
  Tensor t(std::move(s));
  for (auto& x : t.data()) x = n(rng);
  return t;
}

// Next-token log-softmax rows for one standalone sequence.
std::vector<double> last_logprobs(const LMParams& p, const std::vector<TokenId>& seq) {
  return next_token_logprobs(p, seq);
}

double kl(const std::vector<double>& logp, const std::vector<double>& logq) {
  double s = 0;
  for (std::size_t i = 0; i < logp.size(); ++i) s += std::exp(logp[i]) * (logp[i] - logq[i]);
  return s;
}

TEST(CoinConfig, ValidationAndMethods) {
  CoinConfig c;
  EXPECT_NO_THROW(c.validate());
  c.k = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = CoinConfig{};
  c.alpha = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = CoinConfig{0.1, 0.5, 5, Method::kFT};
  EXPECT_EQ(c.effective_alpha(), 0.0);
  EXPECT_EQ(c.effective_beta(), 0.0);
  c.method = Method::kCOINNoAlign;
  EXPECT_EQ(c.effective_alpha(), 0.0);
  EXPECT_EQ(c.effective_beta(), 0.5);
  c.method = Method::kCOINNoCons;
  EXPECT_EQ(c.effective_alpha(), 0.1);
  EXPECT_EQ(c.effective_beta(), 0.0);
  for (Method m : {Method::kFT, Method::kCOIN, Method::kCOINNoAlign, Method::kCOINNoCons}) {
    EXPECT_EQ(method_from_string(to_string(m)), m);
  }
  EXPECT_THROW(method_from_string("ROME"), ConfigError);
  const nlohmann::json j = c;
  EXPECT_EQ(j.get<CoinConfig>().method, Method::kCOINNoCons);
}

TEST(SecondMoment, HandExamples) {
  MomentAccumulator a(2);
  a.add(Tensor(Shape{1, 2}, {1.0, 0.0}));
  const auto s = a.finish(MomentMode::kSum);
  EXPECT_EQ(s.matrix, Tensor(Shape{2, 2}, {1.0, 0.0, 0.0, 0.0}));
  MomentAccumulator b(2);
  b.add(Tensor(Shape{2, 2}, {1.0, 0.0, 0.0, 1.0}));
  const auto m = b.finish(MomentMode::kMean);
  EXPECT_EQ(m.matrix, Tensor(Shape{2, 2}, {0.5, 0.0, 0.0, 0.5}));
  EXPECT_EQ(m.sample_count, 2u);
  EXPECT_THROW(b.add(Tensor(Shape{1, 3})), ShapeError);
  EXPECT_THROW(MomentAccumulator(2).finish(MomentMode::kMean), DegenerateInputError);
}

TEST(SecondMoment, OrderIndependentSymmetricPsd) {
  Rng rng(1);
  const Tensor keys = random_tensor({200, 6}, rng);
  std::vector<std::size_t> order(200);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  MomentAccumulator fwd(6), shuf(6), halves(6), tail(6);
  for (std::size_t r = 0; r < 200; r += 7) {
    const std::size_t n = std::min<std::size_t>(7, 200 - r);
    Tensor chunk(Shape{n, 6}), schunk(Shape{n, 6});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < 6; ++c) {
        chunk(i, c) = keys(r + i, c);
        schunk(i, c) = keys(order[r + i], c);
      }
    fwd.add(chunk);
    shuf.add(schunk);
    (r < 100 ? halves : tail).add(chunk);
  }
  halves.merge(tail);
  const auto a = fwd.finish(MomentMode::kMean), b = shuf.finish(MomentMode::kMean),
             c = halves.finish(MomentMode::kMean);
  // Oracle: K^T K / n by explicit loops.
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      double s = 0;
      for (std::size_t r = 0; r < 200; ++r) s += keys(r, i) * keys(r, j);
      EXPECT_NEAR(a.matrix(i, j), s / 200, 1e-12);
      EXPECT_NEAR(a.matrix(i, j), b.matrix(i, j), 1e-12);
      EXPECT_NEAR(a.matrix(i, j), c.matrix(i, j), 1e-12);
      EXPECT_NEAR(a.matrix(i, j), a.matrix(j, i), 1e-9);
    }
  Eigen::Map<const Eigen::Matrix<double, 6, 6, Eigen::RowMajor>> mm(a.matrix.ptr());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(mm)};
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-8);
}

TEST(SecondMoment, PersistsAndComesFromCorpus) {
  const auto params = init_params(tiny(), 3);
  Rng rng(2);
  std::vector<std::vector<TokenId>> seqs;
  for (int i = 0; i < 5; ++i) seqs.push_back(random_tokens(9, 19, rng));
  const auto m = second_moment_from_corpus(params, {1}, seqs, MomentMode::kSum, 40, 2);
  EXPECT_EQ(m.sample_count, 40u);
  EXPECT_EQ(m.layer, 1u);
  // Oracle: the first 40 keys summed by hand.
  const Tensor keys = key_activations(params, SequenceBatch::from(seqs), {1});
  double s01 = 0;
  for (std::size_t r = 0; r < 40; ++r) s01 += keys(r, 0) * keys(r, 1);
  EXPECT_NEAR(m.matrix(0, 1), s01, 1e-12);

  const auto path = std::filesystem::temp_directory_path() / "ctxedit_moment_test.json";
  save_second_moment(m, path);
  const auto back = load_second_moment(path);
  EXPECT_EQ(back.matrix, m.matrix);
  EXPECT_EQ(back.sample_count, 40u);
  EXPECT_EQ(back.mode, MomentMode::kSum);
  std::filesystem::remove(path);
}

TEST(Consistency, HandExamples) {
  SecondMoment id;
  id.matrix = Tensor(Shape{2, 2}, {1.0, 0.0, 0.0, 1.0});
  const Tensor w0(Shape{2, 2}, {0.3, -0.2, 0.7, 1.1});
  EXPECT_EQ(consistency_loss(w0, w0, id), 0.0);
  Tensor w = w0;
  w(0, 0) += 1.0;
  EXPECT_NEAR(consistency_loss(w, w0, id), 1.0, 1e-15);
  EXPECT_THROW(consistency_loss(Tensor(Shape{3, 2}), Tensor(Shape{3, 2}), id), ShapeError);
  EXPECT_THROW(consistency_loss(w, Tensor(Shape{2, 3}), id), ShapeError);
}

TEST(Consistency, LiteralAndTraceFormsAgainstOracle) {
  Rng rng(4);
  const Tensor keys = random_tensor({30, 5}, rng);
  MomentAccumulator acc(5);
  acc.add(keys);
  const auto m = acc.finish(MomentMode::kMean);
  const Tensor w0 = random_tensor({5, 3}, rng), w = random_tensor({5, 3}, rng);
  // Transposed layout: dW_p = (W - W0)^T is [3 x 5]; literal = ||dW_p C||^2, trace = ||dW_p K^T||^2 / n.
  double lit = 0, tr = 0;
  for (std::size_t o = 0; o < 3; ++o) {
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < 5; ++i) s += (w(i, o) - w0(i, o)) * m.matrix(i, j);
      lit += s * s;
    }
    for (std::size_t r = 0; r < 30; ++r) {
      double s = 0;
      for (std::size_t i = 0; i < 5; ++i) s += (w(i, o) - w0(i, o)) * keys(r, i);
      tr += s * s / 30;
    }
  }
  const auto f = consistency_forms(w, w0, m);
  EXPECT_NEAR(f.literal, lit, 1e-12 * lit);
  EXPECT_NEAR(f.trace, tr, 1e-12 * tr);
  Tape tape;
  const Var wv = tape.leaf(w, true);
  EXPECT_NEAR(tape.value(consistency_loss(tape, wv, w0, m)).item(), lit, 1e-12 * lit);
}

TEST(Consistency, NullSpaceInvariance) {
  // Keys confined to a 3-dimensional subspace of R^7.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    const Tensor basis = random_tensor({3, 7}, rng);
    const Tensor coeff = random_tensor({50, 3}, rng);
    Tensor keys(Shape{50, 7});
    for (std::size_t r = 0; r < 50; ++r)
      for (std::size_t c = 0; c < 7; ++c)
        for (std::size_t b = 0; b < 3; ++b) keys(r, c) += coeff(r, b) * basis(b, c);
    MomentAccumulator acc(7);
    acc.add(keys);
    const auto m = acc.finish(MomentMode::kMean);

    Eigen::Map<const Eigen::Matrix<double, 7, 7, Eigen::RowMajor>> mm(m.matrix.ptr());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es{Eigen::MatrixXd(mm)};
    const double top = es.eigenvalues().maxCoeff();
    const Tensor w0 = random_tensor({7, 4}, rng);
    const Tensor w = random_tensor({7, 4}, rng);
    Tensor w_shift = w;
    for (Eigen::Index e = 0; e < 7; ++e) {
      if (es.eigenvalues()(e) > 1e-10 * top) continue;
      std::normal_distribution<double> n(0, 1);
      for (std::size_t o = 0; o < 4; ++o) {
        const double a = n(rng);
        for (std::size_t i = 0; i < 7; ++i)
          w_shift(i, o) += a * es.eigenvectors()(static_cast<Eigen::Index>(i), e);
      }
    }
    ASSERT_NE(w_shift, w);
    EXPECT_LE(std::abs(consistency_loss(w_shift, w0, m) - consistency_loss(w, w0, m)), 1e-10);
    // Null-space direction alone from W0 costs nothing.
    Tensor pure = w0;
    for (std::size_t k = 0; k < pure.size(); ++k) pure[k] += w_shift[k] - w[k];
    EXPECT_LE(consistency_loss(pure, w0, m), 1e-10);
  }
}

TEST(Align, IdentityWhenWindowCoversSequence) {
  const auto params = init_params(tiny(), 5);
  Rng rng(6);
  const auto seq = random_tokens(10, 19, rng);
  EXPECT_EQ(align_loss(params, seq, 10), 0.0);
  EXPECT_EQ(align_loss(params, seq, 50), 0.0);
  EXPECT_THROW(align_loss(params, seq, 0), std::invalid_argument);
}

TEST(Align, MatchesNaivePerPositionSum) {
  const auto params = init_params(tiny(), 7);
  Rng rng(8);
  const std::size_t T = 11;
  const auto seq = random_tokens(T, 19, rng);
  for (std::size_t k : {1u, 3u, 10u}) {
    double naive = 0;
    for (std::size_t t = 1; t <= T; ++t) {
      const std::vector<TokenId> prefix(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(t));
      const std::size_t from = t > k ? t - k : 0;
      const std::vector<TokenId> window(seq.begin() + static_cast<std::ptrdiff_t>(from),
                                        seq.begin() + static_cast<std::ptrdiff_t>(t));
      naive += kl(last_logprobs(params, prefix), last_logprobs(params, window));
    }
    naive /= static_cast<double>(T - 1);
    EXPECT_NEAR(align_loss(params, seq, k), naive, 1e-12) << "k=" << k;
    if (k == T - 1) {
      const std::vector<TokenId> window(seq.begin() + 1, seq.end());
      EXPECT_NEAR(align_loss(params, seq, k),
                  kl(last_logprobs(params, seq), last_logprobs(params, window)) / (T - 1), 1e-12);
    }
  }
}

TEST(Align, NonNegativeOverRandomInstances) {
  Rng rng(9);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto params = init_params(tiny(), 20 + s);
    const auto seq = random_tokens(4 + s % 12, 19, rng);
    EXPECT_GE(align_loss(params, seq, 1 + s % 5), 0.0);
  }
}

TEST(Align, WindowMonotoneForMarkovModel) {
  // No positions and no attention output: the next-token law depends on the
  // current token only, so every window k >= 1 agrees with the full prefix.
  auto params = init_params(tiny(), 11);
  for (auto& x : params.pos_emb.data()) x = 0;
  for (auto& b : params.blocks)
    for (auto& x : b.w_o.data()) x = 0;
  Rng rng(10);
  const auto seq = random_tokens(15, 19, rng);
  for (std::size_t k = 1; k <= 16; ++k) EXPECT_LE(align_loss(params, seq, k), 1e-12) << k;
  // The original model is not Markov.
  EXPECT_GT(align_loss(init_params(tiny(), 11), seq, 1), 1e-6);
}

TEST(CoinLoss, ReducesExactlyToNll) {
  const auto params = init_params(tiny(), 12);
  const EditTarget target{0};
  Rng rng(11);
  const auto batch = SequenceBatch::from({random_tokens(9, 19, rng), random_tokens(14, 19, rng)});
  const double ref = batch_nll(params, batch);
  SecondMoment m;
  m.matrix = Tensor(Shape{10, 10}, 1.0);
  for (Method method : {Method::kCOIN, Method::kFT}) {
    CoinConfig c{0.0, 0.0, 3, method};
    if (method == Method::kFT) c = CoinConfig{0.7, 2.0, 3, Method::kFT};
    Tape tape;
    const ParamVars pv = bind_params(tape, params, Trainable::kTargetOnly, target);
    const auto terms = coin_loss(tape, pv, params.config, target, params.blocks[0].w_down, batch,
                                 c, &m);
    EXPECT_EQ(tape.value(terms.total).item(), ref);
    EXPECT_FALSE(terms.align.has_value());
    EXPECT_FALSE(terms.cons.has_value());
  }
}

TEST(CoinLoss, TotalIsWeightedSum) {
  auto params = init_params(tiny(), 13);
  const EditTarget target{1};
  const Tensor w0 = params.blocks[1].w_down;
  Rng rng(12);
  params.blocks[1].w_down = random_tensor({10, 8}, rng, 0.3);
  const auto a = random_tokens(12, 19, rng), b = random_tokens(7, 19, rng);
  const auto batch = SequenceBatch::from({a, b});
  MomentAccumulator acc(10);
  acc.add(random_tensor({40, 10}, rng));
  const auto m = acc.finish(MomentMode::kMean);
  const CoinConfig c{0.3, 0.05, 4, Method::kCOIN};
  Tape tape;
  const ParamVars pv = bind_params(tape, params, Trainable::kTargetOnly, target);
  const auto terms = coin_loss(tape, pv, params.config, target, w0, batch, c, &m);
  const auto br = breakdown(tape, terms);
  EXPECT_NEAR(br.nll, batch_nll(params, batch), 1e-12);
  EXPECT_NEAR(br.align, 0.5 * (align_loss(params, a, 4) + align_loss(params, b, 4)), 1e-12);
  EXPECT_NEAR(br.cons, consistency_loss(params.blocks[1].w_down, w0, m), 1e-12 * br.cons);
  EXPECT_NEAR(br.total, br.nll + 0.3 * br.align + 0.05 * br.cons, 1e-12);
  EXPECT_THROW(coin_loss(tape, pv, params.config, target, w0, batch, c, nullptr),
               std::invalid_argument);
}

TEST(CoinLoss, GradCheckComposite) {
  auto params = init_params(tiny(), 14);
  const EditTarget target{0};
  Rng rng(13);
  const Tensor w0 = params.blocks[0].w_down;
  params.blocks[0].w_down = random_tensor({10, 8}, rng, 0.3);
  const auto batch = SequenceBatch::from({random_tokens(10, 19, rng), random_tokens(6, 19, rng)});
  MomentAccumulator acc(10);
  acc.add(random_tensor({25, 10}, rng));
  const auto m = acc.finish(MomentMode::kMean);
  // The detached teacher is not the gradient of the printed objective, so only
  // the live-teacher forms are checked here.
  for (bool reverse : {false, true}) {
    const AlignOptions opts{3, false, reverse};
    auto composite = [&](auto& tape, Var x) {
      ParamVars pv = bind_params(tape, params, Trainable::kNone);
      pv.blocks[0].w_down = x;
      const Var al = align_loss(tape, pv, params.config, batch, opts);
      const Var cn = consistency_loss(tape, x, w0, m);
      return add(tape, scale(tape, al, 0.4), scale(tape, cn, 0.02));
    };
    EXPECT_LE(grad_check(composite, params.blocks[0].w_down, 1e-5), 1e-6) << "reverse=" << reverse;
  }
  auto full = [&](auto& tape, Var x) {
    ParamVars pv = bind_params(tape, params, Trainable::kNone);
    pv.blocks[0].w_down = x;
    return coin_loss(tape, pv, params.config, target, w0, batch, CoinConfig{0.4, 0.02, 3}, &m)
        .total;
  };
  EXPECT_LE(grad_check(full, params.blocks[0].w_down, 1e-5), 1e-6);
}

TEST(CoinLoss, TeacherDetachChangesGradientNotValue) {
  const auto params = init_params(tiny(), 15);
  const EditTarget target{0};
  Rng rng(14);
  const auto batch = SequenceBatch::from({random_tokens(12, 19, rng)});
  auto run = [&](bool detach, bool reverse) {
    Tape tape;
    const ParamVars pv = bind_params(tape, params, Trainable::kTargetOnly, target);
    const Var al = align_loss(tape, pv, params.config, batch, AlignOptions{2, detach, reverse});
    tape.backward(al);
    return std::pair{tape.value(al).item(), tape.grad(pv.blocks[0].w_down)};
  };
  const auto [v0, g0] = run(false, false);
  const auto [v1, g1] = run(true, false);
  const auto [v2, g2] = run(false, true);
  EXPECT_EQ(v0, v1);
  EXPECT_NE(g0, g1);
  EXPECT_NE(v0, v2);
  EXPECT_GT(v2, 0.0);
}

}  // namespace
}  // namespace ctxedit
