#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>

#include "ctxedit/autodiff.hpp"

namespace ctxedit {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMatMap<T> as_matrix(const BasicTensor<T>& t) {
  return ConstMatMap<T>(t.ptr(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MatMap<T> as_matrix(BasicTensor<T>& t) {
  return MatMap<T>(t.ptr(), static_cast<Eigen::Index>(t.rows()),
                   static_cast<Eigen::Index>(t.cols()));
}

void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                     shape_str(b));
  }
}

void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(s));
  }
}

template <typename T>
T log_sum_exp(const T* row, std::size_t n) {
  T mx = row[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  T acc = 0;
  for (std::size_t j = 0; j < n; ++j) acc += std::exp(row[j] - mx);
  return mx + std::log(acc);
}

}  // namespace

template <typename T>
Var add(BasicTape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  require_same_shape(av.shape(), bv.shape(), "add");
  BasicTensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](BasicTape<T>& t, Var o) {
    const auto& g = t.grad(o);
    for (Var in : {a, b}) {
      if (!t.requires_grad(in)) continue;
      auto& gi = t.grad_buffer(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

template <typename T>
Var sub(BasicTape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  require_same_shape(av.shape(), bv.shape(), "sub");
  BasicTensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](BasicTape<T>& t, Var o) {
    const auto& g = t.grad(o);
    if (t.requires_grad(a)) {
      auto& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var mul(BasicTape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  require_same_shape(av.shape(), bv.shape(), "mul");
  BasicTensor<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape.record(std::move(out), {a, b}, [a, b](BasicTape<T>& t, Var o) {
    const auto& g = t.grad(o);
    if (t.requires_grad(a)) {
      const auto& bv = t.value(b);
      auto& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      const auto& av = t.value(a);
      auto& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var scale(BasicTape<T>& tape, Var a, std::type_identity_t<T> factor) {
  BasicTensor<T> out = tape.value(a);
  for (auto& x : out.data()) x *= factor;
  return tape.record(std::move(out), {a}, [a, factor](BasicTape<T>& t, Var o) {
    const auto& g = t.grad(o);
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
  });
}

template <typename T>
Var sum(BasicTape<T>& tape, Var a) {
  T acc = 0;
  for (T x : tape.value(a).data()) acc += x;
  return tape.record(BasicTensor<T>::scalar(acc), {a}, [a](BasicTape<T>& t, Var o) {
    const T g = t.grad(o)[0];
    for (auto& x : t.grad_buffer(a).data()) x += g;
  });
}

template <typename T>
Var pick(BasicTape<T>& tape, Var a, std::size_t index) {
  const auto& av = tape.value(a);
  if (index >= av.size()) {
    throw std::out_of_range("pick: index " + std::to_string(index) + " outside " +
                            shape_str(av.shape()));
  }
  return tape.record(BasicTensor<T>::scalar(av[index]), {a},
                     [a, index](BasicTape<T>& t, Var o) {
                       t.grad_buffer(a)[index] += t.grad(o)[0];
                     });
}

template <typename T>
Var transpose(BasicTape<T>& tape, Var a) {
  const auto& av = tape.value(a);
  require_rank2(av.shape(), "transpose");
  BasicTensor<T> out(Shape{av.cols(), av.rows()});
  as_matrix(out) = as_matrix(av).transpose();
  return tape.record(std::move(out), {a}, [a](BasicTape<T>& t, Var o) {
    as_matrix(t.grad_buffer(a)) += as_matrix(t.grad(o)).transpose();
  });
}

template <typename T>
Var gather_rows(BasicTape<T>& tape, Var table, std::span<const std::size_t> rows) {
  const auto& tv = tape.value(table);
  if (tv.rank() != 2) throw ShapeError("gather_rows: expected a matrix, got " + shape_str(tv.shape()));
  const std::size_t width = tv.cols();
  BasicTensor<T> out(Shape{rows.size(), width});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= tv.rows()) {
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[r]) +
                              " outside " + shape_str(tv.shape()));
    }
    std::copy_n(tv.ptr() + rows[r] * width, width, out.ptr() + r * width);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return tape.record(std::move(out), {table},
                     [table, idx = std::move(idx), width](BasicTape<T>& t, Var o) {
                       const auto& g = t.grad(o);
                       auto& gt = t.grad_buffer(table);
                       for (std::size_t r = 0; r < idx.size(); ++r) {
                         T* dst = gt.ptr() + idx[r] * width;
                         const T* src = g.ptr() + r * width;
                         for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
                       }
                     });
}

template <typename T>
Var matmul(BasicTape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  require_rank2(av.shape(), "matmul");
  require_rank2(bv.shape(), "matmul");
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(av.shape()) + " x " +
                     shape_str(bv.shape()));
  }
  BasicTensor<T> out(Shape{av.rows(), bv.cols()});
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  return tape.record(std::move(out), {a, b}, [a, b](BasicTape<T>& t, Var o) {
    const auto g = as_matrix(t.grad(o));
    if (t.requires_grad(a)) {
      as_matrix(t.grad_buffer(a)).noalias() += g * as_matrix(t.value(b)).transpose();
    }
    if (t.requires_grad(b)) {
      as_matrix(t.grad_buffer(b)).noalias() += as_matrix(t.value(a)).transpose() * g;
    }
  });
}

template <typename T>
Var frobenius_sq(BasicTape<T>& tape, Var a) {
  const auto& av = tape.value(a);
  require_rank2(av.shape(), "frobenius_sq");
  T acc = 0;
  for (T x : av.data()) acc += x * x;
  return tape.record(BasicTensor<T>::scalar(acc), {a}, [a](BasicTape<T>& t, Var o) {
    const T g = t.grad(o)[0];
    const auto& av = t.value(a);
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] += 2 * g * av[i];
  });
}

template <typename T>
Var row_softmax(BasicTape<T>& tape, Var a) {
  const auto& av = tape.value(a);
  const std::size_t n = av.cols();
  if (n == 0) throw ShapeError("row_softmax: empty last dimension");
  BasicTensor<T> out(av.shape());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    const T* x = av.ptr() + r * n;
    T* y = out.ptr() + r * n;
    T mx = x[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  return tape.record(std::move(out), {a}, [a, n](BasicTape<T>& t, Var o) {
    const auto& y = t.value(o);
    const auto& g = t.grad(o);
    auto& ga = t.grad_buffer(a);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const std::size_t base = r * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g[base + j] * y[base + j];
      for (std::size_t j = 0; j < n; ++j) ga[base + j] += y[base + j] * (g[base + j] - dot);
    }
  });
}

template <typename T>
Var l2_normalize(BasicTape<T>& tape, Var v) {
  const auto& vv = tape.value(v);
  T sq = 0;
  for (T x : vv.data()) sq += x * x;
  const T norm = std::sqrt(sq);
  if (!(norm > 0)) throw DegenerateInputError("l2_normalize: zero vector");
  BasicTensor<T> out = vv;
  for (auto& x : out.data()) x /= norm;
  return tape.record(std::move(out), {v}, [v, norm](BasicTape<T>& t, Var o) {
    const auto& y = t.value(o);
    const auto& g = t.grad(o);
    T dot = 0;
    for (std::size_t i = 0; i < y.size(); ++i) dot += y[i] * g[i];
    auto& gv = t.grad_buffer(v);
    for (std::size_t i = 0; i < y.size(); ++i) gv[i] += (g[i] - y[i] * dot) / norm;
  });
}

template <typename T>
Var gelu(BasicTape<T>& tape, Var a) {
  static const T kInvSqrt2 = T(1) / std::sqrt(T(2));
  BasicTensor<T> out = tape.value(a);
  for (auto& x : out.data()) x = T(0.5) * x * (T(1) + std::erf(x * kInvSqrt2));
  return tape.record(std::move(out), {a}, [a](BasicTape<T>& t, Var o) {
    static const T kInvSqrt2Pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    const auto& x = t.value(a);
    const auto& g = t.grad(o);
    auto& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T cdf = T(0.5) * (T(1) + std::erf(x[i] * kInvSqrt2));
      const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * x[i] * x[i]);
      ga[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

template <typename T>
Var layer_norm(BasicTape<T>& tape, Var x, Var gain, Var bias, std::type_identity_t<T> eps) {
  const auto& xv = tape.value(x);
  const auto& gv = tape.value(gain);
  const auto& bv = tape.value(bias);
  const std::size_t d = xv.cols();
  if (gv.size() != d || bv.size() != d) {
    throw ShapeError("layer_norm: gain/bias size does not match width " + std::to_string(d));
  }
  const std::size_t n = xv.rows();
  auto xhat = std::make_shared<BasicTensor<T>>(xv.shape());
  auto rstd = std::make_shared<std::vector<T>>(n);
  BasicTensor<T> out(xv.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = xv.ptr() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mean) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return tape.record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, xhat, rstd, d, n](BasicTape<T>& t, Var o) {
        const auto& g = t.grad(o);
        if (t.requires_grad(bias)) {
          auto& gb = t.grad_buffer(bias);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
        if (t.requires_grad(gain)) {
          auto& gg = t.grad_buffer(gain);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
        }
        if (t.requires_grad(x)) {
          const auto& gv = t.value(gain);
          auto& gx = t.grad_buffer(x);
          std::vector<T> gh(d);
          for (std::size_t r = 0; r < n; ++r) {
            T mean_gh = 0, mean_ghx = 0;
            for (std::size_t j = 0; j < d; ++j) {
              gh[j] = g[r * d + j] * gv[j];
              mean_gh += gh[j];
              mean_ghx += gh[j] * (*xhat)[r * d + j];
            }
            mean_gh /= static_cast<T>(d);
            mean_ghx /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
              gx[r * d + j] +=
                  (*rstd)[r] * (gh[j] - mean_gh - (*xhat)[r * d + j] * mean_ghx);
            }
          }
        }
      });
}

template <typename T>
Var causal_attention(BasicTape<T>& tape, Var q, Var k, Var v,
                     std::span<const Segment> segments, std::size_t n_heads) {
  const auto& qv = tape.value(q);
  const auto& kv = tape.value(k);
  const auto& vv = tape.value(v);
  require_rank2(qv.shape(), "causal_attention");
  require_same_shape(qv.shape(), kv.shape(), "causal_attention");
  require_same_shape(qv.shape(), vv.shape(), "causal_attention");
  const std::size_t width = qv.cols();
  if (n_heads == 0 || width % n_heads != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(width) +
                     " not divisible by heads " + std::to_string(n_heads));
  }
  for (const Segment& s : segments) {
    if (s.offset + s.length > qv.rows()) throw ShapeError("causal_attention: segment out of range");
  }
  const auto dh = static_cast<Eigen::Index>(width / n_heads);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  const auto qm = as_matrix(qv);
  const auto km = as_matrix(kv);
  const auto vm = as_matrix(vv);

  // Attention probabilities per (segment, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<RowMat<T>>>();
  probs->reserve(segments.size() * n_heads);
  BasicTensor<T> out(qv.shape());
  auto om = as_matrix(out);
  for (const Segment& s : segments) {
    const auto off = static_cast<Eigen::Index>(s.offset);
    const auto len = static_cast<Eigen::Index>(s.length);
    for (std::size_t h = 0; h < n_heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * dh;
      RowMat<T> p = (qm.block(off, col, len, dh) * km.block(off, col, len, dh).transpose()) *
                    inv_sqrt;
      for (Eigen::Index i = 0; i < len; ++i) {
        T mx = p(i, 0);
        for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, p(i, j));
        T z = 0;
        for (Eigen::Index j = 0; j <= i; ++j) z += (p(i, j) = std::exp(p(i, j) - mx));
        for (Eigen::Index j = 0; j <= i; ++j) p(i, j) /= z;
        for (Eigen::Index j = i + 1; j < len; ++j) p(i, j) = 0;
      }
      om.block(off, col, len, dh).noalias() = p * vm.block(off, col, len, dh);
      probs->push_back(std::move(p));
    }
  }

  std::vector<Segment> segs(segments.begin(), segments.end());
  return tape.record(
      std::move(out), {q, k, v},
      [q, k, v, segs = std::move(segs), probs, n_heads, dh, inv_sqrt](BasicTape<T>& t, Var o) {
        const auto g = as_matrix(t.grad(o));
        const auto qm = as_matrix(t.value(q));
        const auto km = as_matrix(t.value(k));
        const auto vm = as_matrix(t.value(v));
        const bool need_q = t.requires_grad(q);
        const bool need_k = t.requires_grad(k);
        const bool need_v = t.requires_grad(v);
        // Buffers are fetched only for inputs that need them.
        BasicTensor<T>* gq = need_q ? &t.grad_buffer(q) : nullptr;
        BasicTensor<T>* gk = need_k ? &t.grad_buffer(k) : nullptr;
        BasicTensor<T>* gv = need_v ? &t.grad_buffer(v) : nullptr;
        std::size_t pi = 0;
        for (const Segment& s : segs) {
          const auto off = static_cast<Eigen::Index>(s.offset);
          const auto len = static_cast<Eigen::Index>(s.length);
          for (std::size_t h = 0; h < n_heads; ++h, ++pi) {
            const auto col = static_cast<Eigen::Index>(h) * dh;
            const RowMat<T>& p = (*probs)[pi];
            const auto go = g.block(off, col, len, dh);
            if (need_v) as_matrix(*gv).block(off, col, len, dh).noalias() += p.transpose() * go;
            if (!need_q && !need_k) continue;
            RowMat<T> dp = go * vm.block(off, col, len, dh).transpose();
            for (Eigen::Index i = 0; i < len; ++i) {
              T dot = 0;
              for (Eigen::Index j = 0; j <= i; ++j) dot += dp(i, j) * p(i, j);
              for (Eigen::Index j = 0; j <= i; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * inv_sqrt;
              for (Eigen::Index j = i + 1; j < len; ++j) dp(i, j) = 0;
            }
            if (need_q) {
              as_matrix(*gq).block(off, col, len, dh).noalias() += dp * km.block(off, col, len, dh);
            }
            if (need_k) {
              as_matrix(*gk).block(off, col, len, dh).noalias() +=
                  dp.transpose() * qm.block(off, col, len, dh);
            }
          }
        }
      });
}

template <typename T>
Var log_softmax_nll(BasicTape<T>& tape, Var logits, std::span<const TokenId> targets,
                    std::span<const T> weights) {
  const auto& lv = tape.value(logits);
  require_rank2(lv.shape(), "log_softmax_nll");
  const std::size_t rows = lv.rows();
  const std::size_t vocab = lv.cols();
  if (targets.size() != rows || weights.size() != rows) {
    throw ShapeError("log_softmax_nll: " + std::to_string(rows) + " rows but " +
                     std::to_string(targets.size()) + " targets / " +
                     std::to_string(weights.size()) + " weights");
  }
  T loss = 0;
  std::vector<T> lse(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw std::out_of_range("log_softmax_nll: target " + std::to_string(targets[r]) +
                              " outside vocabulary of " + std::to_string(vocab));
    }
    lse[r] = log_sum_exp(lv.ptr() + r * vocab, vocab);
    loss += weights[r] * (lse[r] - lv(r, static_cast<std::size_t>(targets[r])));
  }
  std::vector<TokenId> tgt(targets.begin(), targets.end());
  std::vector<T> w(weights.begin(), weights.end());
  return tape.record(
      BasicTensor<T>::scalar(loss), {logits},
      [logits, tgt = std::move(tgt), w = std::move(w), lse = std::move(lse), vocab](
          BasicTape<T>& t, Var o) {
        const T g = t.grad(o)[0];
        const auto& lv = t.value(logits);
        auto& gl = t.grad_buffer(logits);
        for (std::size_t r = 0; r < tgt.size(); ++r) {
          const T scale_r = g * w[r];
          if (scale_r == T(0)) continue;
          const T* x = lv.ptr() + r * vocab;
          T* dst = gl.ptr() + r * vocab;
          for (std::size_t j = 0; j < vocab; ++j) dst[j] += scale_r * std::exp(x[j] - lse[r]);
          dst[tgt[r]] -= scale_r;
        }
      });
}

template <typename T>
Var log_softmax_nll(BasicTape<T>& tape, Var logits, std::span<const TokenId> targets) {
  const std::size_t rows = tape.value(logits).rows();
  std::vector<T> w(rows, rows ? T(1) / static_cast<T>(rows) : T(0));
  return log_softmax_nll(tape, logits, targets, std::span<const T>(w));
}

template <typename T>
Var kl_rows(BasicTape<T>& tape, Var p_logits, Var q_logits, std::span<const T> weights) {
  const auto& pv = tape.value(p_logits);
  const auto& qv = tape.value(q_logits);
  require_rank2(pv.shape(), "kl_rows");
  require_same_shape(pv.shape(), qv.shape(), "kl_rows");
  const std::size_t rows = pv.rows();
  const std::size_t vocab = pv.cols();
  if (weights.size() != rows) throw ShapeError("kl_rows: weight count differs from rows");

  // Per-row log P, log Q and KL, reused by the backward rule.
  auto log_p = std::make_shared<BasicTensor<T>>(pv.shape());
  auto log_q = std::make_shared<BasicTensor<T>>(pv.shape());
  auto row_kl = std::make_shared<std::vector<T>>(rows);
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T lp = log_sum_exp(pv.ptr() + r * vocab, vocab);
    const T lq = log_sum_exp(qv.ptr() + r * vocab, vocab);
    T kl = 0;
    for (std::size_t j = 0; j < vocab; ++j) {
      const std::size_t i = r * vocab + j;
      (*log_p)[i] = pv[i] - lp;
      (*log_q)[i] = qv[i] - lq;
      kl += std::exp((*log_p)[i]) * ((*log_p)[i] - (*log_q)[i]);
    }
    (*row_kl)[r] = kl;
    total += weights[r] * kl;
  }
  std::vector<T> w(weights.begin(), weights.end());
  return tape.record(
      BasicTensor<T>::scalar(total), {p_logits, q_logits},
      [p_logits, q_logits, log_p, log_q, row_kl, w = std::move(w), vocab](BasicTape<T>& t,
                                                                         Var o) {
        const T g = t.grad(o)[0];
        const bool need_p = t.requires_grad(p_logits);
        const bool need_q = t.requires_grad(q_logits);
        BasicTensor<T>* gp = need_p ? &t.grad_buffer(p_logits) : nullptr;
        BasicTensor<T>* gq = need_q ? &t.grad_buffer(q_logits) : nullptr;
        for (std::size_t r = 0; r < w.size(); ++r) {
          const T s = g * w[r];
          for (std::size_t j = 0; j < vocab; ++j) {
            const std::size_t i = r * vocab + j;
            const T p = std::exp((*log_p)[i]);
            if (need_p) (*gp)[i] += s * p * ((*log_p)[i] - (*log_q)[i] - (*row_kl)[r]);
            if (need_q) (*gq)[i] += s * (std::exp((*log_q)[i]) - p);
          }
        }
      });
}

template <typename T>
Var kl_rows(BasicTape<T>& tape, Var p_logits, Var q_logits) {
  const std::size_t rows = tape.value(p_logits).rows();
  std::vector<T> w(rows, rows ? T(1) / static_cast<T>(rows) : T(0));
  return kl_rows(tape, p_logits, q_logits, std::span<const T>(w));
}

#define CTXEDIT_INSTANTIATE_OPS(T)                                                       \
  template Var add<T>(BasicTape<T>&, Var, Var);                                          \
  template Var sub<T>(BasicTape<T>&, Var, Var);                                          \
  template Var mul<T>(BasicTape<T>&, Var, Var);                                          \
  template Var scale<T>(BasicTape<T>&, Var, T);                                         \
  template Var sum<T>(BasicTape<T>&, Var);                                               \
  template Var pick<T>(BasicTape<T>&, Var, std::size_t);                                 \
  template Var transpose<T>(BasicTape<T>&, Var);                                         \
  template Var gather_rows<T>(BasicTape<T>&, Var, std::span<const std::size_t>);         \
  template Var matmul<T>(BasicTape<T>&, Var, Var);                                       \
  template Var frobenius_sq<T>(BasicTape<T>&, Var);                                      \
  template Var row_softmax<T>(BasicTape<T>&, Var);                                       \
  template Var l2_normalize<T>(BasicTape<T>&, Var);                                      \
  template Var gelu<T>(BasicTape<T>&, Var);                                              \
  template Var layer_norm<T>(BasicTape<T>&, Var, Var, Var, T);                           \
  template Var causal_attention<T>(BasicTape<T>&, Var, Var, Var,                         \
                                   std::span<const Segment>, std::size_t);               \
  template Var log_softmax_nll<T>(BasicTape<T>&, Var, std::span<const TokenId>);         \
  template Var log_softmax_nll<T>(BasicTape<T>&, Var, std::span<const TokenId>,          \
                                  std::span<const T>);                                   \
  template Var kl_rows<T>(BasicTape<T>&, Var, Var);                                      \
  template Var kl_rows<T>(BasicTape<T>&, Var, Var, std::span<const T>);

CTXEDIT_INSTANTIATE_OPS(double)
CTXEDIT_INSTANTIATE_OPS(long double)

#undef CTXEDIT_INSTANTIATE_OPS

}  // namespace ctxedit
