#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <type_traits>
#include <vector>

#include "ctxedit/tensor.hpp"

namespace ctxedit {

// Handle to a value recorded on a tape. Only meaningful together with the
// tape that produced it.
struct Var {
  static constexpr std::uint32_t kInvalid = std::numeric_limits<std::uint32_t>::max();
  std::uint32_t id = kInvalid;
  bool valid() const noexcept { return id != kInvalid; }
};

// Reverse-mode tape. Entries are appended in evaluation order, so every
// entry's inputs precede it and a single reverse sweep visits each entry once.
// Leaves keep accumulating gradient across backward() calls until zero_grad().
template <typename T>
class BasicTape {
 public:
  using TensorT = BasicTensor<T>;
  using BackwardFn = std::function<void(BasicTape&, Var out)>;

  Var leaf(TensorT value, bool requires_grad = false);

  template <typename U>
    requires(!std::is_same_v<U, T>)
  Var leaf(const BasicTensor<U>& value, bool requires_grad = false) {
    return leaf(value.template cast<T>(), requires_grad);
  }

  Var constant(TensorT value) { return leaf(std::move(value), false); }

  template <typename U>
    requires(!std::is_same_v<U, T>)
  Var constant(const BasicTensor<U>& value) {
    return leaf(value.template cast<T>(), false);
  }

  // Appends an operation result. The backward rule is kept only when some
  // input requires grad.
  Var record(TensorT value, std::initializer_list<Var> inputs, BackwardFn fn);

  const TensorT& value(Var v) const { return node(v).value; }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  bool is_leaf(Var v) const { return node(v).leaf; }
  bool has_grad(Var v) const { return node(v).has_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient buffer of `v` (zeros when nothing was accumulated).
  const TensorT& grad(Var v);
  // Mutable accumulator used by backward rules; allocated on first use.
  TensorT& grad_buffer(Var v);

  void backward(Var loss);
  void zero_grad();

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    bool requires_grad = false;
    bool leaf = true;
    bool has_grad = false;
    BackwardFn backward;
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  std::vector<Node> nodes_;
};

using Tape = BasicTape<double>;

// Contiguous row range [offset, offset + length) of a flattened batch that
// forms one causally masked sequence.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

// --- Elementwise and structural ops -----------------------------------------

template <typename T> Var add(BasicTape<T>& tape, Var a, Var b);
template <typename T> Var sub(BasicTape<T>& tape, Var a, Var b);
template <typename T> Var mul(BasicTape<T>& tape, Var a, Var b);
template <typename T> Var scale(BasicTape<T>& tape, Var a, std::type_identity_t<T> factor);
template <typename T> Var sum(BasicTape<T>& tape, Var a);
template <typename T> Var pick(BasicTape<T>& tape, Var a, std::size_t index);
template <typename T> Var transpose(BasicTape<T>& tape, Var a);
template <typename T>
Var gather_rows(BasicTape<T>& tape, Var table, std::span<const std::size_t> rows);

// --- Linear algebra ---------------------------------------------------------

template <typename T> Var matmul(BasicTape<T>& tape, Var a, Var b);
template <typename T> Var frobenius_sq(BasicTape<T>& tape, Var a);

// --- Normalizations and nonlinearities --------------------------------------

template <typename T> Var row_softmax(BasicTape<T>& tape, Var a);
// v / ||v||_2 over all elements; zero input raises DegenerateInputError.
template <typename T> Var l2_normalize(BasicTape<T>& tape, Var v);
template <typename T> Var gelu(BasicTape<T>& tape, Var a);
template <typename T>
Var layer_norm(BasicTape<T>& tape, Var x, Var gain, Var bias,
               std::type_identity_t<T> eps = T(1e-5));

// Multi-head scaled dot-product attention, causal within each segment.
template <typename T>
Var causal_attention(BasicTape<T>& tape, Var q, Var k, Var v,
                     std::span<const Segment> segments, std::size_t n_heads);

// --- Losses -----------------------------------------------------------------

// Mean over rows of -log softmax(logits)[target].
template <typename T>
Var log_softmax_nll(BasicTape<T>& tape, Var logits, std::span<const TokenId> targets);
// Sum over rows of weight[row] * -log softmax(logits)[target].
template <typename T>
Var log_softmax_nll(BasicTape<T>& tape, Var logits, std::span<const TokenId> targets,
                    std::span<const T> weights);

// Mean over rows of KL(softmax(p) || softmax(q)); gradient reaches both sides.
template <typename T> Var kl_rows(BasicTape<T>& tape, Var p_logits, Var q_logits);
template <typename T>
Var kl_rows(BasicTape<T>& tape, Var p_logits, Var q_logits, std::span<const T> weights);

// --- Gradient checking --------------------------------------------------------

// Compares reverse-mode gradients of a scalar function against central finite
// differences. `f` is invoked as f(tape, x) for both a double tape (the path
// under test) and a long double tape (the difference oracle, using the
// fourth-order central stencil with step eps). Returns the maximum over
// coordinates of |g_fd - g_ad| / max(1e-12, |g_fd| + |g_ad|).
template <typename F>
double grad_check(F&& f, const Tensor& x, double eps) {
  Tape tape;
  const Var xv = tape.leaf(x, true);
  const Var y = f(tape, xv);
  if (tape.value(y).size() != 1) throw ShapeError("grad_check needs a scalar function");
  tape.backward(y);
  const Tensor analytic = tape.grad(xv);

  using Ext = long double;
  const BasicTensor<Ext> base = x.cast<Ext>();
  auto eval = [&](std::size_t i, Ext offset) {
    BasicTensor<Ext> shifted = base;
    shifted[i] += offset;
    BasicTape<Ext> ext_tape;
    const Var xe = ext_tape.leaf(std::move(shifted), false);
    return ext_tape.value(f(ext_tape, xe)).item();
  };

  const Ext h = static_cast<Ext>(eps);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    // Differences first, so coordinates the function ignores give exactly 0.
    const Ext near = eval(i, h) - eval(i, -h);
    const Ext far = eval(i, 2 * h) - eval(i, -2 * h);
    const Ext numeric = (8 * near - far) / (12 * h);
    const double fd = static_cast<double>(numeric);
    const double ad = analytic[i];
    const double err = std::abs(fd - ad) / std::max(1e-12, std::abs(fd) + std::abs(ad));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace ctxedit
