#include "ctxedit/coin.hpp"

#include <algorithm>
#include <cmath>

#include "ctxedit/errors.hpp"

namespace ctxedit {
using nlohmann::json;

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMajor> view(const Tensor& t) {
  return {t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

const char* mode_name(MomentMode m) { return m == MomentMode::kSum ? "sum" : "mean"; }

MomentMode mode_from(const std::string& s) {
  if (s == "sum") return MomentMode::kSum;
  if (s == "mean") return MomentMode::kMean;
  throw ConfigError("unknown second-moment mode '" + s + "'");
}

void check_moment(const Shape& w, const Shape& w0, const SecondMoment& m) {
  if (w != w0 || w.size() != 2) {
    throw ShapeError("consistency_loss: W " + shape_str(w) + " vs W0 " + shape_str(w0));
  }
  if (m.matrix.rank() != 2 || m.matrix.rows() != w[0] || m.matrix.cols() != w[0]) {
    throw ShapeError("consistency_loss: moment " + shape_str(m.matrix.shape()) +
                     " does not match input dimension " + std::to_string(w[0]));
  }
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::kFT: return "FT";
    case Method::kCOIN: return "COIN";
    case Method::kCOINNoAlign: return "COIN_no_align";
    case Method::kCOINNoCons: return "COIN_no_cons";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  for (Method m : {Method::kFT, Method::kCOIN, Method::kCOINNoAlign, Method::kCOINNoCons}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown method '" + s + "'");
}

void CoinConfig::validate() const {
  if (!(alpha >= 0)) throw std::invalid_argument("alpha must be >= 0");
  if (!(beta >= 0)) throw std::invalid_argument("beta must be >= 0");
  if (k < 1) throw std::invalid_argument("k must be >= 1");
}

double CoinConfig::effective_alpha() const {
  return method == Method::kCOIN || method == Method::kCOINNoCons ? alpha : 0.0;
}

double CoinConfig::effective_beta() const {
  return method == Method::kCOIN || method == Method::kCOINNoAlign ? beta : 0.0;
}

void to_json(json& j, const CoinConfig& c) {
  j = json{{"alpha", c.alpha}, {"beta", c.beta}, {"k", c.k}, {"method", to_string(c.method)},
           {"detach_teacher", c.detach_teacher}, {"reverse_kl", c.reverse_kl}};
}

void from_json(const json& j, CoinConfig& c) {
  const CoinConfig d;
  c.alpha = j.value("alpha", d.alpha);
  c.beta = j.value("beta", d.beta);
  c.k = j.value("k", d.k);
  c.method = method_from_string(j.value("method", to_string(d.method)));
  c.detach_teacher = j.value("detach_teacher", d.detach_teacher);
  c.reverse_kl = j.value("reverse_kl", d.reverse_kl);
}

// --- Second moment ----------------------------------------------------------------

MomentAccumulator::MomentAccumulator(std::size_t dim)
    : sum_(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim))) {
  if (dim == 0) throw std::invalid_argument("MomentAccumulator: dimension must be >= 1");
}

void MomentAccumulator::add(const Tensor& keys) {
  if (keys.rank() != 2 || keys.cols() != static_cast<std::size_t>(sum_.rows())) {
    throw ShapeError("second moment: keys " + shape_str(keys.shape()) + " do not have " +
                     std::to_string(sum_.rows()) + " columns");
  }
  if (keys.rows() == 0) return;
  const auto k = view(keys);
  sum_.selfadjointView<Eigen::Lower>().rankUpdate(k.transpose());
  count_ += keys.rows();
}

void MomentAccumulator::merge(const MomentAccumulator& other) {
  if (other.sum_.rows() != sum_.rows()) throw ShapeError("second moment: merge dimension differs");
  sum_.triangularView<Eigen::Lower>() += other.sum_;
  count_ += other.count_;
}

SecondMoment MomentAccumulator::finish(MomentMode mode) const {
  if (count_ == 0) throw DegenerateInputError("second moment of zero keys");
  const std::size_t n = static_cast<std::size_t>(sum_.rows());
  Eigen::MatrixXd full = sum_.selfadjointView<Eigen::Lower>();
  if (mode == MomentMode::kMean) full /= static_cast<double>(count_);
  SecondMoment m;
  m.matrix = Tensor(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      m.matrix(i, j) = full(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  m.sample_count = count_;
  m.mode = mode;
  return m;
}

SecondMoment second_moment_from_corpus(const LMParams& params, EditTarget target,
                                       const std::vector<std::vector<TokenId>>& sequences,
                                       MomentMode mode, std::size_t max_keys,
                                       std::size_t batch_size) {
  MomentAccumulator acc(params.config.d_ff);
  for (std::size_t start = 0; start < sequences.size() && acc.count() < max_keys;
       start += batch_size) {
    const std::size_t end = std::min(sequences.size(), start + batch_size);
    std::vector<std::vector<TokenId>> chunk(sequences.begin() + static_cast<std::ptrdiff_t>(start),
                                            sequences.begin() + static_cast<std::ptrdiff_t>(end));
    Tensor keys = key_activations(params, SequenceBatch::from(chunk), target);
    const std::size_t room = max_keys - acc.count();
    if (keys.rows() > room) {
      Tensor head(Shape{room, keys.cols()});
      std::copy(keys.ptr(), keys.ptr() + room * keys.cols(), head.ptr());
      keys = std::move(head);
    }
    acc.add(keys);
  }
  SecondMoment m = acc.finish(mode);
  m.layer = target.layer;
  return m;
}

void save_second_moment(const SecondMoment& m, const std::filesystem::path& path) {
  json doc{{"format_version", kCheckpointFormat},
           {"sample_count", m.sample_count},
           {"mode", mode_name(m.mode)},
           {"layer", m.layer},
           {"matrices", json::array({json{{"name", "second_moment"},
                                          {"shape", m.matrix.shape()},
                                          {"data", std::vector<double>(m.matrix.data().begin(),
                                                                       m.matrix.data().end())}}})}};
  write_json_file(doc, path);
}

SecondMoment load_second_moment(const std::filesystem::path& path) {
  const json doc = read_json_file(path);
  try {
    SecondMoment m;
    const auto& entry = doc.at("matrices").at(0);
    m.matrix = Tensor(entry.at("shape").get<Shape>(), entry.at("data").get<std::vector<double>>());
    m.sample_count = doc.at("sample_count").get<std::size_t>();
    m.mode = mode_from(doc.at("mode").get<std::string>());
    m.layer = doc.value("layer", std::size_t{0});
    return m;
  } catch (const json::exception& e) {
    throw ConfigError("malformed second moment " + path.string() + ": " + e.what());
  }
}

// --- Consistency ------------------------------------------------------------------

template <typename T>
Var consistency_loss(BasicTape<T>& tape, Var w, const Tensor& w0, const SecondMoment& moment) {
  check_moment(tape.value(w).shape(), w0.shape(), moment);
  const Var delta = sub(tape, w, tape.constant(w0));
  return frobenius_sq(tape, matmul(tape, tape.constant(moment.matrix), delta));
}

double consistency_loss(const Tensor& w, const Tensor& w0, const SecondMoment& moment) {
  return consistency_forms(w, w0, moment).literal;
}

ConsistencyForms consistency_forms(const Tensor& w, const Tensor& w0, const SecondMoment& moment) {
  check_moment(w.shape(), w0.shape(), moment);
  const RowMajor delta = view(w) - view(w0);
  const auto c = view(moment.matrix);
  ConsistencyForms f;
  f.literal = (c * delta).squaredNorm();
  f.trace = (delta.transpose() * c * delta).trace();
  return f;
}

// --- Alignment --------------------------------------------------------------------

template <typename T>
Var align_loss(BasicTape<T>& tape, const ParamVars& pv, const LMConfig& config,
               const SequenceBatch& batch, const AlignOptions& opts,
               std::optional<Var> global_logits) {
  if (opts.k < 1) throw std::invalid_argument("align_loss: k must be >= 1");
  const std::size_t k = opts.k;
  // Positions whose window is shorter than the prefix; everywhere else the
  // local and global contexts coincide and the KL is exactly zero.
  std::vector<std::size_t> global_rows;
  std::vector<T> weights;
  SequenceBatch windows;
  std::vector<std::size_t> window_last;
  const T per_seq = T(1) / static_cast<T>(batch.size());
  for (const Segment& s : batch.segments) {
    if (s.length < 2) throw std::invalid_argument("align_loss: sequences need at least 2 tokens");
    const T w = per_seq / static_cast<T>(s.length - 1);
    for (std::size_t i = k; i < s.length; ++i) {
      global_rows.push_back(s.offset + i);
      weights.push_back(w);
      const std::size_t from = s.offset + i + 1 - k;
      windows.segments.push_back({windows.tokens.size(), k});
      windows.tokens.insert(windows.tokens.end(),
                            batch.tokens.begin() + static_cast<std::ptrdiff_t>(from),
                            batch.tokens.begin() + static_cast<std::ptrdiff_t>(s.offset + i + 1));
      window_last.push_back(windows.tokens.size() - 1);
    }
  }
  if (global_rows.empty()) return tape.constant(BasicTensor<T>::scalar(T(0)));

  Var global;
  if (global_logits) {
    global = gather_rows(tape, *global_logits, std::span<const std::size_t>(global_rows));
  } else {
    global = forward_logits(tape, pv, config, batch, std::span<const std::size_t>(global_rows));
  }
  if (opts.detach_teacher) global = tape.constant(tape.value(global));
  const Var local =
      forward_logits(tape, pv, config, windows, std::span<const std::size_t>(window_last));
  return opts.reverse_kl ? kl_rows(tape, local, global, std::span<const T>(weights))
                         : kl_rows(tape, global, local, std::span<const T>(weights));
}

double align_loss(const LMParams& params, const std::vector<TokenId>& tokens, std::size_t k) {
  Tape tape;
  const ParamVars pv = bind_params(tape, params, Trainable::kNone);
  AlignOptions opts;
  opts.k = k;
  return tape.value(align_loss(tape, pv, params.config, SequenceBatch::from({tokens}), opts))
      .item();
}

// --- Combined objective -----------------------------------------------------------

template <typename T>
CoinTerms coin_loss(BasicTape<T>& tape, const ParamVars& pv, const LMConfig& config,
                    EditTarget target, const Tensor& w0, const SequenceBatch& batch,
                    const CoinConfig& coin, const SecondMoment* moment) {
  coin.validate();
  const double alpha = coin.effective_alpha();
  const double beta = coin.effective_beta();
  CoinTerms terms;
  if (alpha == 0) {
    terms.nll = batch_nll(tape, pv, config, batch);
  } else {
    // One forward over the documents feeds both the NLL and the teacher side
    // of the alignment term.
    const Var logits = forward_logits(tape, pv, config, batch);
    std::vector<std::size_t> rows;
    std::vector<TokenId> targets;
    std::vector<T> weights;
    const T per_seq = T(1) / static_cast<T>(batch.size());
    for (const Segment& s : batch.segments) {
      if (s.length < 2) throw std::invalid_argument("nll: sequences need at least 2 tokens");
      const T w = per_seq / static_cast<T>(s.length - 1);
      for (std::size_t i = 0; i + 1 < s.length; ++i) {
        rows.push_back(s.offset + i);
        targets.push_back(batch.tokens[s.offset + i + 1]);
        weights.push_back(w);
      }
    }
    terms.nll = log_softmax_nll(tape, gather_rows(tape, logits, std::span<const std::size_t>(rows)),
                                std::span<const TokenId>(targets), std::span<const T>(weights));
    AlignOptions opts{coin.k, coin.detach_teacher, coin.reverse_kl};
    terms.align = align_loss(tape, pv, config, batch, opts, logits);
  }
  terms.total = terms.nll;
  if (terms.align) terms.total = add(tape, terms.total, scale(tape, *terms.align, T(alpha)));
  if (beta != 0) {
    if (moment == nullptr) throw std::invalid_argument("coin_loss: beta > 0 needs a second moment");
    if (target.layer >= pv.blocks.size()) throw std::out_of_range("edit target layer out of range");
    terms.cons = consistency_loss(tape, pv.blocks[target.layer].w_down, w0, *moment);
    terms.total = add(tape, terms.total, scale(tape, *terms.cons, T(beta)));
  }
  return terms;
}

CoinBreakdown breakdown(const Tape& tape, const CoinTerms& terms) {
  CoinBreakdown b;
  b.total = tape.value(terms.total).item();
  b.nll = tape.value(terms.nll).item();
  if (terms.align) b.align = tape.value(*terms.align).item();
  if (terms.cons) b.cons = tape.value(*terms.cons).item();
  return b;
}

template Var consistency_loss<double>(Tape&, Var, const Tensor&, const SecondMoment&);
template Var consistency_loss<long double>(BasicTape<long double>&, Var, const Tensor&,
                                           const SecondMoment&);
template Var align_loss<double>(Tape&, const ParamVars&, const LMConfig&, const SequenceBatch&,
                                const AlignOptions&, std::optional<Var>);
template Var align_loss<long double>(BasicTape<long double>&, const ParamVars&, const LMConfig&,
                                     const SequenceBatch&, const AlignOptions&,
                                     std::optional<Var>);
template CoinTerms coin_loss<double>(Tape&, const ParamVars&, const LMConfig&, EditTarget,
                                     const Tensor&, const SequenceBatch&, const CoinConfig&,
                                     const SecondMoment*);
template CoinTerms coin_loss<long double>(BasicTape<long double>&, const ParamVars&,
                                          const LMConfig&, EditTarget, const Tensor&,
                                          const SequenceBatch&, const CoinConfig&,
                                          const SecondMoment*);

}  // namespace ctxedit
