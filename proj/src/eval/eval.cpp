#include "ctxedit/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "ctxedit/edit.hpp"
#include "ctxedit/errors.hpp"

namespace ctxedit {

std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

RougeScore rouge_l(std::span<const TokenId> candidate, std::span<const TokenId> reference) {
  if (reference.empty()) throw std::invalid_argument("rouge_l: empty reference");
  if (candidate.empty()) return {};
  const double l = static_cast<double>(lcs_length(candidate, reference));
  RougeScore s;
  s.precision = l / static_cast<double>(candidate.size());
  s.recall = l / static_cast<double>(reference.size());
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

std::vector<TokenId> greedy_decode(const LMParams& params, const std::vector<TokenId>& prompt,
                                   std::size_t budget, std::optional<TokenId> stop) {
  std::vector<TokenId> seq = prompt;
  std::vector<TokenId> out;
  while (out.size() < budget && seq.size() < params.config.max_seq_len) {
    const auto lp = next_token_logprobs(params, seq);
    const auto best = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    if (stop && best == *stop) break;
    out.push_back(best);
    seq.push_back(best);
  }
  return out;
}

bool exact_match(std::span<const TokenId> decoded, std::span<const TokenId> gold) {
  return decoded.size() >= gold.size() && std::equal(gold.begin(), gold.end(), decoded.begin());
}

double answer_logprob(const LMParams& params, const std::vector<TokenId>& query,
                      const std::vector<TokenId>& answer) {
  if (query.empty()) throw std::invalid_argument("answer_logprob: empty query");
  if (answer.empty()) return 0.0;
  std::vector<TokenId> seq = query;
  seq.insert(seq.end(), answer.begin(), answer.end());
  const Tensor logits = forward_logits(params, SequenceBatch::from({seq}));
  const std::size_t v = logits.cols();
  double total = 0;
  for (std::size_t i = 0; i < answer.size(); ++i) {
    const std::size_t row = query.size() - 1 + i;
    const double* l = logits.ptr() + row * v;
    const double mx = *std::max_element(l, l + v);
    double z = 0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(l[j] - mx);
    total += l[static_cast<std::size_t>(answer[i])] - mx - std::log(z);
  }
  return total;
}

std::string to_string(QueryFormat f) { return f == QueryFormat::kQA ? "qa" : "completion"; }

QueryFormat format_from_string(const std::string& s) {
  if (s == "completion") return QueryFormat::kCompletion;
  if (s == "qa") return QueryFormat::kQA;
  throw ConfigError("unknown query format '" + s + "'");
}

std::vector<QueryResult> evaluate_queries(const LMParams& params, const EditDocument& doc,
                                          QueryFormat format, std::size_t budget) {
  const Vocabulary& vocab = inventory().vocab;
  const TokenId stop = vocab.id(".");
  std::vector<QueryResult> out;
  for (const auto& f : doc.facts) {
    const auto query = encode(format == QueryFormat::kQA ? f.qa_query : f.completion_query);
    const auto gold = vocab.tokenize(f.answer);
    const auto decoded = greedy_decode(params, query, budget, stop);
    QueryResult r;
    r.doc_id = doc.doc_id;
    r.position = f.position;
    r.rouge = rouge_l(decoded, gold);
    r.em = exact_match(decoded, gold);
    r.answer_logprob = answer_logprob(params, query, gold);
    // Model ids past the word list (V is padded) print as <id:N>.
    std::vector<std::string> words;
    for (TokenId t : decoded) {
      words.push_back(static_cast<std::size_t>(t) < vocab.size() ? vocab.word(t)
                                                                 : "<id:" + std::to_string(t) + ">");
    }
    r.decoded = join_words(words);
    out.push_back(std::move(r));
  }
  return out;
}

PositionalReport aggregate_positions(const std::vector<QueryResult>& results, QueryFormat format) {
  std::map<std::size_t, PositionMetrics> acc;
  for (const auto& r : results) {
    auto& m = acc[r.position];
    m.position = r.position;
    ++m.count;
    m.rouge_p += r.rouge.precision;
    m.rouge_r += r.rouge.recall;
    m.rouge_f1 += r.rouge.f1;
    m.em += r.em ? 1.0 : 0.0;
    m.answer_logprob += r.answer_logprob;
  }
  PositionalReport rep;
  rep.format = format;
  for (auto& [pos, m] : acc) {
    const double n = static_cast<double>(m.count);
    m.rouge_p /= n;
    m.rouge_r /= n;
    m.rouge_f1 /= n;
    m.em /= n;
    m.answer_logprob /= n;
    rep.positions.push_back(m);
  }
  return rep;
}

PositionalReport positional_eval(const LMParams& params, const std::vector<EditDocument>& docs,
                                 QueryFormat format, std::size_t budget) {
  std::vector<QueryResult> all;
  for (const auto& d : docs) {
    auto r = evaluate_queries(params, d, format, budget);
    all.insert(all.end(), r.begin(), r.end());
  }
  return aggregate_positions(all, format);
}

std::vector<RestorationRow> restoration_gap(const LMParams& params,
                                            const std::vector<Probe>& probes) {
  const Vocabulary& vocab = inventory().vocab;
  std::vector<RestorationRow> out;
  for (const auto& p : probes) {
    const auto answer = vocab.tokenize(p.answer);
    RestorationRow r;
    r.position = p.position;
    r.logprob_without = answer_logprob(params, encode(p.base_query), answer);
    // An empty prepend is the same query; reuse the value rather than recompute.
    r.logprob_with = p.prepended_query == p.base_query
                         ? r.logprob_without
                         : answer_logprob(params, encode(p.prepended_query), answer);
    r.gap = r.logprob_with - r.logprob_without;
    out.push_back(r);
  }
  return out;
}

std::vector<RestorationRow> aggregate_restoration(const std::vector<RestorationRow>& rows) {
  std::map<std::size_t, std::pair<RestorationRow, std::size_t>> acc;
  for (const auto& r : rows) {
    auto& [sum, n] = acc[r.position];
    sum.position = r.position;
    sum.logprob_without += r.logprob_without;
    sum.logprob_with += r.logprob_with;
    sum.gap += r.gap;
    ++n;
  }
  std::vector<RestorationRow> out;
  for (auto& [pos, e] : acc) {
    auto [sum, n] = e;
    const double d = static_cast<double>(n);
    sum.logprob_without /= d;
    sum.logprob_with /= d;
    sum.gap /= d;
    out.push_back(sum);
  }
  return out;
}

namespace {

double metric_of(const PositionMetrics& m, Metric metric) {
  switch (metric) {
    case Metric::kF1: return m.rouge_f1;
    case Metric::kAnswerLogprob: return m.answer_logprob;
    case Metric::kEM: return m.em;
  }
  return 0;
}

}  // namespace

RelianceStats reliance_drop(const PositionalReport& report, Metric metric) {
  if (report.positions.size() < 2 || report.positions.front().position != 1) {
    throw std::invalid_argument("reliance_drop: report must cover position 1 and a later one");
  }
  RelianceStats s;
  s.first = metric_of(report.positions.front(), metric);
  s.last = metric_of(report.positions.back(), metric);
  s.drop_abs = s.first - s.last;
  if (s.first > 0) s.drop_rel = s.drop_abs / s.first;
  return s;
}

std::optional<double> mitigation_ratio(const RelianceStats& coin, const RelianceStats& ft) {
  if (!coin.drop_rel || !ft.drop_rel || *ft.drop_rel == 0) return std::nullopt;
  return 1.0 - *coin.drop_rel / *ft.drop_rel;
}

// --- Statistics -------------------------------------------------------------------

double binomial_upper_tail(std::size_t n, std::size_t k) {
  if (k == 0) return 1.0;
  if (k > n) return 0.0;
  // C(n, i) built incrementally; integers stay exact far beyond any seed count.
  long double c = 1, total = 0;
  for (std::size_t i = 0; i <= n; ++i) {
    if (i >= k) total += c;
    c = c * static_cast<long double>(n - i) / static_cast<long double>(i + 1);
  }
  return std::min(1.0, static_cast<double>(std::ldexp(total, -static_cast<int>(n))));
}

SignTest paired_sign_test(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("paired_sign_test: unequal lengths");
  SignTest t;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > y[i]) {
      ++t.wins;
    } else if (x[i] < y[i]) {
      ++t.losses;
    } else {
      ++t.ties;
    }
  }
  t.p_value = binomial_upper_tail(t.wins + t.losses, t.wins);
  return t;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("spearman: need two equal-length samples of size >= 2");
  }
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::string position_bin(std::size_t position) {
  if (position == 0) throw std::invalid_argument("position_bin: positions start at 1");
  return position <= 6 ? std::to_string(position) : ">6";
}

// --- CSV --------------------------------------------------------------------------

std::string format_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

namespace {

std::ofstream open_csv(const std::filesystem::path& path, const char* header) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << header << '\n';
  return out;
}

}  // namespace

void write_positional_csv(const std::vector<PositionalCsvRow>& rows,
                          const std::filesystem::path& path) {
  auto out = open_csv(path, kPositionalHeader);
  for (const auto& r : rows) {
    out << r.seed << ',' << r.method << ',' << r.format << ',' << r.m.position << ','
        << format_double(r.m.rouge_p) << ',' << format_double(r.m.rouge_r) << ','
        << format_double(r.m.rouge_f1) << ',' << format_double(r.m.em) << ','
        << format_double(r.m.answer_logprob) << '\n';
  }
}

void write_restoration_csv(const std::vector<RestorationCsvRow>& rows,
                           const std::filesystem::path& path) {
  auto out = open_csv(path, kRestorationHeader);
  for (const auto& r : rows) {
    out << r.seed << ',' << r.method << ',' << r.r.position << ','
        << format_double(r.r.logprob_without) << ',' << format_double(r.r.logprob_with) << ','
        << format_double(r.r.gap) << '\n';
  }
}

void write_locality_csv(const std::vector<LocalityCsvRow>& rows, const std::filesystem::path& path) {
  auto out = open_csv(path, kLocalityHeader);
  for (const auto& r : rows) {
    out << r.seed << ',' << r.method << ',' << format_double(r.ppl_pre) << ','
        << format_double(r.ppl_post) << '\n';
  }
}

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw ConfigError("CSV schema error: missing column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
    return cells;
  };
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("CSV schema error: " + path.string() + " is empty");
  t.header = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != t.header.size()) {
      throw ConfigError("CSV schema error: row width differs from header in " + path.string());
    }
    t.rows.push_back(std::move(cells));
  }
  return t;
}

}  // namespace ctxedit
