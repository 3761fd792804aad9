#include "ctxedit/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "ctxedit/errors.hpp"
#include "ctxedit/rng.hpp"
#include "ctxedit/theorem.hpp"

namespace ctxedit {

namespace fs = std::filesystem;
using json = nlohmann::json;

// --- Config -----------------------------------------------------------------------

namespace {

json theorem_to_json(const TheoremSweep& t) {
  return {{"M", t.M},         {"delta", t.delta}, {"N", t.N},
          {"eta_fraction", t.eta_fraction}, {"T", t.T}, {"seeds", t.seeds},
          {"grad_sources", t.grad_sources}};
}

TheoremSweep theorem_from_json(const json& j) {
  TheoremSweep t;
  t.M = j.at("M").get<std::vector<std::size_t>>();
  t.delta = j.at("delta").get<std::vector<double>>();
  t.N = j.at("N").get<std::vector<std::size_t>>();
  t.eta_fraction = j.at("eta_fraction").get<std::vector<double>>();
  t.T = j.at("T").get<std::size_t>();
  t.seeds = j.at("seeds").get<std::size_t>();
  t.grad_sources = j.at("grad_sources").get<std::vector<std::string>>();
  return t;
}

// Keys of `patch` must exist in `base`, one level into object sections.
void check_keys(const json& base, const json& patch) {
  if (!patch.is_object()) throw ConfigError("config root must be a JSON object");
  for (const auto& [key, value] : patch.items()) {
    if (!base.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    if (value.is_null()) throw ConfigError("config key '" + key + "' is null");
    const json& b = base.at(key);
    if (b.is_object() && key != "sweep") {
      if (!value.is_object()) throw ConfigError("config section '" + key + "' must be an object");
      for (const auto& [sub, v] : value.items()) {
        if (!b.contains(sub)) throw ConfigError("unknown config key '" + key + "." + sub + "'");
        if (v.is_null()) throw ConfigError("config key '" + key + "." + sub + "' is null");
      }
    }
  }
}

}  // namespace

void to_json(json& j, const ExperimentConfig& c) {
  json formats = json::array();
  for (auto f : c.formats) formats.push_back(to_string(f));
  json sweep = json::object();
  for (const auto& [axis, values] : c.sweep) sweep[axis] = values;
  j = json{{"seed", c.seed},
           {"lm", c.lm},
           {"corpus",
            {{"n_docs", c.corpus.n_docs},
             {"facts_per_doc", c.corpus.facts_per_doc},
             {"n_subjects", c.corpus.n_subjects},
             {"qa_fraction", c.corpus.qa_fraction},
             {"holdout_docs", c.holdout_docs},
             {"edit_facts", c.edit_facts},
             {"docs_per_seed", c.docs_per_seed},
             {"n_variants", c.n_variants}}},
           {"pretrain", c.pretrain},
           {"moment",
            {{"max_keys", c.moment_max_keys},
             {"mode", c.moment_mode == MomentMode::kSum ? "sum" : "mean"}}},
           {"coin", c.coin},
           {"train", c.train},
           {"eval", {{"decode_budget", c.decode_budget}, {"formats", formats}}},
           {"methods", c.methods},
           {"seeds", c.seeds},
           {"sweep", sweep},
           {"theorem", theorem_to_json(c.theorem)}};
}

void from_json(const json& patch, ExperimentConfig& c) {
  json j = ExperimentConfig{};
  check_keys(j, patch);
  for (const auto& [key, value] : patch.items()) {
    if (j.at(key).is_object() && key != "sweep") {
      for (const auto& [sub, v] : value.items()) j[key][sub] = v;
    } else {
      j[key] = value;
    }
  }
  try {
    ExperimentConfig out;
    out.seed = j.at("seed").get<std::uint64_t>();
    out.lm = j.at("lm").get<LMConfig>();
    const json& corpus = j.at("corpus");
    out.corpus.n_docs = corpus.at("n_docs").get<std::size_t>();
    out.corpus.facts_per_doc = corpus.at("facts_per_doc").get<std::size_t>();
    out.corpus.n_subjects = corpus.at("n_subjects").get<std::size_t>();
    out.corpus.qa_fraction = corpus.at("qa_fraction").get<double>();
    out.holdout_docs = corpus.at("holdout_docs").get<std::size_t>();
    out.edit_facts = corpus.at("edit_facts").get<std::size_t>();
    out.docs_per_seed = corpus.at("docs_per_seed").get<std::size_t>();
    out.n_variants = corpus.at("n_variants").get<std::size_t>();
    out.pretrain = j.at("pretrain").get<PretrainConfig>();
    out.moment_max_keys = j.at("moment").at("max_keys").get<std::size_t>();
    const auto mode = j.at("moment").at("mode").get<std::string>();
    if (mode != "sum" && mode != "mean") throw ConfigError("moment.mode must be 'sum' or 'mean'");
    out.moment_mode = mode == "sum" ? MomentMode::kSum : MomentMode::kMean;
    out.coin = j.at("coin").get<CoinConfig>();
    out.train = j.at("train").get<TrainConfig>();
    out.decode_budget = j.at("eval").at("decode_budget").get<std::size_t>();
    out.formats.clear();
    for (const auto& f : j.at("eval").at("formats")) out.formats.push_back(format_from_string(f));
    out.methods = j.at("methods").get<std::vector<std::string>>();
    out.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    out.sweep = j.at("sweep").get<std::map<std::string, std::vector<double>>>();
    out.theorem = theorem_from_json(j.at("theorem"));
    out.threads = c.threads;
    c = std::move(out);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  std::ifstream in(path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  ExperimentConfig c;
  from_json(j, c);
  return c;
}

void ExperimentConfig::validate() const {
  try {
    lm.validate();
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (inventory().vocab.size() > lm.vocab_size) {
    throw ConfigError("lm.vocab_size " + std::to_string(lm.vocab_size) +
                      " is smaller than the corpus vocabulary (" +
                      std::to_string(inventory().vocab.size()) + ")");
  }
  if (seeds.empty()) throw ConfigError("seed list is empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("seed list has duplicates");
  }
  if (methods.empty()) throw ConfigError("method list is empty");
  for (const auto& m : methods) method_spec(m);
  if (std::set<std::string>(methods.begin(), methods.end()).size() != methods.size()) {
    throw ConfigError("method list has duplicates");
  }
  if (formats.empty()) throw ConfigError("eval.formats is empty");
  if (edit_facts < 2 || edit_facts > 12) throw ConfigError("corpus.edit_facts must be in [2, 12]");
  if (docs_per_seed == 0) throw ConfigError("corpus.docs_per_seed must be positive");
  if (holdout_docs == 0) throw ConfigError("corpus.holdout_docs must be positive");
  if (decode_budget == 0) throw ConfigError("eval.decode_budget must be positive");
  if (coin.alpha < 0 || coin.beta < 0) throw ConfigError("coin.alpha and coin.beta must be >= 0");
  if (coin.k == 0) throw ConfigError("coin.k must be positive");
  if (moment_max_keys == 0) throw ConfigError("moment.max_keys must be positive");
  for (const auto& [axis, values] : sweep) {
    static const std::set<std::string> axes{"alpha", "beta", "k", "model_scale", "train_steps"};
    if (!axes.count(axis)) throw ConfigError("unknown sweep axis '" + axis + "'");
  }
  for (const auto& g : theorem.grad_sources) {
    try {
      theorem::grad_source_from_string(g);
    } catch (const std::exception&) {
      throw ConfigError("unknown grad source '" + g + "'");
    }
  }
}

void ExperimentConfig::derive_seeds() {
  lm.seed = derive_seed(seed, "lm-init");
  pretrain.seed = derive_seed(seed, "pretrain-order");
  train.seed = derive_seed(seed, "edit-train");
}

MethodSpec method_spec(const std::string& name) {
  if (name == "split") return {name, Variant::kSplit, Method::kFT};
  if (name == "paraphrase") return {name, Variant::kParaphrase, Method::kFT};
  Method m;
  try {
    m = method_from_string(name);
  } catch (const std::exception&) {
    throw ConfigError("unknown method '" + name + "'");
  }
  return {name, m == Method::kFT ? Variant::kFT : Variant::kCOIN, m};
}

// --- Paths and data ---------------------------------------------------------------

fs::path Paths::docs(std::uint64_t seed) const {
  return root / "docs" / ("seed_" + std::to_string(seed) + ".jsonl");
}

fs::path Paths::edit_dir(const std::string& method, std::uint64_t seed) const {
  return root / "edits" / method / ("seed_" + std::to_string(seed));
}

namespace {

std::vector<std::vector<TokenId>> tokenize_docs(const std::vector<PretrainDoc>& docs) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(encode(d.text));
  return out;
}

fs::path doc_checkpoint(const fs::path& dir, std::size_t j) {
  return dir / ("doc_" + std::to_string(j) + ".json");
}

fs::path doc_report(const fs::path& dir, std::size_t j) {
  return dir / ("doc_" + std::to_string(j) + "_report.json");
}

void require(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) {
    throw MissingArtifactError("missing " + what + ": " + p.string() + " (run the earlier stage first)");
  }
}

void log_line(const Logger& log, const std::string& s) {
  if (log) log(s);
}

}  // namespace

PretrainData pretrain_data(const ExperimentConfig& cfg) {
  const std::uint64_t world = derive_seed(cfg.seed, "world");
  PretrainCorpusConfig holdout = cfg.corpus;
  holdout.n_docs = cfg.holdout_docs;
  return {tokenize_docs(gen_pretrain_corpus(cfg.corpus, world, derive_seed(cfg.seed, "pretrain-sample"))),
          tokenize_docs(gen_pretrain_corpus(holdout, world, derive_seed(cfg.seed, "holdout-sample")))};
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        {
          std::lock_guard lock(mu);
          if (error) return;
        }
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// --- Pretrain ---------------------------------------------------------------------

void run_pretrain_stage(const ExperimentConfig& cfg, const Paths& paths, const Logger& log) {
  cfg.validate();
  fs::create_directories(paths.base);
  const auto data = pretrain_data(cfg);
  log_line(log, "pretrain: " + std::to_string(data.train.size()) + " docs, holdout " +
                    std::to_string(data.holdout.size()));
  LMParams params = init_params(cfg.lm, cfg.lm.seed);
  const PretrainResult result =
      pretrain(params, data.train, data.holdout, cfg.pretrain, [&](const EpochStats& e) {
        std::ostringstream s;
        s << "pretrain: epoch " << e.epoch << " loss " << e.train_loss << " holdout ppl "
          << e.holdout_ppl;
        log_line(log, s.str());
      });
  save_checkpoint(params, paths.checkpoint());

  const EditTarget target = EditTarget::default_for(cfg.lm);
  const SecondMoment moment = second_moment_from_corpus(params, target, data.train, cfg.moment_mode,
                                                        cfg.moment_max_keys);
  save_second_moment(moment, paths.moment());

  json history = json::array();
  for (const auto& e : result.history) {
    history.push_back({{"epoch", e.epoch},
                       {"train_loss", std::isfinite(e.train_loss) ? json(e.train_loss) : json()},
                       {"holdout_ppl", e.holdout_ppl}});
  }
  write_json_file({{"config", cfg},
                   {"history", history},
                   {"stop_reason", result.stop_reason},
                   {"moment", {{"layer", target.layer}, {"sample_count", moment.sample_count}}}},
                  paths.pretrain_report());
  log_line(log, "pretrain: wrote " + paths.checkpoint().string() + " and " + paths.moment().string());
}

// --- Edit -------------------------------------------------------------------------

std::vector<EditDocument> counterfactual_documents(const ExperimentConfig& cfg,
                                                   const LMParams& pretrained, std::uint64_t seed) {
  constexpr std::size_t kMaxAttempts = 100;
  const TokenId stop = inventory().vocab.id(".");
  const std::uint64_t stream = derive_seed(cfg.seed, "edit-doc", seed);
  std::vector<EditDocument> docs;
  for (std::size_t j = 0; j < cfg.docs_per_seed; ++j) {
    bool found = false;
    for (std::size_t a = 0; a < kMaxAttempts && !found; ++a) {
      EditDocument doc = gen_edit_document(cfg.edit_facts, derive_seed(stream, "doc", j * kMaxAttempts + a));
      bool known = false;
      for (const auto& f : doc.facts) {
        const auto gold = inventory().vocab.tokenize(f.answer);
        for (const auto& q : {f.completion_query, f.qa_query}) {
          const auto out = greedy_decode(pretrained, encode(q), cfg.decode_budget, stop);
          if (exact_match(out, gold)) known = true;
        }
        if (known) break;
      }
      if (!known) {
        docs.push_back(std::move(doc));
        found = true;
      }
    }
    if (!found) throw GenerationError("no counterfactual document after 100 attempts");
  }
  return docs;
}

void run_edit_stage(const ExperimentConfig& cfg, const Paths& paths, const Logger& log) {
  cfg.validate();
  require(paths.checkpoint(), "pretrained checkpoint");
  const LMParams pre = load_checkpoint(paths.checkpoint());
  if (pre.config.d_model != cfg.lm.d_model || pre.config.n_layers != cfg.lm.n_layers ||
      pre.config.d_ff != cfg.lm.d_ff || pre.config.vocab_size != cfg.lm.vocab_size) {
    throw ConfigError("pretrained checkpoint does not match the lm section of the config");
  }
  const EditTarget target = EditTarget::default_for(pre.config);

  bool need_moment = false;
  for (const auto& m : cfg.methods) {
    CoinConfig c = cfg.coin;
    c.method = method_spec(m).objective;
    if (c.effective_beta() > 0) need_moment = true;
  }
  std::optional<SecondMoment> moment;
  if (need_moment) {
    require(paths.moment(), "second-moment file");
    moment = load_second_moment(paths.moment());
  }

  std::vector<std::vector<EditDocument>> docs(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), cfg.threads, [&](std::size_t i) {
    docs[i] = counterfactual_documents(cfg, pre, cfg.seeds[i]);
    fs::create_directories(paths.docs(cfg.seeds[i]).parent_path());
    write_jsonl(docs[i], paths.docs(cfg.seeds[i]));
  });

  struct Job {
    std::size_t seed_index, method_index, doc_index;
  };
  std::vector<Job> jobs;
  for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
    for (std::size_t m = 0; m < cfg.methods.size(); ++m) {
      fs::create_directories(paths.edit_dir(cfg.methods[m], cfg.seeds[s]));
      for (std::size_t j = 0; j < cfg.docs_per_seed; ++j) jobs.push_back({s, m, j});
    }
  }
  const json echo = cfg;
  std::mutex log_mu;
  parallel_for(jobs.size(), cfg.threads, [&](std::size_t i) {
    const Job& job = jobs[i];
    const std::uint64_t seed = cfg.seeds[job.seed_index];
    const MethodSpec spec = method_spec(cfg.methods[job.method_index]);
    const EditDocument& doc = docs[job.seed_index][job.doc_index];
    CoinConfig c = cfg.coin;
    c.method = spec.objective;
    TrainConfig t = cfg.train;
    t.seed = derive_seed(cfg.train.seed, "session", seed);
    const EditSession s = run_edit_variant(pre, doc, spec.variant, c, t, target,
                                           moment ? &*moment : nullptr, cfg.n_variants);
    const fs::path dir = paths.edit_dir(spec.name, seed);
    save_delta_checkpoint(s.params, target, paths.checkpoint(), doc_checkpoint(dir, job.doc_index));
    json report = session_report(s);
    report["method_tag"] = spec.name;
    report["seed"] = seed;
    report["doc_id"] = doc.doc_id;
    report["experiment_config"] = echo;
    write_json_file(report, doc_report(dir, job.doc_index));
    std::ostringstream line;
    line << "edit: seed " << seed << " " << spec.name << " doc " << job.doc_index << " steps "
         << s.steps << " nll " << s.log.back().terms.nll << " (" << s.stop_reason << ")";
    std::lock_guard lock(log_mu);
    log_line(log, line.str());
  });
}

// --- Eval -------------------------------------------------------------------------

void run_eval_stage(const ExperimentConfig& cfg, const Paths& paths, const Logger& log) {
  cfg.validate();
  require(paths.checkpoint(), "pretrained checkpoint");
  const LMParams pre = load_checkpoint(paths.checkpoint());
  const auto holdout = pretrain_data(cfg).holdout;
  const double ppl_pre = holdout_perplexity(pre, holdout);

  std::vector<std::vector<EditDocument>> docs;
  for (auto seed : cfg.seeds) {
    require(paths.docs(seed), "edit documents");
    docs.push_back(read_jsonl(paths.docs(seed)));
    if (docs.back().size() != cfg.docs_per_seed) {
      throw ConfigError("document count in " + paths.docs(seed).string() + " does not match config");
    }
  }
  for (auto seed : cfg.seeds) {
    for (const auto& m : cfg.methods) {
      for (std::size_t j = 0; j < cfg.docs_per_seed; ++j) {
        require(doc_checkpoint(paths.edit_dir(m, seed), j), "edited checkpoint");
      }
    }
  }

  struct DocResult {
    std::vector<std::vector<QueryResult>> queries;  // per format
    std::vector<RestorationRow> probes;
    double ppl_post = 0;
  };
  const std::size_t S = cfg.seeds.size(), Mn = cfg.methods.size(), D = cfg.docs_per_seed;
  std::vector<DocResult> results(S * Mn * D);
  std::mutex log_mu;
  parallel_for(results.size(), cfg.threads, [&](std::size_t i) {
    const std::size_t s = i / (Mn * D), m = (i / D) % Mn, j = i % D;
    const LMParams edited = load_checkpoint(doc_checkpoint(paths.edit_dir(cfg.methods[m], cfg.seeds[s]), j));
    const EditDocument& doc = docs[s][j];
    DocResult& r = results[i];
    for (auto f : cfg.formats) r.queries.push_back(evaluate_queries(edited, doc, f, cfg.decode_budget));
    std::vector<Probe> probes;
    for (std::size_t p = 1; p <= doc.facts.size(); ++p) probes.push_back(build_probe(doc, p));
    r.probes = restoration_gap(edited, probes);
    r.ppl_post = holdout_perplexity(edited, holdout);
    std::lock_guard lock(log_mu);
    log_line(log, "eval: seed " + std::to_string(cfg.seeds[s]) + " " + cfg.methods[m] + " doc " +
                      std::to_string(j));
  });

  std::vector<PositionalCsvRow> positional;
  std::vector<RestorationCsvRow> restoration;
  std::vector<LocalityCsvRow> locality;
  std::ofstream probes_out(paths.probes_csv(), std::ios::binary);
  if (!probes_out) throw MissingArtifactError("cannot write " + paths.probes_csv().string());
  probes_out << "seed,method,doc_id,position,logprob_without,logprob_with,gap\n";
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t m = 0; m < Mn; ++m) {
      const std::size_t first = (s * Mn + m) * D;
      for (std::size_t f = 0; f < cfg.formats.size(); ++f) {
        std::vector<QueryResult> all;
        for (std::size_t j = 0; j < D; ++j) {
          const auto& q = results[first + j].queries[f];
          all.insert(all.end(), q.begin(), q.end());
        }
        for (const auto& pm : aggregate_positions(all, cfg.formats[f]).positions) {
          positional.push_back({cfg.seeds[s], cfg.methods[m], to_string(cfg.formats[f]), pm});
        }
      }
      std::vector<RestorationRow> rows;
      double ppl_sum = 0;
      for (std::size_t j = 0; j < D; ++j) {
        const auto& r = results[first + j];
        for (const auto& row : r.probes) {
          probes_out << cfg.seeds[s] << ',' << cfg.methods[m] << ',' << docs[s][j].doc_id << ','
                     << row.position << ',' << format_double(row.logprob_without) << ','
                     << format_double(row.logprob_with) << ',' << format_double(row.gap) << '\n';
        }
        rows.insert(rows.end(), r.probes.begin(), r.probes.end());
        ppl_sum += r.ppl_post;
      }
      for (const auto& row : aggregate_restoration(rows)) {
        restoration.push_back({cfg.seeds[s], cfg.methods[m], row});
      }
      locality.push_back({cfg.seeds[s], cfg.methods[m], ppl_pre, ppl_sum / static_cast<double>(D)});
    }
  }
  write_positional_csv(positional, paths.positional_csv());
  write_restoration_csv(restoration, paths.restoration_csv());
  write_locality_csv(locality, paths.locality_csv());
  write_json_file({{"config", cfg}, {"ppl_pre", ppl_pre}}, paths.root / "eval_config.json");
  log_line(log, "eval: wrote " + paths.positional_csv().string());
}

// --- Report -----------------------------------------------------------------------

MeanSd mean_sd(const std::vector<double>& v) {
  MeanSd r;
  r.n = v.size();
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

namespace {

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double x = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("malformed number '" + s + "' in " + what);
  }
}

std::uint64_t parse_u64(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const auto x = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("malformed integer '" + s + "' in " + what);
  }
}

// Paired (x, y) values over the seeds both maps share.
std::pair<std::vector<double>, std::vector<double>> pair_up(const std::map<std::uint64_t, double>& x,
                                                            const std::map<std::uint64_t, double>& y) {
  std::vector<double> a, b;
  for (const auto& [seed, v] : x) {
    auto it = y.find(seed);
    if (it == y.end()) continue;
    a.push_back(v);
    b.push_back(it->second);
  }
  return {a, b};
}

json mean_sd_json(const MeanSd& m) { return {{"mean", m.mean}, {"sd", m.sd}, {"n", m.n}}; }

json seed_map_json(const std::map<std::uint64_t, double>& m) {
  json j = json::object();
  for (const auto& [seed, v] : m) j[std::to_string(seed)] = v;
  return j;
}

std::vector<double> values(const std::map<std::uint64_t, double>& m) {
  std::vector<double> v;
  for (const auto& [seed, x] : m) v.push_back(x);
  return v;
}

}  // namespace

Summary summarize(const fs::path& dir) {
  Summary out;
  const CsvTable pos = read_csv(dir / "positional.csv");
  const std::size_t c_seed = pos.column("seed"), c_method = pos.column("method"),
                    c_format = pos.column("format"), c_position = pos.column("position"),
                    c_f1 = pos.column("rouge_f1");
  // method -> seed -> position -> F1
  std::map<std::string, std::map<std::uint64_t, std::map<std::size_t, double>>> f1;
  for (const auto& row : pos.rows) {
    if (row[c_format] != "completion") continue;
    f1[row[c_method]][parse_u64(row[c_seed], "positional.csv")]
      [parse_u64(row[c_position], "positional.csv")] = parse_double(row[c_f1], "positional.csv");
  }
  for (const auto& [method, seeds] : f1) {
    MethodSummary& ms = out.methods[method];
    std::set<std::size_t> positions;
    for (const auto& [seed, by_pos] : seeds) {
      for (const auto& [p, v] : by_pos) positions.insert(p);
    }
    ms.positions.assign(positions.begin(), positions.end());
    std::vector<double> means;
    for (std::size_t p : ms.positions) {
      std::vector<double> v;
      for (const auto& [seed, by_pos] : seeds) {
        if (auto it = by_pos.find(p); it != by_pos.end()) v.push_back(it->second);
      }
      ms.f1_by_position.push_back(mean_sd(v));
      means.push_back(ms.f1_by_position.back().mean);
    }
    if (means.size() >= 2) {
      std::vector<double> xs(ms.positions.begin(), ms.positions.end());
      ms.spearman_f1 = spearman(xs, means);
    }
    for (const auto& [seed, by_pos] : seeds) {
      double sum = 0;
      for (const auto& [p, v] : by_pos) sum += v;
      ms.f1_mean[seed] = sum / static_cast<double>(by_pos.size());
      const double first = by_pos.begin()->second, last = by_pos.rbegin()->second;
      ms.drop_abs[seed] = first - last;
      if (first > 0) ms.drop_rel[seed] = (first - last) / first;
    }
  }

  const CsvTable loc = read_csv(dir / "locality.csv");
  const std::size_t l_seed = loc.column("seed"), l_method = loc.column("method"),
                    l_pre = loc.column("ppl_pre"), l_post = loc.column("ppl_post");
  for (const auto& row : loc.rows) {
    out.methods[row[l_method]].delta_ppl[parse_u64(row[l_seed], "locality.csv")] =
        parse_double(row[l_post], "locality.csv") - parse_double(row[l_pre], "locality.csv");
  }

  // Per-probe rows when present; otherwise per-position means.
  const bool per_probe = fs::exists(dir / "restoration_probes.csv");
  const CsvTable res = read_csv(per_probe ? dir / "restoration_probes.csv" : dir / "restoration.csv");
  const std::size_t r_method = res.column("method"), r_position = res.column("position"),
                    r_gap = res.column("gap");
  std::map<std::string, std::vector<std::pair<std::size_t, double>>> gaps;
  for (const auto& row : res.rows) {
    gaps[row[r_method]].emplace_back(parse_u64(row[r_position], "restoration"),
                                     parse_double(row[r_gap], "restoration"));
  }
  for (const auto& [method, g] : gaps) {
    std::size_t m = 0;
    for (const auto& [p, v] : g) m = std::max(m, p);
    std::size_t late = 0, positive = 0;
    for (const auto& [p, v] : g) {
      if (2 * p < m) continue;
      ++late;
      if (v > 0) ++positive;
    }
    if (late > 0) out.methods[method].restoration_rate = static_cast<double>(positive) / late;
  }

  auto compare = [&](const std::string& name, const std::string& x, const std::string& y,
                     const std::string& quantity, auto member) {
    if (!out.methods.count(x) || !out.methods.count(y)) return;
    // Seeds are paired on the methods' runs; a quantity undefined for a seed
    // (drop_rel with zero first-position F1) just leaves that pair out.
    std::set<std::uint64_t> xs, common;
    for (const auto& [seed, v] : out.methods[x].delta_ppl) xs.insert(seed);
    for (const auto& [seed, v] : out.methods[x].f1_mean) xs.insert(seed);
    for (const auto& [seed, v] : out.methods[y].delta_ppl) {
      if (xs.count(seed)) common.insert(seed);
    }
    for (const auto& [seed, v] : out.methods[y].f1_mean) {
      if (xs.count(seed)) common.insert(seed);
    }
    if (common.empty()) {
      throw ConfigError("pairing error: " + x + " and " + y + " share no seeds");
    }
    const auto [a, b] = pair_up(out.methods[x].*member, out.methods[y].*member);
    PairedComparison c{name, x, y, quantity, paired_sign_test(a, b), a.size()};
    out.comparisons.push_back(c);
  };
  // Each comparison tests H1: x > y.
  compare("mitigation", "FT", "COIN", "drop_rel", &MethodSummary::drop_rel);
  compare("align_ablation", "COIN", "COIN_no_align", "f1_mean", &MethodSummary::f1_mean);
  compare("cons_ablation", "COIN_no_cons", "COIN", "delta_ppl", &MethodSummary::delta_ppl);
  compare("locality_beta", "FT", "COIN_no_align", "delta_ppl", &MethodSummary::delta_ppl);

  if (out.methods.count("FT") && out.methods.count("COIN")) {
    const auto ft = mean_sd(values(out.methods["FT"].drop_rel));
    const auto coin = mean_sd(values(out.methods["COIN"].drop_rel));
    if (ft.n > 0 && coin.n > 0 && ft.mean > 0) out.mitigation_ratio = 1 - coin.mean / ft.mean;
  }
  return out;
}

json Summary::to_json() const {
  json methods_j = json::object();
  for (const auto& [name, ms] : methods) {
    json by_pos = json::array();
    for (std::size_t i = 0; i < ms.positions.size(); ++i) {
      json e = mean_sd_json(ms.f1_by_position[i]);
      e["position"] = ms.positions[i];
      by_pos.push_back(e);
    }
    methods_j[name] = {{"f1_by_position", by_pos},
                       {"spearman_position_f1", ms.spearman_f1},
                       {"f1_mean", mean_sd_json(mean_sd(values(ms.f1_mean)))},
                       {"drop_abs", mean_sd_json(mean_sd(values(ms.drop_abs)))},
                       {"drop_rel", mean_sd_json(mean_sd(values(ms.drop_rel)))},
                       {"delta_ppl", mean_sd_json(mean_sd(values(ms.delta_ppl)))},
                       {"restoration_rate", ms.restoration_rate < 0 ? json() : json(ms.restoration_rate)},
                       {"per_seed",
                        {{"f1_mean", seed_map_json(ms.f1_mean)},
                         {"drop_abs", seed_map_json(ms.drop_abs)},
                         {"drop_rel", seed_map_json(ms.drop_rel)},
                         {"delta_ppl", seed_map_json(ms.delta_ppl)}}}};
  }
  json comps = json::array();
  for (const auto& c : comparisons) {
    comps.push_back({{"name", c.name},
                     {"x", c.x_method},
                     {"y", c.y_method},
                     {"quantity", c.quantity},
                     {"pairs", c.pairs},
                     {"wins", c.test.wins},
                     {"losses", c.test.losses},
                     {"ties", c.test.ties},
                     {"p_value", c.test.p_value}});
  }
  json j{{"methods", methods_j}, {"comparisons", comps}};
  j["mitigation_ratio"] = mitigation_ratio ? json(*mitigation_ratio) : json();
  j["mitigation_ratio_reference"] = 0.452;
  return j;
}

void run_report_stage(const fs::path& dir, std::ostream& out) {
  const Summary s = summarize(dir);
  json j = s.to_json();
  if (fs::exists(dir / "eval_config.json")) j["config"] = read_json_file(dir / "eval_config.json").at("config");
  write_json_file(j, dir / "summary.json");

  auto pm = [](const MeanSd& m) {
    std::ostringstream o;
    o << std::fixed << std::setprecision(4) << m.mean << " +- " << m.sd;
    return o.str();
  };
  out << std::left;
  out << "method            F1(first)          F1(last)           drop_rel           dppl               restore\n";
  for (const auto& [name, ms] : s.methods) {
    out << std::setw(18) << name;
    out << std::setw(19) << (ms.f1_by_position.empty() ? "-" : pm(ms.f1_by_position.front()));
    out << std::setw(19) << (ms.f1_by_position.empty() ? "-" : pm(ms.f1_by_position.back()));
    out << std::setw(19) << pm(mean_sd(values(ms.drop_rel)));
    out << std::setw(19) << pm(mean_sd(values(ms.delta_ppl)));
    if (ms.restoration_rate < 0) {
      out << "-";
    } else {
      out << std::fixed << std::setprecision(3) << ms.restoration_rate;
    }
    out << '\n';
  }
  for (const auto& c : s.comparisons) {
    out << c.name << ": " << c.x_method << " > " << c.y_method << " on " << c.quantity << "  wins "
        << c.test.wins << " losses " << c.test.losses << " ties " << c.test.ties << "  p = "
        << std::setprecision(6) << c.test.p_value << '\n';
  }
  if (s.methods.count("FT") && s.methods.count("COIN")) {
    out << "drop_rel FT " << pm(mean_sd(values(s.methods.at("FT").drop_rel))) << ", COIN "
        << pm(mean_sd(values(s.methods.at("COIN").drop_rel))) << '\n';
    out << "mitigation ratio 1 - drop(COIN)/drop(FT) = ";
    if (s.mitigation_ratio) {
      out << std::setprecision(4) << *s.mitigation_ratio;
    } else {
      out << "undefined";
    }
    out << " (reference at 7-8B scale: 0.452)\n";
  }
}

// --- Sweep ------------------------------------------------------------------------

void run_sweep_stage(const ExperimentConfig& cfg, const std::string& axis, const Paths& paths,
                     const Logger& log) {
  static const std::map<std::string, std::vector<double>> defaults{
      {"alpha", {0.0, 0.05, 0.1, 0.5, 1.0}},
      {"beta", {0.0, 1e-6, 3e-6, 1e-5, 1e-4}},
      {"k", {5, 10, 15, 20, 25}},
      {"model_scale", {64, 128, 256}},
      {"train_steps", {50, 100, 200}}};
  if (!defaults.count(axis)) throw ConfigError("unknown sweep axis '" + axis + "'");
  const auto it = cfg.sweep.find(axis);
  const std::vector<double> grid = it != cfg.sweep.end() ? it->second : defaults.at(axis);
  if (grid.empty()) throw ConfigError("sweep axis '" + axis + "' has no values");

  const fs::path sweep_root = paths.root / ("sweep_" + axis);
  std::ostringstream combined;
  combined << "axis_value," << kPositionalHeader << '\n';
  for (double value : grid) {
    ExperimentConfig c = cfg;
    const std::string tag = format_double(value);
    auto as_size = [&](double v) {
      if (v < 1 || v != std::floor(v)) throw ConfigError("sweep " + axis + " value must be a positive integer");
      return static_cast<std::size_t>(v);
    };
    if (axis == "alpha") c.coin.alpha = value;
    if (axis == "beta") c.coin.beta = value;
    if (axis == "k") c.coin.k = as_size(value);
    if (axis == "train_steps") c.train.max_steps = as_size(value);
    if (axis == "model_scale") {
      c.lm.d_model = as_size(value);
      c.lm.d_ff = 4 * c.lm.d_model;
    }
    const fs::path dir = sweep_root / tag;
    fs::create_directories(dir);
    Paths p(dir, axis == "model_scale" ? dir : paths.base);
    log_line(log, "sweep: " + axis + " = " + tag);
    if (axis == "model_scale") run_pretrain_stage(c, p, log);
    run_edit_stage(c, p, log);
    run_eval_stage(c, p, log);
    const CsvTable t = read_csv(p.positional_csv());
    for (const auto& row : t.rows) {
      combined << tag;
      for (const auto& cell : row) combined << ',' << cell;
      combined << '\n';
    }
  }
  std::ofstream out(paths.root / ("sweep_" + axis + ".csv"), std::ios::binary);
  out << combined.str();
  if (!out) throw MissingArtifactError("cannot write sweep CSV under " + paths.root.string());
}

// --- Theorem ----------------------------------------------------------------------

std::size_t run_theorem_stage(const ExperimentConfig& cfg, const Paths& paths, const Logger& log) {
  cfg.validate();
  std::vector<std::pair<theorem::ScenarioParams, theorem::GradSource>> jobs;
  for (const auto& g : cfg.theorem.grad_sources) {
    for (auto M : cfg.theorem.M) {
      for (double delta : cfg.theorem.delta) {
        for (auto N : cfg.theorem.N) {
          for (double eta : cfg.theorem.eta_fraction) {
            for (std::size_t s = 0; s < cfg.theorem.seeds; ++s) {
              theorem::ScenarioParams sp;
              sp.M = M;
              sp.T = cfg.theorem.T;
              sp.N = N;
              sp.delta = delta;
              sp.eta_fraction = eta;
              sp.seed = derive_seed(cfg.seed, "theorem", s);
              jobs.emplace_back(sp, theorem::grad_source_from_string(g));
            }
          }
        }
      }
    }
  }
  std::vector<theorem::Run> runs(jobs.size());
  parallel_for(jobs.size(), cfg.threads, [&](std::size_t i) {
    try {
      runs[i] = theorem::run_scenario(jobs[i].first, jobs[i].second);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("theorem scenario out of bounds: ") + e.what());
    }
  });
  fs::create_directories(paths.root);
  std::ofstream out(paths.root / "theorem.csv", std::ios::binary);
  if (!out) throw MissingArtifactError("cannot write " + (paths.root / "theorem.csv").string());
  out << kTheoremHeader << '\n';
  std::size_t failures = 0;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& sc = runs[i].scenario;
    const auto& r = runs[i].report;
    if (!(r.success_with && r.failure_without)) ++failures;
    out << sc.params.M << ',' << sc.params.T << ',' << sc.params.N << ','
        << format_double(sc.params.delta) << ',' << format_double(sc.r) << ','
        << format_double(sc.eta) << ',' << format_double(sc.A) << ',' << sc.params.seed << ','
        << theorem::to_string(jobs[i].second) << ',' << r.argmax_with << ',' << r.argmax_without
        << ',' << format_double(r.margin_with) << ',' << format_double(r.margin_without) << ','
        << format_double(r.delta_drift) << ',' << format_double(r.gradY_dev) << ','
        << format_double(r.gradZ_dev) << '\n';
  }
  log_line(log, "theorem: " + std::to_string(runs.size()) + " scenarios, " +
                    std::to_string(failures) + " failing the dichotomy");
  return failures;
}

}  // namespace ctxedit
