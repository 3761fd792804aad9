#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxedit/coin.hpp"
#include "ctxedit/corpus.hpp"
#include "ctxedit/edit.hpp"
#include "ctxedit/eval.hpp"
#include "ctxedit/lm.hpp"
#include "ctxedit/pretrain.hpp"

namespace ctxedit {

struct TheoremSweep {
  std::vector<std::size_t> M{256, 512, 1024};
  std::vector<double> delta{0.5, 1.0, 2.0};
  std::vector<std::size_t> N{2};
  std::vector<double> eta_fraction{0.6};
  std::size_t T = 12;
  std::size_t seeds = 20;
  std::vector<std::string> grad_sources{"literal", "autodiff"};
};

struct ExperimentConfig {
  std::uint64_t seed = 0;  // root seed
  LMConfig lm;
  PretrainCorpusConfig corpus;
  std::size_t holdout_docs = 200;
  std::size_t edit_facts = 8;     // m
  std::size_t docs_per_seed = 4;  // edit documents per seed; one session each
  PretrainConfig pretrain;
  std::size_t moment_max_keys = 100000;
  MomentMode moment_mode = MomentMode::kMean;
  CoinConfig coin;
  TrainConfig train;
  std::size_t n_variants = 3;
  std::size_t decode_budget = kDecodeBudget;
  std::vector<QueryFormat> formats{QueryFormat::kCompletion, QueryFormat::kQA};
  std::vector<std::string> methods{"FT", "COIN"};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::map<std::string, std::vector<double>> sweep;  // axis -> values
  TheoremSweep theorem;
  std::size_t threads = 1;  // runtime only; not part of the echoed config

  // Edit-stage defaults tuned for the toy model; the library structs keep theirs.
  ExperimentConfig() {
    train.learning_rate = 1e-2;
    train.max_steps = 100;
    coin.alpha = 1.0;
    coin.beta = 1e-5;
  }

  void validate() const;  // throws ConfigError
  // Overwrites the per-stage seeds with streams split from `seed`.
  void derive_seeds();
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
// Missing keys keep their defaults; unknown sections or keys raise ConfigError.
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// A method tag from the config: the objective plus the training-set variant.
struct MethodSpec {
  std::string name;
  Variant variant = Variant::kFT;
  Method objective = Method::kFT;
};
MethodSpec method_spec(const std::string& name);  // throws ConfigError

using Logger = std::function<void(const std::string&)>;

// Artifact layout under one output directory. Pretrained artifacts live under
// `base`, which defaults to the same directory (sweeps share one base).
struct Paths {
  std::filesystem::path root;
  std::filesystem::path base;

  explicit Paths(std::filesystem::path r, std::filesystem::path b = {})
      : root(std::move(r)), base(b.empty() ? root : std::move(b)) {}
  std::filesystem::path checkpoint() const { return base / "pretrained.json"; }
  std::filesystem::path moment() const { return base / "second_moment.json"; }
  std::filesystem::path pretrain_report() const { return base / "pretrain_report.json"; }
  std::filesystem::path docs(std::uint64_t seed) const;
  std::filesystem::path edit_dir(const std::string& method, std::uint64_t seed) const;
  std::filesystem::path positional_csv() const { return root / "positional.csv"; }
  std::filesystem::path restoration_csv() const { return root / "restoration.csv"; }
  std::filesystem::path probes_csv() const { return root / "restoration_probes.csv"; }
  std::filesystem::path locality_csv() const { return root / "locality.csv"; }
  std::filesystem::path summary_json() const { return root / "summary.json"; }
};

// Tokenized pretraining and holdout sequences for the config.
struct PretrainData {
  std::vector<std::vector<TokenId>> train, holdout;
};
PretrainData pretrain_data(const ExperimentConfig& cfg);

// Trains, then accumulates the second moment; writes checkpoint, moment and
// the per-epoch report.
void run_pretrain_stage(const ExperimentConfig& cfg, const Paths& paths, const Logger& log);

// Edit documents for one seed, regenerated until the pretrained model's greedy
// answer to every query differs from the new gold answer.
std::vector<EditDocument> counterfactual_documents(const ExperimentConfig& cfg,
                                                   const LMParams& pretrained, std::uint64_t seed);

// One session per (seed, method, document): delta checkpoints and JSON reports.
void run_edit_stage(const ExperimentConfig& cfg, const Paths& paths, const Logger& log);

// Reads the edited checkpoints and writes the three CSVs plus per-probe rows.
void run_eval_stage(const ExperimentConfig& cfg, const Paths& paths, const Logger& log);

// --- Report -----------------------------------------------------------------------

struct MeanSd {
  double mean = 0, sd = 0;
  std::size_t n = 0;
};
MeanSd mean_sd(const std::vector<double>& v);

struct MethodSummary {
  std::vector<std::size_t> positions;
  std::vector<MeanSd> f1_by_position;          // completion format
  std::map<std::uint64_t, double> f1_mean;     // per seed, over positions
  std::map<std::uint64_t, double> drop_abs;    // per seed, F1
  std::map<std::uint64_t, double> drop_rel;    // per seed, F1 (seeds with F1(1) > 0)
  std::map<std::uint64_t, double> delta_ppl;   // per seed
  double restoration_rate = -1;                // positive-gap share at late positions
  double spearman_f1 = 0;                      // position vs mean F1
};

struct PairedComparison {
  std::string name, x_method, y_method, quantity;
  SignTest test;
  std::size_t pairs = 0;
};

struct Summary {
  std::map<std::string, MethodSummary> methods;
  std::vector<PairedComparison> comparisons;
  std::optional<double> mitigation_ratio;  // from mean relative drops
  nlohmann::json to_json() const;
};

// Builds the summary from the CSVs in `dir`. Missing columns raise ConfigError;
// comparisons between methods with no common seed raise ConfigError.
Summary summarize(const std::filesystem::path& dir);
void run_report_stage(const std::filesystem::path& dir, std::ostream& out);

// Sweeps one axis (alpha, beta, k, model_scale, train_steps): each value gets
// its own subdirectory with the edit and eval stages, plus a combined CSV.
void run_sweep_stage(const ExperimentConfig& cfg, const std::string& axis, const Paths& paths,
                     const Logger& log);

inline constexpr const char* kTheoremHeader =
    "M,T,N,delta,r,eta,A,seed,grad_source,argmax_with,argmax_without,margin_with,"
    "margin_without,delta_drift,gradY_dev,gradZ_dev";

// Full Cartesian sweep; returns the number of in-regime rows failing the dichotomy.
std::size_t run_theorem_stage(const ExperimentConfig& cfg, const Paths& paths, const Logger& log);

// Runs `fn(i)` for i in [0, n) on `threads` workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace ctxedit
