// ctxedit: pretrain, edit, eval, theorem, sweep and report stages.
//
// Exit codes: 0 success, 1 config error, 2 missing artifact, 3 numerical failure.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ctxedit/errors.hpp"
#include "ctxedit/experiment.hpp"

namespace {

using ctxedit::ExperimentConfig;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs/default";
  std::size_t threads = 1;
  std::vector<std::string> methods;
  std::vector<std::uint64_t> seeds;
  std::string axis;
  std::string dir;
  bool quiet = false;
};

ExperimentConfig resolve(const Flags& f) {
  ExperimentConfig c;
  if (!f.config.empty()) c = ctxedit::load_experiment_config(f.config);
  if (f.seed) c.seed = *f.seed;
  if (!f.methods.empty()) c.methods = f.methods;
  if (!f.seeds.empty()) c.seeds = f.seeds;
  c.threads = f.threads;
  c.derive_seeds();
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context reliance experiments on a toy transformer"};
  app.require_subcommand(1);
  Flags f;
  app.add_option("--config", f.config, "JSON config file (flags override it)");
  app.add_option("--seed", f.seed, "root seed");
  app.add_option("--out", f.out, "output directory");
  app.add_option("--threads", f.threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_flag("--quiet", f.quiet, "no progress lines on stderr");

  auto* pretrain = app.add_subcommand("pretrain", "train the LM and its second-moment file");
  auto* edit = app.add_subcommand("edit", "edit sessions for every (seed, method, document)");
  edit->add_option("--methods", f.methods, "method tags (FT, COIN, COIN_no_align, COIN_no_cons, split, paraphrase)");
  edit->add_option("--seeds", f.seeds, "seed list");
  auto* eval = app.add_subcommand("eval", "positional, restoration and locality CSVs");
  eval->add_option("--methods", f.methods, "method tags");
  eval->add_option("--seeds", f.seeds, "seed list");
  auto* theorem = app.add_subcommand("theorem", "one-step dichotomy sweep to theorem.csv");
  auto* sweep = app.add_subcommand("sweep", "edit + eval over one config axis");
  sweep->add_option("--axis", f.axis, "alpha, beta, k, model_scale or train_steps")->required();
  auto* report = app.add_subcommand("report", "summary table and summary.json from eval CSVs");
  report->add_option("--dir", f.dir, "CSV directory (default: --out)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const ctxedit::Logger log = [&](const std::string& line) {
    if (!f.quiet) std::cerr << line << '\n';
  };
  try {
    if (report->parsed()) {
      ctxedit::run_report_stage(f.dir.empty() ? f.out : f.dir, std::cout);
      return 0;
    }
    const ExperimentConfig cfg = resolve(f);
    const ctxedit::Paths paths(f.out);
    std::filesystem::create_directories(paths.root);
    if (pretrain->parsed()) ctxedit::run_pretrain_stage(cfg, paths, log);
    if (edit->parsed()) ctxedit::run_edit_stage(cfg, paths, log);
    if (eval->parsed()) ctxedit::run_eval_stage(cfg, paths, log);
    if (sweep->parsed()) ctxedit::run_sweep_stage(cfg, f.axis, paths, log);
    if (theorem->parsed()) {
      const std::size_t failures = ctxedit::run_theorem_stage(cfg, paths, log);
      if (failures > 0) std::cerr << "theorem: " << failures << " scenarios failed the dichotomy\n";
    }
    return 0;
  } catch (const ctxedit::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const ctxedit::MissingArtifactError& e) {
    std::cerr << "missing artifact: " << e.what() << '\n';
    return 2;
  } catch (const ctxedit::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
