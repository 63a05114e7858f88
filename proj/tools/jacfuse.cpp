// jacfuse - staged pipeline driver.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include <nlohmann/json.hpp>

#include "jacfuse/config.hpp"
#include "jacfuse/errors.hpp"
#include "jacfuse/pipeline.hpp"

namespace {

bool config_file_sets_seed(const std::string &path) {
  std::ifstream in(path);
  if (!in) return false;
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return nlohmann::json::parse(ss.str()).contains("seed");
  } catch (...) {
    return false;
  }
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Jacobian-domain multimodal staging pipeline"};
  app.require_subcommand(1);
  // Global options may appear after the subcommand name.
  app.fallthrough();

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> verbosity;
  int jobs = 1;
  bool force = false;

  app.add_option("--config", config_path, "pipeline config JSON")
      ->check(CLI::ExistingFile);
  app.add_option("--out", out_dir, "output directory (overrides config)");
  app.add_option("--seed", seed, "global seed (overrides config)");
  app.add_option("--jobs", jobs, "workers for per-subject stages")
      ->check(CLI::PositiveNumber);
  app.add_flag("--force", force, "rerun stages even when up to date");
  app.add_option("--verbosity", verbosity, "0 silent, 1 progress");

  std::optional<int> n_per_class;
  std::optional<double> missing;
  auto *cmd_phantom =
      app.add_subcommand("phantom", "generate the synthetic dataset");
  cmd_phantom->add_option("--n-per-class", n_per_class, "subjects per class")
      ->check(CLI::Range(2, 100000));
  cmd_phantom->add_option("--missing", missing, "missing-modality fraction")
      ->check(CLI::Range(0.0, 0.999999));

  auto *cmd_preprocess =
      app.add_subcommand("preprocess", "bias, contrast, brain extraction");
  auto *cmd_register =
      app.add_subcommand("register", "template build and alignment");
  auto *cmd_jacobian =
      app.add_subcommand("jacobian", "determinant maps from fields");

  std::optional<int> folds;
  auto *cmd_train =
      app.add_subcommand("train", "cross-validated model training");
  cmd_train->add_option("--folds", folds, "cross-validation fold count")
      ->check(CLI::Range(2, 1000));

  auto *cmd_evaluate =
      app.add_subcommand("evaluate", "held-out metrics and ablation");

  auto *cmd_run_all = app.add_subcommand("run-all", "all stages in order");
  cmd_run_all->add_option("--n-per-class", n_per_class, "subjects per class")
      ->check(CLI::Range(2, 100000));
  cmd_run_all->add_option("--missing", missing, "missing-modality fraction")
      ->check(CLI::Range(0.0, 0.999999));
  cmd_run_all->add_option("--folds", folds, "cross-validation fold count")
      ->check(CLI::Range(2, 1000));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    if (e.get_exit_code() == 0) return app.exit(e); // --help and friends
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }

  // Setup: configuration problems are usage errors.
  std::optional<jacfuse::PipelineRunner> runner;
  try {
    jacfuse::PipelineOptions opts;
    if (!config_path.empty())
      opts.cfg = jacfuse::load_pipeline_config(config_path);
    if (seed) {
      opts.cfg.seed = *seed;
    } else if (config_path.empty() || !config_file_sets_seed(config_path)) {
      if (const char *env = std::getenv("JACFUSE_SEED")) {
        char *end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (end == env || *end != '\0') {
          std::fprintf(stderr, "error: JACFUSE_SEED is not a number: %s\n",
                       env);
          return 2;
        }
        opts.cfg.seed = v;
      }
    }
    if (verbosity) opts.cfg.verbosity = *verbosity;
    if (n_per_class) opts.cfg.n_per_class = *n_per_class;
    if (missing) opts.cfg.missing_fraction = *missing;
    opts.out_dir = out_dir;
    opts.jobs = jobs;
    opts.force = force;
    opts.folds_override = folds.value_or(0);
    runner.emplace(std::move(opts));
  } catch (const jacfuse::InvalidConfig &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }

  try {
    if (*cmd_run_all) {
      runner->run_all();
      return 0;
    }
    if (*cmd_phantom) runner->run_phantom();
    if (*cmd_preprocess) runner->run_preprocess();
    if (*cmd_register) runner->run_register();
    if (*cmd_jacobian) runner->run_jacobian();
    if (*cmd_train) runner->run_train();
    if (*cmd_evaluate) runner->run_evaluate();
    runner->write_log();
    return 0;
  } catch (const std::exception &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
