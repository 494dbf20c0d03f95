#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "i2b/config.hpp"
#include "i2b/errors.hpp"
#include "i2b/run.hpp"
#include "i2b/tasks.hpp"

namespace {

// Shared flags; empty/unset means "keep what the config file says".
struct CliArgs {
  std::string config_path;
  std::string mode;
  std::string out_dir;
  std::string checkpoint;
  bool seed_set = false;
  std::uint64_t seed = 0;
};

i2b::RunConfig resolve_config(const CliArgs& args) {
  i2b::RunConfig cfg;
  if (!args.config_path.empty()) cfg = i2b::load_config(args.config_path);
  if (!args.checkpoint.empty()) cfg.checkpoint = args.checkpoint;
  return cfg;
}

void add_common(CLI::App* cmd, CliArgs& args) {
  cmd->add_option("-c,--config", args.config_path, "Config file (flat key = value lines)")
      ->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", args.out_dir,
                  "Output directory (default: runs/<timestamp>-<tag>-<seed>)");
}

int run_train(const CliArgs& args) {
  i2b::RunConfig cfg = resolve_config(args);
  if (args.seed_set) cfg.train.seed = args.seed;
  const std::string mode = args.mode.empty() ? cfg.mode : args.mode;
  const i2b::RunPaths paths = i2b::cmd_train(cfg, mode, args.out_dir);
  std::printf("train: %s (%s, seed %llu) -> %s\n", mode.c_str(),
              cfg.checkpoint.empty() ? "fresh" : "resumed",
              static_cast<unsigned long long>(args.seed_set ? args.seed : cfg.train.seed),
              paths.dir.c_str());
  return 0;
}

int run_eval_cmd(const CliArgs& args, int eval_n, const std::vector<int>& eval_k) {
  i2b::RunConfig cfg = resolve_config(args);
  if (args.seed_set) cfg.eval_seed = args.seed;
  if (eval_n > 0) cfg.eval_n = eval_n;
  if (!eval_k.empty()) cfg.eval_k = eval_k;
  const i2b::RunPaths paths = i2b::cmd_eval(cfg, args.out_dir);
  std::printf("eval: %s -> %s\n", cfg.checkpoint.c_str(), paths.dir.c_str());
  // Echo the metric table so a terminal run is readable without opening files.
  std::FILE* f = std::fopen(paths.eval_csv.c_str(), "rb");
  if (f) {
    char buf[256];
    while (std::fgets(buf, sizeof(buf), f)) std::fputs(buf, stdout);
    std::fclose(f);
  }
  return 0;
}

int run_probe(const CliArgs& args) {
  i2b::RunConfig cfg = resolve_config(args);
  if (args.seed_set) cfg.probe_seed = args.seed;
  const i2b::RunPaths paths = i2b::cmd_probe_heads(cfg, args.out_dir);
  std::printf("probe-heads: %s -> %s\n", cfg.checkpoint.c_str(), paths.heads_csv.c_str());
  return 0;
}

int run_gen_problems(const CliArgs& args, const std::string& out_file, int count) {
  i2b::RunConfig cfg = resolve_config(args);
  if (args.seed_set) cfg.data_seed = args.seed;
  if (count > 0) cfg.n_problems = count;
  i2b::Rng rng(cfg.data_seed);
  const std::vector<i2b::Problem> problems = i2b::make_problem_set(
      cfg.n_problems, cfg.difficulty_min, cfg.difficulty_max, cfg.max_answer_len, rng);
  i2b::save_problems(out_file, problems);
  std::printf("gen-problems: %zu problems (difficulty %d..%d) -> %s\n", problems.size(),
              cfg.difficulty_min, cfg.difficulty_max, out_file.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-branching GRPO trainer for verifiable arithmetic"};
  app.require_subcommand(1);

  CliArgs args;
  int eval_n = 0;
  std::vector<int> eval_k;
  std::string out_file = "problems.tsv";
  int gen_count = 0;

  CLI::App* train = app.add_subcommand("train", "Train one mode and write a run directory");
  add_common(train, args);
  train->add_option("-m,--mode", args.mode,
                    "Preset: grpo_only, entropy_reg, i2b, i2b_no_ib, i2b_no_branch, "
                    "fusion_input, fusion_logit");
  train->add_option("--checkpoint", args.checkpoint, "Resume training from this checkpoint");
  train->add_option("-s,--seed", args.seed, "Training seed");

  CLI::App* eval = app.add_subcommand("eval", "Sample a checkpoint on held-out problems");
  add_common(eval, args);
  eval->add_option("--checkpoint", args.checkpoint, "Checkpoint to evaluate");
  eval->add_option("-s,--seed", args.seed, "Held-out generation/sampling seed");
  eval->add_option("-n", eval_n, "Samples per prompt");
  eval->add_option("-k", eval_k, "pass@k cutoffs")->delimiter(',');

  CLI::App* probe = app.add_subcommand("probe-heads", "Attention-head difficulty attribution");
  add_common(probe, args);
  probe->add_option("--checkpoint", args.checkpoint, "Checkpoint to probe");
  probe->add_option("-s,--seed", args.seed, "Cohort/bootstrap seed");

  CLI::App* gen = app.add_subcommand("gen-problems", "Write a problem set as TSV");
  add_common(gen, args);
  gen->add_option("-s,--seed", args.seed, "Generation seed");
  gen->add_option("-n", gen_count, "Number of problems");
  gen->add_option("-f,--file", out_file, "Output TSV path");

  CLI11_PARSE(app, argc, argv);

  for (const CLI::App* cmd : {train, eval, probe, gen})
    if (cmd->parsed() && cmd->count("--seed") > 0) args.seed_set = true;

  try {
    if (train->parsed()) return run_train(args);
    if (eval->parsed()) return run_eval_cmd(args, eval_n, eval_k);
    if (probe->parsed()) return run_probe(args);
    if (gen->parsed()) return run_gen_problems(args, out_file, gen_count);
  } catch (const i2b::usage_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
