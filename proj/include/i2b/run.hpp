#pragma once

#include <string>
#include <vector>

#include "i2b/checkpoint.hpp"
#include "i2b/config.hpp"
#include "i2b/metrics.hpp"
#include "i2b/tasks.hpp"

namespace i2b {

// Filesystem layout of one run directory. Commands create the directory and
// fill in the files they own; every CSV is comma-separated with a header
// row, '.' decimals, and LF line endings.
struct RunPaths {
  std::string dir;
  std::string manifest;     // manifest.txt — effective config, re-runnable
  std::string train_csv;    // train.csv — one row per iteration
  std::string eval_csv;     // eval.csv — metric,value
  std::string samples_csv;  // eval_samples.csv — long-form per response
  std::string heads_csv;    // heads.csv — layer,head,s_hard,s_easy,delta
  std::string checkpoint;   // checkpoint.bin — final parameters
  std::string timing;       // timing.txt — wall clock, kept out of the CSVs

  static RunPaths under(const std::string& dir);
};

// Deterministic problem-set construction: difficulties cycle through
// [difficulty_min, difficulty_max] and draws whose canonical answer is
// longer than max_answer_len are rejected (0 disables the cap).
// usage_error when the filter rejects 100000 draws in a row.
std::vector<Problem> make_problem_set(int count, int difficulty_min,
                                      int difficulty_max, int max_answer_len,
                                      Rng& rng);

// Everything cmd_eval derives before writing CSVs; exposed so experiments
// can evaluate a checkpoint in-process.
struct EvalOutcome {
  std::vector<Problem> problems;
  std::vector<PromptSamples> prompts;
  EvalReport report;
};
EvalOutcome run_eval(const RunConfig& cfg, Checkpoint& ckpt);

// Trains one mode end to end: applies the preset, builds (or loads) the
// problem set, runs cfg.train.iterations steps, and writes train.csv, the
// final checkpoint, the manifest, and the timing sidecar. When
// cfg.checkpoint is set training resumes from it (the stored model config
// wins over the file's model keys). out_dir defaults to
// runs/<timestamp>-<mode>-<seed>. Returns the paths.
RunPaths cmd_train(RunConfig cfg, const std::string& mode,
                   std::string out_dir = "");

// Samples eval_n responses per held-out prompt at temperature 1.0 from the
// checkpoint named by cfg.checkpoint and writes eval.csv plus the long-form
// eval_samples.csv. usage_error without a checkpoint.
RunPaths cmd_eval(RunConfig cfg, std::string out_dir = "");

// Head-probe analysis of cfg.checkpoint: hard cohort difficulties in
// [probe_hard_min, 9], easy in [1, probe_easy_max], written to heads.csv.
RunPaths cmd_probe_heads(RunConfig cfg, std::string out_dir = "");

}  // namespace i2b
