#pragma once

#include <string>
#include <vector>

#include "i2b/grpo.hpp"
#include "i2b/model.hpp"

namespace i2b {

// Everything a run needs, assembled from a flat `key = value` config file.
// Unknown keys and malformed values are rejected with usage_error so a typo
// can't silently fall back to a default.
struct RunConfig {
  ModelConfig model;   // vocab_size is pinned to the tokenizer's alphabet
  TrainConfig train;
  int cvae_width = 32; // encoder head width

  // training data
  int n_problems = 64;
  int difficulty_min = 1;
  int difficulty_max = 3;
  int max_answer_len = 1;      // canonical-answer length cap; 0 disables it
  std::uint64_t data_seed = 1234;
  std::string problems_file;   // optional TSV override for the train set

  // evaluation
  int eval_n = 10;                   // samples per prompt
  std::vector<int> eval_k = {1, 4};  // pass@k values
  int eval_n_problems = 16;
  std::uint64_t eval_seed = 4321;    // held-out generation + sampling seed

  // head probing
  int probe_layer = -1;        // -1 = last attention layer
  int probe_bootstrap = 200;
  int probe_cohort = 12;       // problems per cohort
  int probe_easy_max = 2;      // easy cohort difficulty ceiling
  int probe_hard_min = 6;      // hard cohort difficulty floor
  std::uint64_t probe_seed = 7;

  // bookkeeping
  std::string mode = "i2b";    // preset name, see apply_mode_preset
  std::string checkpoint;      // input checkpoint path (resume / eval / probe)
  std::string checkpoint_hash; // informational fingerprint, set by manifests
  bool deterministic_timing = true;  // write 0.0 seconds into CSVs

  void validate() const;  // usage_error on inconsistent values
};

// Parses config text. Lines are `key = value`; blank lines and '#' comments
// are skipped; keys may appear once. usage_error on unknown keys, duplicate
// keys, or unparseable values.
RunConfig parse_config(const std::string& text);

// Reads and parses a config file. usage_error when unreadable.
RunConfig load_config(const std::string& path);

// Serializes every key in sorted order; parse_config(config_text(c)) == c.
// This is the body of the run manifest.
std::string config_text(const RunConfig& cfg);

// Named baseline/ablation presets. Rewrites cfg.train (and cfg.mode) in place:
//   grpo_only     plain GRPO: K=0, no IB, no entropy bonus
//   entropy_reg   grpo_only plus an entropy bonus (alpha_ent, default 0.01)
//   i2b           the full pipeline as configured
//   i2b_no_ib     branching without the IB term: gamma_ib=0, N=M*(K+1)
//   i2b_no_branch K=0 and N capped at M
//   fusion_input  i2b with input-level latent fusion
//   fusion_logit  i2b with softmax-level latent fusion
// Presets are idempotent, so re-running a manifest re-applies them safely.
// usage_error on an unknown mode name.
void apply_mode_preset(RunConfig& cfg, const std::string& mode);

}  // namespace i2b
