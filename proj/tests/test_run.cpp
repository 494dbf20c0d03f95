#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "i2b/checkpoint.hpp"
#include "i2b/errors.hpp"
#include "i2b/run.hpp"

using namespace i2b;

namespace {

RunConfig desk_config() {
  RunConfig c;
  c.model.d_model = 8;
  c.model.n_layers = 2;
  c.model.n_heads = 2;
  c.model.d_head = 4;
  c.model.max_seq_len = 48;
  c.model.d_z = 4;
  c.model.psa_layers = {1};
  c.model.decay_horizon = 8;
  c.cvae_width = 12;
  c.train.M = 2;
  c.train.K = 1;
  c.train.N = 3;
  c.train.batch_prompts = 2;
  c.train.max_new = 8;
  c.train.iterations = 3;
  c.train.cvae_pairs = 2;
  c.train.seed = 21;
  c.n_problems = 4;
  c.difficulty_min = 1;
  c.difficulty_max = 1;
  c.max_answer_len = 1;
  c.eval_n = 3;
  c.eval_k = {1, 3};
  c.eval_n_problems = 3;
  c.probe_cohort = 3;
  c.probe_bootstrap = 25;
  return c;
}

struct TempDir {
  std::string path;
  explicit TempDir(std::string p) : path(std::move(p)) {
    std::filesystem::remove_all(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

std::size_t line_count(const std::string& text) {
  std::size_t n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

}  // namespace

TEST_SUITE_BEGIN("run");

TEST_CASE("make_problem_set: cycles difficulties and honors the answer cap") {
  Rng rng(1234);
  const auto set = make_problem_set(7, 2, 4, 0, rng);
  REQUIRE(set.size() == 7);
  const int want[] = {2, 3, 4, 2, 3, 4, 2};
  for (int i = 0; i < 7; ++i) CHECK(set[i].difficulty == want[i]);

  Rng rng2(1234);
  const auto capped = make_problem_set(12, 1, 3, 1, rng2);
  for (const Problem& p : capped) CHECK(p.answer.size() <= 1);

  // With the cap off, multi-operation problems routinely reach wide answers.
  Rng rng3(1234);
  const auto open = make_problem_set(12, 3, 3, 0, rng3);
  bool wide = false;
  for (const Problem& p : open) wide = wide || p.answer.size() > 1;
  CHECK(wide);
}

TEST_CASE("make_problem_set: rejects bad requests") {
  Rng rng(1);
  CHECK_THROWS_AS(make_problem_set(0, 1, 3, 0, rng), usage_error);
  CHECK_THROWS_AS(make_problem_set(4, 0, 3, 0, rng), usage_error);
  CHECK_THROWS_AS(make_problem_set(4, 2, 1, 0, rng), usage_error);
  CHECK_THROWS_AS(make_problem_set(4, 1, 10, 0, rng), usage_error);
}

TEST_CASE("cmd_train: identical configs give byte-identical outputs") {
  TempDir a("/tmp/i2b_test_run_a"), b("/tmp/i2b_test_run_b");
  const RunPaths pa = cmd_train(desk_config(), "i2b", a.path);
  const RunPaths pb = cmd_train(desk_config(), "i2b", b.path);

  const std::string csv = slurp(pa.train_csv);
  CHECK(csv == slurp(pb.train_csv));
  CHECK(slurp(pa.checkpoint) == slurp(pb.checkpoint));
  CHECK(slurp(pa.manifest) == slurp(pb.manifest));

  CHECK(csv.rfind("iter,mean_reward,pass1,mean_entropy,mean_len,ib_mean,loss,"
                  "grad_norm,seconds\n", 0) == 0);
  CHECK(line_count(csv) == 4);  // header + 3 iterations
  CHECK(std::filesystem::exists(pa.timing));
}

TEST_CASE("cmd_train: a manifest reproduces its own run byte for byte") {
  TempDir a("/tmp/i2b_test_run_m1"), b("/tmp/i2b_test_run_m2");
  const RunPaths pa = cmd_train(desk_config(), "i2b_no_ib", a.path);
  const RunConfig replay = load_config(pa.manifest);
  const RunPaths pb = cmd_train(replay, replay.mode, b.path);
  CHECK(slurp(pa.train_csv) == slurp(pb.train_csv));
  CHECK(slurp(pa.checkpoint) == slurp(pb.checkpoint));
  CHECK(slurp(pa.manifest) == slurp(pb.manifest));
}

TEST_CASE("cmd_train: i2b_no_branch preset equals a hand-built K=0 config") {
  TempDir a("/tmp/i2b_test_run_p1"), b("/tmp/i2b_test_run_p2");
  const RunPaths pa = cmd_train(desk_config(), "i2b_no_branch", a.path);
  RunConfig manual = desk_config();
  manual.train.K = 0;
  manual.train.N = 2;  // min(N, M)
  const RunPaths pb = cmd_train(manual, "i2b", b.path);
  CHECK(slurp(pa.train_csv) == slurp(pb.train_csv));
  CHECK(slurp(pa.checkpoint) == slurp(pb.checkpoint));
}

TEST_CASE("cmd_train: resuming from a checkpoint records its fingerprint") {
  TempDir a("/tmp/i2b_test_run_r1"), b("/tmp/i2b_test_run_r2");
  const RunPaths pa = cmd_train(desk_config(), "i2b", a.path);
  const std::uint64_t fresh_version = load_checkpoint(pa.checkpoint).policy.version;

  RunConfig resume = desk_config();
  resume.checkpoint = pa.checkpoint;
  resume.train.iterations = 1;
  const RunPaths pb = cmd_train(resume, "grpo_only", b.path);

  const std::string manifest = slurp(pb.manifest);
  CHECK(manifest.find("checkpoint = " + pa.checkpoint) != std::string::npos);
  CHECK(manifest.find("checkpoint_hash = ") != std::string::npos);
  CHECK(manifest.find("checkpoint_hash = \n") == std::string::npos);  // nonempty
  CHECK(load_checkpoint(pb.checkpoint).policy.version > fresh_version);
}

TEST_CASE("cmd_train: problems_file overrides generated data") {
  TempDir a("/tmp/i2b_test_run_f1");
  const std::string tsv = "/tmp/i2b_test_run_problems.tsv";
  {
    Rng rng(9);
    save_problems(tsv, make_problem_set(4, 1, 1, 1, rng));
  }
  RunConfig cfg = desk_config();
  cfg.problems_file = tsv;
  cfg.train.iterations = 1;
  const RunPaths pa = cmd_train(cfg, "grpo_only", a.path);
  CHECK(slurp(pa.manifest).find("problems_file = " + tsv) != std::string::npos);
  std::remove(tsv.c_str());
}

TEST_CASE("cmd_eval: writes the full metric table deterministically") {
  TempDir t("/tmp/i2b_test_run_t"), e1("/tmp/i2b_test_run_e1"),
      e2("/tmp/i2b_test_run_e2");
  const RunPaths pt = cmd_train(desk_config(), "grpo_only", t.path);

  RunConfig cfg = desk_config();
  cfg.checkpoint = pt.checkpoint;
  const RunPaths pe = cmd_eval(cfg, e1.path);
  const std::string csv = slurp(pe.eval_csv);

  CHECK(csv.rfind("metric,value\n", 0) == 0);
  for (const char* metric :
       {"pass@1,", "pass@3,", "distinct-1,", "distinct-2,", "distinct-3,",
        "distinct-4,", "self_bleu_diversity,", "mean_perplexity,",
        "repetition_4gram,", "mean_length,", "mean_entropy,"})
    CHECK(csv.find(metric) != std::string::npos);
  CHECK(line_count(csv) == 12);  // header + 11 metrics

  const std::string samples = slurp(pe.samples_csv);
  CHECK(samples.rfind("prompt,expression,answer,sample,correct,length,response\n",
                      0) == 0);
  CHECK(line_count(samples) == 1 + 3 * 3);  // 3 prompts x 3 samples

  // An essentially untrained policy on a 16-way vocabulary should be near
  // the floor; the seed is fixed so this cannot flake.
  const auto at = csv.find("pass@1,");
  CHECK(std::stod(csv.substr(at + 7)) <= 0.5);

  CHECK(slurp(cmd_eval(cfg, e2.path).eval_csv) == csv);
}

TEST_CASE("cmd_eval: requires a checkpoint") {
  CHECK_THROWS_AS(cmd_eval(desk_config(), "/tmp/i2b_test_run_nock"), usage_error);
  std::filesystem::remove_all("/tmp/i2b_test_run_nock");
}

TEST_CASE("cmd_probe_heads: one row per head on the probed layer") {
  TempDir t("/tmp/i2b_test_run_pt"), p("/tmp/i2b_test_run_pp");
  const RunPaths pt = cmd_train(desk_config(), "grpo_only", t.path);

  RunConfig cfg = desk_config();
  cfg.checkpoint = pt.checkpoint;
  const RunPaths pp = cmd_probe_heads(cfg, p.path);
  const std::string csv = slurp(pp.heads_csv);
  CHECK(csv.rfind("layer,head,s_hard,s_easy,delta\n", 0) == 0);
  CHECK(line_count(csv) == 1 + 2);  // n_heads rows
  // Default probe layer is the last one.
  CHECK(csv.find("\n1,0,") != std::string::npos);
  CHECK(csv.find("\n1,1,") != std::string::npos);

  CHECK_THROWS_AS(cmd_probe_heads(desk_config(), "/tmp/i2b_test_run_np"),
                  usage_error);
  std::filesystem::remove_all("/tmp/i2b_test_run_np");
}

TEST_SUITE_END();
