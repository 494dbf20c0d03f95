#include "i2b/run.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "i2b/branching.hpp"
#include "i2b/errors.hpp"
#include "i2b/grpo.hpp"
#include "i2b/head_probe.hpp"
#include "i2b/threading.hpp"

namespace i2b {

namespace {

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string fmt_hash(std::uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void require_finite(double v, const char* what) {
  if (!std::isfinite(v))
    throw numeric_error(std::string("run: non-finite value for ") + what);
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw usage_error("run: cannot open for writing: " + path);
  out << content;
  out.flush();
  if (!out) throw usage_error("run: write failed: " + path);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw usage_error("run: cannot create directory " + dir + ": " + ec.message());
}

std::string utc_stamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm_utc{};
  gmtime_r(&now, &tm_utc);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm_utc);
  return buf;
}

// runs/<timestamp>-<tag>-<seed>, suffixed -2, -3, ... if a same-second run
// already claimed the name.
std::string default_run_dir(const std::string& tag, std::uint64_t seed) {
  const std::string base = "runs/" + utc_stamp() + "-" + tag + "-" + std::to_string(seed);
  std::string dir = base;
  for (int n = 2; std::filesystem::exists(dir); ++n) dir = base + "-" + std::to_string(n);
  return dir;
}

// Loads cfg.checkpoint and folds the stored shapes back into cfg so the
// manifest describes the parameters actually used.
Checkpoint adopt_checkpoint(RunConfig& cfg) {
  Checkpoint ckpt = load_checkpoint(cfg.checkpoint);
  cfg.model = ckpt.policy.cfg;
  cfg.cvae_width = ckpt.cvae.width;
  cfg.checkpoint_hash = fmt_hash(file_content_hash(cfg.checkpoint));
  return ckpt;
}

}  // namespace

RunPaths RunPaths::under(const std::string& dir) {
  RunPaths p;
  p.dir = dir;
  p.manifest = dir + "/manifest.txt";
  p.train_csv = dir + "/train.csv";
  p.eval_csv = dir + "/eval.csv";
  p.samples_csv = dir + "/eval_samples.csv";
  p.heads_csv = dir + "/heads.csv";
  p.checkpoint = dir + "/checkpoint.bin";
  p.timing = dir + "/timing.txt";
  return p;
}

std::vector<Problem> make_problem_set(int count, int difficulty_min,
                                      int difficulty_max, int max_answer_len,
                                      Rng& rng) {
  if (count < 1) throw usage_error("make_problem_set: count must be positive");
  if (difficulty_min < 1 || difficulty_max > 9 || difficulty_min > difficulty_max)
    throw usage_error("make_problem_set: difficulty range must satisfy 1 <= min <= max <= 9");
  std::vector<Problem> out;
  out.reserve(static_cast<std::size_t>(count));
  int difficulty = difficulty_min;
  int rejected = 0;
  while (static_cast<int>(out.size()) < count) {
    Problem p = generate_problem(difficulty, rng);
    if (max_answer_len > 0 && static_cast<int>(p.answer.size()) > max_answer_len) {
      if (++rejected >= 100000)
        throw usage_error("make_problem_set: answer-length cap rejected 100000 draws in a row; "
                          "raise max_answer_len or lower the difficulty range");
      continue;
    }
    rejected = 0;
    out.push_back(std::move(p));
    difficulty = difficulty == difficulty_max ? difficulty_min : difficulty + 1;
  }
  return out;
}

RunPaths cmd_train(RunConfig cfg, const std::string& mode, std::string out_dir) {
  apply_mode_preset(cfg, mode);
  cfg.validate();

  std::vector<Problem> problems;
  if (!cfg.problems_file.empty()) {
    problems = load_problems(cfg.problems_file);
    if (problems.empty()) throw usage_error("train: " + cfg.problems_file + " holds no problems");
  } else {
    Rng data_rng(cfg.data_seed);
    problems = make_problem_set(cfg.n_problems, cfg.difficulty_min, cfg.difficulty_max,
                                cfg.max_answer_len, data_rng);
  }

  Rng root(cfg.train.seed);
  PolicyParams params;
  CvaeParams cvae;
  if (!cfg.checkpoint.empty()) {
    Checkpoint ckpt = adopt_checkpoint(cfg);
    params = std::move(ckpt.policy);
    cvae = std::move(ckpt.cvae);
  } else {
    Rng policy_rng = root.fork("policy_init");
    params = PolicyParams::init(cfg.model, policy_rng);
    Rng cvae_rng = root.fork("cvae_init");
    cvae = CvaeParams::init(cfg.model, cfg.cvae_width, cvae_rng);
  }

  if (out_dir.empty()) out_dir = default_run_dir(cfg.mode, cfg.train.seed);
  ensure_dir(out_dir);
  const RunPaths paths = RunPaths::under(out_dir);
  write_text(paths.manifest, config_text(cfg));

  std::ofstream csv(paths.train_csv, std::ios::binary);
  if (!csv) throw usage_error("run: cannot open for writing: " + paths.train_csv);
  csv << "iter,mean_reward,pass1,mean_entropy,mean_len,ib_mean,loss,grad_norm,seconds\n";

  EntropyHistory history(static_cast<std::size_t>(cfg.train.history_window));
  Optimizer opt(cfg.train.lr, cfg.train.momentum);
  Rng train_rng = root.fork("train_loop");
  const int n_problems = static_cast<int>(problems.size());
  double total_seconds = 0.0;

  for (int it = 0; it < cfg.train.iterations; ++it) {
    Rng batch_rng = train_rng.fork("batch", static_cast<std::uint64_t>(it));
    std::vector<Problem> batch;
    batch.reserve(static_cast<std::size_t>(cfg.train.batch_prompts));
    for (int b = 0; b < cfg.train.batch_prompts; ++b)
      batch.push_back(problems[batch_rng.uniform_int(0, n_problems - 1)]);

    const UpdateReport rep =
        train_step(batch, params, cvae, history, opt, cfg.train, it, train_rng);
    total_seconds += rep.seconds;

    const double row[] = {rep.mean_reward, rep.pass1,    rep.mean_entropy,
                          rep.mean_len,    rep.ib_mean,  rep.loss,
                          rep.grad_norm};
    for (double v : row) require_finite(v, "train.csv");
    const double seconds = cfg.deterministic_timing ? 0.0 : rep.seconds;
    csv << it << ',' << fmt_g(rep.mean_reward) << ',' << fmt_g(rep.pass1) << ','
        << fmt_g(rep.mean_entropy) << ',' << fmt_g(rep.mean_len) << ','
        << fmt_g(rep.ib_mean) << ',' << fmt_g(rep.loss) << ','
        << fmt_g(rep.grad_norm) << ',' << fmt_g(seconds) << '\n';
  }
  csv.flush();
  if (!csv) throw usage_error("run: write failed: " + paths.train_csv);
  csv.close();

  save_checkpoint(paths.checkpoint, params, cvae);
  write_text(paths.timing, "iterations = " + std::to_string(cfg.train.iterations) +
                               "\ntotal_seconds = " + fmt_g(total_seconds) +
                               "\nmean_step_seconds = " +
                               fmt_g(cfg.train.iterations > 0
                                         ? total_seconds / cfg.train.iterations
                                         : 0.0) +
                               "\n");
  return paths;
}

EvalOutcome run_eval(const RunConfig& cfg, Checkpoint& ckpt) {
  EvalOutcome out;
  Rng eval_root(cfg.eval_seed);
  Rng problem_rng = eval_root.fork("problems");
  out.problems = make_problem_set(cfg.eval_n_problems, cfg.difficulty_min,
                                  cfg.difficulty_max, cfg.max_answer_len, problem_rng);

  const int n_prompts = static_cast<int>(out.problems.size());
  out.prompts.resize(static_cast<std::size_t>(n_prompts));
  parallel_for(n_prompts, [&](int p) {
    PromptSamples& ps = out.prompts[static_cast<std::size_t>(p)];
    for (int s = 0; s < cfg.eval_n; ++s) {
      Rng sample_rng = eval_root.fork("sample", static_cast<std::uint64_t>(p),
                                      static_cast<std::uint64_t>(s));
      Trajectory traj = sample_rollout(out.problems[static_cast<std::size_t>(p)].prompt_tokens,
                                       ckpt.policy, InjectionState::none(),
                                       /*temperature=*/1.0, cfg.train.max_new, sample_rng,
                                       tok::kEos);
      const VerifyResult vr =
          verify(out.problems[static_cast<std::size_t>(p)], tok::decode(traj.response_tokens));
      ps.responses.push_back(std::move(traj.response_tokens));
      ps.correct.push_back(vr.reward == 1 ? 1 : 0);
      ps.logprobs.push_back(std::move(traj.logprobs));
      ps.entropies.push_back(std::move(traj.entropies));
    }
  });

  out.report = evaluate(out.prompts, cfg.eval_k);
  return out;
}

RunPaths cmd_eval(RunConfig cfg, std::string out_dir) {
  if (cfg.checkpoint.empty()) throw usage_error("eval: a checkpoint is required");
  Checkpoint ckpt = adopt_checkpoint(cfg);
  cfg.validate();

  const EvalOutcome out = run_eval(cfg, ckpt);

  if (out_dir.empty()) out_dir = default_run_dir("eval", cfg.eval_seed);
  ensure_dir(out_dir);
  const RunPaths paths = RunPaths::under(out_dir);
  write_text(paths.manifest, config_text(cfg));

  std::string csv = "metric,value\n";
  auto put = [&csv](const std::string& name, double v) {
    require_finite(v, "eval.csv");
    csv += name + "," + fmt_g(v) + "\n";
  };
  for (const auto& [k, v] : out.report.pass_at) put("pass@" + std::to_string(k), v);
  for (const auto& [n, v] : out.report.distinct) put("distinct-" + std::to_string(n), v);
  put("self_bleu_diversity", out.report.self_bleu_diversity);
  put("mean_perplexity", out.report.mean_perplexity);
  put("repetition_4gram", out.report.repetition_4gram);
  put("mean_length", out.report.mean_length);
  put("mean_entropy", out.report.mean_entropy);
  write_text(paths.eval_csv, csv);

  std::string samples = "prompt,expression,answer,sample,correct,length,response\n";
  for (std::size_t p = 0; p < out.prompts.size(); ++p) {
    const Problem& prob = out.problems[p];
    const PromptSamples& ps = out.prompts[p];
    for (std::size_t s = 0; s < ps.responses.size(); ++s) {
      samples += std::to_string(p) + "," + prob.expression + "," + prob.answer + "," +
                 std::to_string(s) + "," + std::to_string(int{ps.correct[s]}) + "," +
                 std::to_string(ps.responses[s].size()) + "," +
                 tok::decode(ps.responses[s]) + "\n";
    }
  }
  write_text(paths.samples_csv, samples);
  return paths;
}

RunPaths cmd_probe_heads(RunConfig cfg, std::string out_dir) {
  if (cfg.checkpoint.empty()) throw usage_error("probe-heads: a checkpoint is required");
  Checkpoint ckpt = adopt_checkpoint(cfg);
  cfg.validate();

  Rng root(cfg.probe_seed);
  Rng easy_rng = root.fork("easy");
  Rng hard_rng = root.fork("hard");
  // Cohorts span their whole difficulty band and ignore the training
  // answer-length cap: the probe wants contrast, not the training frontier.
  const std::vector<Problem> easy =
      make_problem_set(cfg.probe_cohort, 1, cfg.probe_easy_max, 0, easy_rng);
  const std::vector<Problem> hard =
      make_problem_set(cfg.probe_cohort, cfg.probe_hard_min, 9, 0, hard_rng);

  ProbeConfig pc;
  pc.layer = cfg.probe_layer;
  pc.bootstrap_draws = cfg.probe_bootstrap;
  pc.seed = root.fork("bootstrap").seed();
  const std::vector<HeadAttribution> rows =
      differentiation_scores(ckpt.policy, hard, easy, pc);

  if (out_dir.empty()) out_dir = default_run_dir("probe", cfg.probe_seed);
  ensure_dir(out_dir);
  const RunPaths paths = RunPaths::under(out_dir);
  write_text(paths.manifest, config_text(cfg));

  std::string csv = "layer,head,s_hard,s_easy,delta\n";
  for (const HeadAttribution& row : rows) {
    require_finite(row.s_hard, "heads.csv");
    require_finite(row.s_easy, "heads.csv");
    require_finite(row.delta, "heads.csv");
    csv += std::to_string(row.layer) + "," + std::to_string(row.head) + "," +
           fmt_g(row.s_hard) + "," + fmt_g(row.s_easy) + "," + fmt_g(row.delta) + "\n";
  }
  write_text(paths.heads_csv, csv);
  return paths;
}

}  // namespace i2b
