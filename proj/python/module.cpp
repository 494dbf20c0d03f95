#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>
#include <vector>

#include "i2b/branching.hpp"
#include "i2b/checkpoint.hpp"
#include "i2b/config.hpp"
#include "i2b/errors.hpp"
#include "i2b/grpo.hpp"
#include "i2b/head_probe.hpp"
#include "i2b/ib.hpp"
#include "i2b/metrics.hpp"
#include "i2b/model.hpp"
#include "i2b/run.hpp"
#include "i2b/tasks.hpp"

namespace py = pybind11;
using namespace i2b;

PYBIND11_MODULE(_i2b, m) {
  m.doc() = "Latent-branching GRPO trainer with information-bottleneck pruning "
            "over verifiable arithmetic tasks";

  // Register the base first so the more specific translator wins.
  py::register_exception<error>(m, "Error");
  py::register_exception<usage_error>(m, "UsageError");

  // --- tokenizer ---------------------------------------------------------
  m.attr("EOS") = tok::kEos;
  m.attr("VOCAB") = tok::kVocab;
  m.def("encode", &tok::encode, py::arg("text"),
        "Character-level token ids over the arithmetic alphabet");
  m.def("decode", &tok::decode, py::arg("ids"));

  // --- rng ----------------------------------------------------------------
  py::class_<Rng>(m, "Rng")
      .def(py::init<std::uint64_t>(), py::arg("seed"))
      .def("seed", &Rng::seed)
      .def("fork", &Rng::fork, py::arg("tag"), py::arg("a") = 0, py::arg("b") = 0,
           py::arg("c") = 0)
      .def("uniform", &Rng::uniform)
      .def("uniform_int", &Rng::uniform_int, py::arg("lo"), py::arg("hi"))
      .def("normal", &Rng::normal);

  // --- model --------------------------------------------------------------
  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("vocab_size", &ModelConfig::vocab_size)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("n_layers", &ModelConfig::n_layers)
      .def_readwrite("n_heads", &ModelConfig::n_heads)
      .def_readwrite("d_head", &ModelConfig::d_head)
      .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
      .def_readwrite("d_z", &ModelConfig::d_z)
      .def_readwrite("psa_layers", &ModelConfig::psa_layers)
      .def_readwrite("decay_horizon", &ModelConfig::decay_horizon)
      .def("effective_psa_layers", &ModelConfig::effective_psa_layers)
      .def("validate", &ModelConfig::validate);

  py::class_<PolicyParams>(m, "PolicyParams")
      .def_static("init", &PolicyParams::init, py::arg("cfg"), py::arg("rng"))
      .def_readonly("cfg", &PolicyParams::cfg)
      .def_readonly("version", &PolicyParams::version);

  py::class_<CvaeParams>(m, "CvaeParams")
      .def_static("init", &CvaeParams::init, py::arg("cfg"), py::arg("width"),
                  py::arg("rng"))
      .def_readonly("d_z", &CvaeParams::d_z)
      .def_readonly("width", &CvaeParams::width);

  m.def("gamma_decay", &gamma_decay, py::arg("t"), py::arg("horizon"),
        "Injection-strength schedule: 5e-2 decaying to its 5e-4 floor");
  m.def("token_entropy", &token_entropy, py::arg("logits_row"));

  // --- tasks ---------------------------------------------------------------
  py::class_<Problem>(m, "Problem")
      .def(py::init<>())
      .def_readwrite("expression", &Problem::expression)
      .def_readwrite("answer", &Problem::answer)
      .def_readwrite("difficulty", &Problem::difficulty)
      .def_readwrite("prompt_tokens", &Problem::prompt_tokens)
      .def("prompt_text", &Problem::prompt_text)
      .def("__repr__", [](const Problem& p) {
        return "<Problem " + p.expression + "=" + p.answer + ">";
      });

  py::class_<VerifyResult>(m, "VerifyResult")
      .def_readonly("reward", &VerifyResult::reward)
      .def_readonly("parse_ok", &VerifyResult::parse_ok);

  m.def("generate_problem", &generate_problem, py::arg("difficulty"), py::arg("rng"));
  m.def("verify", &verify, py::arg("problem"), py::arg("generated_text"));
  m.def("filter_dataset", &filter_dataset, py::arg("problems"), py::arg("params"),
        py::arg("n_probe"), py::arg("max_new"), py::arg("rng"),
        py::call_guard<py::gil_scoped_release>());
  m.def("save_problems", &save_problems, py::arg("path"), py::arg("problems"));
  m.def("load_problems", &load_problems, py::arg("path"));
  m.def("make_problem_set", &make_problem_set, py::arg("count"),
        py::arg("difficulty_min"), py::arg("difficulty_max"),
        py::arg("max_answer_len"), py::arg("rng"));

  // --- rollouts -------------------------------------------------------------
  py::class_<Trajectory>(m, "Trajectory")
      .def_readonly("prompt_id", &Trajectory::prompt_id)
      .def_readonly("prompt_tokens", &Trajectory::prompt_tokens)
      .def_readonly("response_tokens", &Trajectory::response_tokens)
      .def_readonly("logprobs", &Trajectory::logprobs)
      .def_readonly("entropies", &Trajectory::entropies)
      .def_readonly("reward", &Trajectory::reward)
      .def_readonly("has_reward", &Trajectory::has_reward)
      .def_readonly("advantage", &Trajectory::advantage)
      .def_readonly("id", &Trajectory::id)
      .def_readonly("parent_id", &Trajectory::parent_id)
      .def_readonly("branch_t_star", &Trajectory::branch_t_star)
      .def_readonly("latent_draw", &Trajectory::latent_draw)
      .def_readonly("branch_depth", &Trajectory::branch_depth)
      .def_readonly("inherited", &Trajectory::inherited)
      .def_readonly("truncated", &Trajectory::truncated)
      .def("T", &Trajectory::T)
      .def("new_tokens", &Trajectory::new_tokens)
      .def("is_branch", &Trajectory::is_branch)
      .def("full_tokens", &Trajectory::full_tokens);

  m.def(
      "sample_rollout",
      [](const std::vector<int>& prompt, PolicyParams& params, double temperature,
         int max_new, Rng& rng) {
        return sample_rollout(prompt, params, InjectionState::none(), temperature,
                              max_new, rng, tok::kEos);
      },
      py::arg("prompt"), py::arg("params"), py::arg("temperature"),
      py::arg("max_new"), py::arg("rng"),
      "Plain autoregressive sampling (no latent injection)");

  // --- training --------------------------------------------------------------
  py::enum_<BaselineMode>(m, "BaselineMode")
      .value("grpo_only", BaselineMode::grpo_only)
      .value("entropy_reg", BaselineMode::entropy_reg)
      .value("i2b", BaselineMode::i2b);

  py::enum_<InjectionMode>(m, "InjectionMode")
      .value("none", InjectionMode::none)
      .value("psa", InjectionMode::psa)
      .value("input_fusion", InjectionMode::input_fusion)
      .value("logit_fusion", InjectionMode::logit_fusion);

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("M", &TrainConfig::M)
      .def_readwrite("K", &TrainConfig::K)
      .def_readwrite("N", &TrainConfig::N)
      .def_readwrite("gamma_ib", &TrainConfig::gamma_ib)
      .def_readwrite("beta_ib", &TrainConfig::beta_ib)
      .def_readwrite("eps_low", &TrainConfig::eps_low)
      .def_readwrite("eps_high", &TrainConfig::eps_high)
      .def_readwrite("alpha_ent", &TrainConfig::alpha_ent)
      .def_readwrite("lr", &TrainConfig::lr)
      .def_readwrite("momentum", &TrainConfig::momentum)
      .def_readwrite("cvae_lr", &TrainConfig::cvae_lr)
      .def_readwrite("batch_prompts", &TrainConfig::batch_prompts)
      .def_readwrite("max_new", &TrainConfig::max_new)
      .def_readwrite("temperature", &TrainConfig::temperature)
      .def_readwrite("history_window", &TrainConfig::history_window)
      .def_readwrite("iterations", &TrainConfig::iterations)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("mode", &TrainConfig::mode)
      .def_readwrite("injection", &TrainConfig::injection)
      .def_readwrite("depth_cap", &TrainConfig::depth_cap)
      .def_readwrite("cvae_pairs", &TrainConfig::cvae_pairs)
      .def_readwrite("adv_before_prune", &TrainConfig::adv_before_prune)
      .def_readwrite("ib_sum", &TrainConfig::ib_sum)
      .def("validate", &TrainConfig::validate);

  py::class_<UpdateReport>(m, "UpdateReport")
      .def_readonly("iteration", &UpdateReport::iteration)
      .def_readonly("mean_reward", &UpdateReport::mean_reward)
      .def_readonly("pass1", &UpdateReport::pass1)
      .def_readonly("mean_entropy", &UpdateReport::mean_entropy)
      .def_readonly("mean_len", &UpdateReport::mean_len)
      .def_readonly("ib_mean", &UpdateReport::ib_mean)
      .def_readonly("total_objective", &UpdateReport::total_objective)
      .def_readonly("surrogate_obj", &UpdateReport::surrogate_obj)
      .def_readonly("ib_term", &UpdateReport::ib_term)
      .def_readonly("entropy_term", &UpdateReport::entropy_term)
      .def_readonly("loss", &UpdateReport::loss)
      .def_readonly("grad_norm", &UpdateReport::grad_norm)
      .def_readonly("elbo_loss", &UpdateReport::elbo_loss)
      .def_readonly("seconds", &UpdateReport::seconds)
      .def_readonly("pool_size", &UpdateReport::pool_size)
      .def_readonly("retained", &UpdateReport::retained)
      .def_readonly("branch_skipped_cold", &UpdateReport::branch_skipped_cold);

  py::class_<EntropyHistory>(m, "EntropyHistory")
      .def(py::init<std::size_t>(), py::arg("capacity") = 50000)
      .def("push", &EntropyHistory::push)
      .def("push_all", &EntropyHistory::push_all)
      .def("size", &EntropyHistory::size)
      .def("warm", &EntropyHistory::warm)
      .def("tau", &EntropyHistory::tau);

  py::class_<Optimizer>(m, "Optimizer")
      .def(py::init<double, double>(), py::arg("lr"), py::arg("momentum") = 0.0);

  m.def("group_advantages", &group_advantages, py::arg("rewards"));
  m.def("train_step", &train_step, py::arg("prompts"), py::arg("params"),
        py::arg("cvae"), py::arg("history"), py::arg("opt"), py::arg("cfg"),
        py::arg("iteration"), py::arg("rng"),
        py::call_guard<py::gil_scoped_release>(),
        "One full GRPO iteration: rollouts, branching, IB pruning, update");

  // --- metrics -----------------------------------------------------------------
  m.def("pass_at_k", &pass_at_k, py::arg("flags"), py::arg("k"));
  m.def("distinct_n", &distinct_n, py::arg("texts"), py::arg("n"));
  m.def("bleu", &bleu, py::arg("candidate"), py::arg("references"));
  m.def("self_bleu_diversity", &self_bleu_diversity, py::arg("texts"));
  m.def("perplexity", &perplexity, py::arg("logprobs"));
  m.def("ngram_repetition", &ngram_repetition, py::arg("text"), py::arg("n") = 4);

  py::class_<PromptSamples>(m, "PromptSamples")
      .def(py::init<>())
      .def_readwrite("responses", &PromptSamples::responses)
      .def_readwrite("correct", &PromptSamples::correct)
      .def_readwrite("logprobs", &PromptSamples::logprobs)
      .def_readwrite("entropies", &PromptSamples::entropies);

  py::class_<EvalReport>(m, "EvalReport")
      .def_readonly("pass_at", &EvalReport::pass_at)
      .def_readonly("distinct", &EvalReport::distinct)
      .def_readonly("self_bleu_diversity", &EvalReport::self_bleu_diversity)
      .def_readonly("mean_perplexity", &EvalReport::mean_perplexity)
      .def_readonly("repetition_4gram", &EvalReport::repetition_4gram)
      .def_readonly("mean_length", &EvalReport::mean_length)
      .def_readonly("mean_entropy", &EvalReport::mean_entropy);

  m.def("evaluate", &evaluate, py::arg("prompts"), py::arg("k_list"));

  // --- head probing -----------------------------------------------------------
  py::class_<ProbeConfig>(m, "ProbeConfig")
      .def(py::init<>())
      .def_readwrite("layer", &ProbeConfig::layer)
      .def_readwrite("bootstrap_draws", &ProbeConfig::bootstrap_draws)
      .def_readwrite("seed", &ProbeConfig::seed);

  py::class_<HeadAttribution>(m, "HeadAttribution")
      .def_readonly("layer", &HeadAttribution::layer)
      .def_readonly("head", &HeadAttribution::head)
      .def_readonly("s_hard", &HeadAttribution::s_hard)
      .def_readonly("s_easy", &HeadAttribution::s_easy)
      .def_readonly("delta", &HeadAttribution::delta)
      .def_readonly("bootstrap_se", &HeadAttribution::bootstrap_se);

  m.def("differentiation_scores", &differentiation_scores, py::arg("params"),
        py::arg("hard"), py::arg("easy"), py::arg("cfg") = ProbeConfig{},
        py::call_guard<py::gil_scoped_release>());

  // --- checkpoints -------------------------------------------------------------
  py::class_<Checkpoint>(m, "Checkpoint")
      .def_readonly("policy", &Checkpoint::policy)
      .def_readonly("cvae", &Checkpoint::cvae);

  m.def("save_checkpoint", &save_checkpoint, py::arg("path"), py::arg("policy"),
        py::arg("cvae"));
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));
  m.def("file_content_hash", &file_content_hash, py::arg("path"));

  // --- configs and runs ----------------------------------------------------------
  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_readwrite("model", &RunConfig::model)
      .def_readwrite("train", &RunConfig::train)
      .def_readwrite("cvae_width", &RunConfig::cvae_width)
      .def_readwrite("n_problems", &RunConfig::n_problems)
      .def_readwrite("difficulty_min", &RunConfig::difficulty_min)
      .def_readwrite("difficulty_max", &RunConfig::difficulty_max)
      .def_readwrite("max_answer_len", &RunConfig::max_answer_len)
      .def_readwrite("data_seed", &RunConfig::data_seed)
      .def_readwrite("problems_file", &RunConfig::problems_file)
      .def_readwrite("eval_n", &RunConfig::eval_n)
      .def_readwrite("eval_k", &RunConfig::eval_k)
      .def_readwrite("eval_n_problems", &RunConfig::eval_n_problems)
      .def_readwrite("eval_seed", &RunConfig::eval_seed)
      .def_readwrite("probe_layer", &RunConfig::probe_layer)
      .def_readwrite("probe_bootstrap", &RunConfig::probe_bootstrap)
      .def_readwrite("probe_cohort", &RunConfig::probe_cohort)
      .def_readwrite("probe_easy_max", &RunConfig::probe_easy_max)
      .def_readwrite("probe_hard_min", &RunConfig::probe_hard_min)
      .def_readwrite("probe_seed", &RunConfig::probe_seed)
      .def_readwrite("mode", &RunConfig::mode)
      .def_readwrite("checkpoint", &RunConfig::checkpoint)
      .def_readwrite("checkpoint_hash", &RunConfig::checkpoint_hash)
      .def_readwrite("deterministic_timing", &RunConfig::deterministic_timing)
      .def("validate", &RunConfig::validate);

  m.def("parse_config", &parse_config, py::arg("text"));
  m.def("load_config", &load_config, py::arg("path"));
  m.def("config_text", &config_text, py::arg("cfg"));
  m.def("apply_mode_preset", &apply_mode_preset, py::arg("cfg"), py::arg("mode"));

  py::class_<RunPaths>(m, "RunPaths")
      .def_readonly("dir", &RunPaths::dir)
      .def_readonly("manifest", &RunPaths::manifest)
      .def_readonly("train_csv", &RunPaths::train_csv)
      .def_readonly("eval_csv", &RunPaths::eval_csv)
      .def_readonly("samples_csv", &RunPaths::samples_csv)
      .def_readonly("heads_csv", &RunPaths::heads_csv)
      .def_readonly("checkpoint", &RunPaths::checkpoint)
      .def_readonly("timing", &RunPaths::timing);

  py::class_<EvalOutcome>(m, "EvalOutcome")
      .def_readonly("problems", &EvalOutcome::problems)
      .def_readonly("prompts", &EvalOutcome::prompts)
      .def_readonly("report", &EvalOutcome::report);

  m.def("cmd_train", &cmd_train, py::arg("cfg"), py::arg("mode"),
        py::arg("out_dir") = std::string(),
        py::call_guard<py::gil_scoped_release>(),
        "Train one mode end to end and write a run directory");
  m.def("run_eval", &run_eval, py::arg("cfg"), py::arg("ckpt"),
        py::call_guard<py::gil_scoped_release>());
  m.def("cmd_eval", &cmd_eval, py::arg("cfg"), py::arg("out_dir") = std::string(),
        py::call_guard<py::gil_scoped_release>());
  m.def("cmd_probe_heads", &cmd_probe_heads, py::arg("cfg"),
        py::arg("out_dir") = std::string(),
        py::call_guard<py::gil_scoped_release>());
}
