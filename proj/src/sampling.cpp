#include <cmath>

#include "i2b/model.hpp"

namespace i2b {

Trajectory sample_rollout(const std::vector<int>& prompt, PolicyParams& params,
                          const InjectionState& injection, double temperature,
                          int max_new, Rng& rng, int eos_id,
                          const std::vector<int>* response_prefix) {
  if (prompt.empty()) throw contract_error("sample_rollout: empty prompt");
  if (temperature <= 0.0) throw contract_error("sample_rollout: temperature must be > 0");
  if (max_new < 1) throw contract_error("sample_rollout: max_new must be >= 1");
  const ModelConfig& cfg = params.cfg;
  if (prompt.size() + 1 > static_cast<std::size_t>(cfg.max_seq_len))
    throw capacity_error("sample_rollout: prompt leaves no room to generate");

  Trajectory traj;
  traj.prompt_tokens = prompt;
  traj.injection = injection;
  if (response_prefix) {
    traj.response_tokens = *response_prefix;
    traj.inherited = static_cast<int>(response_prefix->size());
    if (traj.inherited >= max_new)
      throw contract_error("sample_rollout: inherited prefix exhausts max_new");
  }

  std::vector<int> tokens(prompt);
  tokens.insert(tokens.end(), traj.response_tokens.begin(), traj.response_tokens.end());

  const std::size_t V = cfg.vocab_size;
  InjectionState step_inj = injection;
  bool ended = false;
  bool first_pass = true;
  while (traj.T() < max_new && tokens.size() < static_cast<std::size_t>(cfg.max_seq_len)) {
    step_inj.decay_step = injection.decay_step + traj.new_tokens();
    Tape tape(false);
    const ForwardResult fr = forward_on_tape(tape, tokens, params, step_inj);
    const Tape::Ref logp = tape.row_log_softmax(fr.logits);
    const Tape::Ref ent = tape.row_entropy(fr.logits);

    if (first_pass && traj.inherited > 0) {
      // The inherited tokens' logprobs/entropies under *this* policy and
      // injection come for free from rows of the first forward.
      const std::size_t p0 = prompt.size();
      for (int i = 0; i < traj.inherited; ++i) {
        const std::size_t row = p0 + i - 1;
        traj.logprobs.push_back(tape.val(logp)[row * V + traj.response_tokens[i]]);
        traj.entropies.push_back(tape.val(ent)[row]);
      }
    }
    first_pass = false;

    const std::size_t last = tokens.size() - 1;
    const std::vector<double>& logits_all = tape.val(fr.logits);
    std::vector<double> row(logits_all.begin() + last * V, logits_all.begin() + (last + 1) * V);

    std::vector<double> probs;
    if (temperature == 1.0) {
      probs = softmax(row);
    } else {
      std::vector<double> scaled(row);
      for (double& v : scaled) v /= temperature;
      probs = softmax(scaled);
    }
    const int chosen = rng.categorical(probs.data(), static_cast<int>(V));

    traj.response_tokens.push_back(chosen);
    traj.logprobs.push_back(tape.val(logp)[last * V + chosen]);
    traj.entropies.push_back(tape.val(ent)[last]);
    tokens.push_back(chosen);
    if (chosen == eos_id) {
      ended = true;
      break;
    }
  }
  traj.truncated = !ended;
  return traj;
}

}  // namespace i2b
