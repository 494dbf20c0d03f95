#include "i2b/grpo.hpp"

#include <chrono>
#include <cmath>

#include "i2b/threading.hpp"

namespace i2b {

void TrainConfig::validate() const {
  if (M < 2) throw contract_error("train config: M must be >= 2 to form advantage groups");
  if (K < 0) throw contract_error("train config: K must be nonnegative");
  if (N < 2 || N > M * (K + 1))
    throw contract_error("train config: N must lie in [2, M*(K+1)]");
  if (eps_low <= 0.0 || eps_high <= 0.0)
    throw contract_error("train config: clip ranges must be positive");
  if (lr <= 0.0 || temperature <= 0.0)
    throw contract_error("train config: lr and temperature must be positive");
  if (momentum < 0.0 || momentum >= 1.0)
    throw contract_error("train config: momentum must lie in [0, 1)");
  if (gamma_ib < 0.0 || alpha_ent < 0.0 || cvae_lr < 0.0)
    throw contract_error("train config: objective weights must be nonnegative");
  if (max_new < 1 || batch_prompts < 1 || iterations < 1 || cvae_pairs < 1 || depth_cap < 1)
    throw contract_error("train config: counts must be positive");
  if (history_window < EntropyHistory::kWarmup)
    throw contract_error("train config: history window below the warmup threshold");
}

Optimizer::Optimizer(double lr, double momentum) : lr_(lr), momentum_(momentum) {
  if (lr <= 0.0) throw contract_error("optimizer: lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0)
    throw contract_error("optimizer: momentum must lie in [0, 1)");
}

void Optimizer::step(const std::vector<Tensor*>& tensors) {
  if (velocity_.size() != tensors.size()) {
    velocity_.clear();
    for (const Tensor* t : tensors) velocity_.emplace_back(t->data.size(), 0.0);
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    Tensor& t = *tensors[i];
    t.ensure_grad();
    if (velocity_[i].size() != t.data.size())
      throw contract_error("optimizer: tensor shape changed between steps");
    for (std::size_t j = 0; j < t.data.size(); ++j) {
      velocity_[i][j] = momentum_ * velocity_[i][j] + t.grad[j];
      t.data[j] -= lr_ * velocity_[i][j];
    }
  }
}

std::vector<double> group_advantages(const std::vector<double>& rewards) {
  const std::size_t n = rewards.size();
  if (n < 2) throw contract_error("group_advantages: group size must be >= 2");
  double mean = 0.0, lo = rewards[0], hi = rewards[0];
  for (double r : rewards) {
    mean += r;
    lo = std::min(lo, r);
    hi = std::max(hi, r);
  }
  mean /= static_cast<double>(n);
  if (lo == hi) return std::vector<double>(n, 0.0);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double std_dev = std::sqrt(var / static_cast<double>(n));
  std::vector<double> adv(n);
  for (std::size_t i = 0; i < n; ++i) adv[i] = (rewards[i] - mean) / (std_dev + 1e-8);
  return adv;
}

double clipped_surrogate(const std::vector<std::vector<double>>& new_logprobs,
                         const std::vector<std::vector<double>>& old_logprobs,
                         const std::vector<double>& advantages, double eps_low,
                         double eps_high) {
  if (new_logprobs.size() != old_logprobs.size() ||
      new_logprobs.size() != advantages.size())
    throw contract_error("clipped_surrogate: trajectory counts disagree");
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < new_logprobs.size(); ++i) {
    if (new_logprobs[i].size() != old_logprobs[i].size())
      throw contract_error("clipped_surrogate: token shapes disagree");
    const double A = advantages[i];
    for (std::size_t t = 0; t < new_logprobs[i].size(); ++t) {
      const double rho = std::exp(new_logprobs[i][t] - old_logprobs[i][t]);
      const double clipped = std::clamp(rho, 1.0 - eps_low, 1.0 + eps_high);
      total += std::min(rho * A, clipped * A);
      ++tokens;
    }
  }
  if (tokens == 0) throw contract_error("clipped_surrogate: no tokens");
  return -total / static_cast<double>(tokens);
}

UpdateReport train_step(const std::vector<Problem>& prompts, PolicyParams& params,
                        CvaeParams& cvae, EntropyHistory& history, Optimizer& opt,
                        const TrainConfig& cfg, int iteration, Rng& rng) {
  cfg.validate();
  if (prompts.empty()) throw contract_error("train_step: empty prompt batch");
  const auto t0 = std::chrono::steady_clock::now();
  UpdateReport rep;
  rep.iteration = iteration;
  const int P = static_cast<int>(prompts.size());

  // Phase 1: plain base rollouts against the frozen snapshot, with rewards.
  std::vector<std::vector<Trajectory>> bases(P);
  parallel_for(P, [&](int p) {
    bases[p].reserve(cfg.M);
    for (int m = 0; m < cfg.M; ++m) {
      Rng r = rng.fork("rollout", iteration, p, m);
      Trajectory t = sample_rollout(prompts[p].prompt_tokens, params, InjectionState::none(),
                                    cfg.temperature, cfg.max_new, r, tok::kEos);
      t.prompt_id = p;
      t.id = m;
      t.reward = verify(prompts[p], tok::decode(t.response_tokens)).reward;
      t.has_reward = true;
      bases[p].push_back(std::move(t));
    }
  });

  {
    double pass_sum = 0.0, len_sum = 0.0, ent_sum = 0.0;
    std::size_t ent_n = 0;
    for (const auto& group : bases)
      for (const Trajectory& t : group) {
        pass_sum += t.reward;
        len_sum += t.T();
        for (double h : t.entropies) ent_sum += h, ++ent_n;
      }
    const double nb = static_cast<double>(P) * cfg.M;
    rep.pass1 = pass_sum / nb;
    rep.mean_len = len_sum / nb;
    rep.mean_entropy = ent_n ? ent_sum / static_cast<double>(ent_n) : 0.0;
  }

  // Phase 2: the history absorbs every observed entropy, kept or not.
  for (const auto& group : bases)
    for (const Trajectory& t : group) history.push_all(t.entropies);

  // Phase 3: branch expansion. A cold history falls back to K=0 for this
  // iteration rather than failing the step.
  rep.branch_skipped_cold = cfg.K > 0 && !history.warm();
  const int K_eff = (cfg.K > 0 && history.warm()) ? cfg.K : 0;

  BranchRules rules;
  rules.temperature = cfg.temperature;
  rules.max_new = cfg.max_new;
  rules.eos_id = tok::kEos;
  rules.mode = cfg.injection;
  rules.depth_cap = cfg.depth_cap;

  std::vector<BranchSet> sets(P);
  for (int p = 0; p < P; ++p) {
    Rng er = rng.fork("expand", iteration, p);
    sets[p] = expand(bases[p], K_eff, cvae, params, history, rules, er);
  }

  for (int p = 0; p < P; ++p) {
    BranchSet& set = sets[p];
    parallel_for(static_cast<int>(set.trajectories.size()), [&](int i) {
      Trajectory& t = set.trajectories[i];
      if (t.has_reward) return;  // bases came scored
      t.reward = verify(prompts[p], tok::decode(t.response_tokens)).reward;
      t.has_reward = true;
    });
    // only freshly generated tokens feed the history; inherited prefixes
    // were recorded when the parent sampled them
    for (std::size_t i = cfg.M; i < set.trajectories.size(); ++i) {
      const Trajectory& t = set.trajectories[i];
      for (int k = t.inherited; k < t.T(); ++k) history.push(t.entropies[k]);
    }
  }

  {
    double pool_sum = 0.0;
    int pool_n = 0;
    for (const auto& set : sets)
      for (const Trajectory& t : set.trajectories) pool_sum += t.reward, ++pool_n;
    rep.pool_size = pool_n;
    rep.mean_reward = pool_sum / static_cast<double>(pool_n);
  }

  // Phase 4: pool advantages per prompt — the IB score needs them.
  for (BranchSet& set : sets) {
    std::vector<double> rewards;
    rewards.reserve(set.trajectories.size());
    for (const Trajectory& t : set.trajectories) rewards.push_back(t.reward);
    const auto adv = group_advantages(rewards);
    for (std::size_t i = 0; i < adv.size(); ++i) set.trajectories[i].advantage = adv[i];
  }

  // Phase 5: IB pruning to the per-prompt retained set R*.
  const int N_eff = std::min(cfg.N, cfg.M * (K_eff + 1));
  std::vector<Trajectory> retained;
  std::vector<int> retained_prompt;
  double ib_mean_sum = 0.0;
  for (int p = 0; p < P; ++p) {
    auto kept = prune(sets[p], N_eff, cfg.ib_sum);
    for (Trajectory& t : kept) {
      ib_mean_sum += ib_score(t, cfg.ib_sum).value;
      retained_prompt.push_back(p);
      retained.push_back(std::move(t));
    }
  }
  rep.retained = static_cast<int>(retained.size());
  rep.ib_mean = ib_mean_sum / static_cast<double>(retained.size());

  // Phase 6: group advantages are recomputed over R* (the actual training
  // data) unless the ablation toggle keeps the pool-level ones.
  if (!cfg.adv_before_prune) {
    for (int p = 0; p < P; ++p) {
      std::vector<double> rewards;
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < retained.size(); ++i)
        if (retained_prompt[i] == p) {
          rewards.push_back(retained[i].reward);
          idx.push_back(i);
        }
      const auto adv = group_advantages(rewards);
      for (std::size_t j = 0; j < idx.size(); ++j) retained[idx[j]].advantage = adv[j];
    }
  }

  // Phase 7: one combined-objective gradient step,
  // J = J_GRPO + gamma_ib * S_IB (+ alpha_ent * H-bonus in entropy_reg).
  params.zero_grads();
  std::size_t n_tokens = 0;
  for (const Trajectory& t : retained) n_tokens += t.T();
  const double inv_tokens = 1.0 / static_cast<double>(n_tokens);
  const double inv_retained = 1.0 / static_cast<double>(retained.size());
  const bool use_ib = cfg.gamma_ib != 0.0;
  const bool use_ent = cfg.alpha_ent != 0.0;
  double surr_total = 0.0, sib_total = 0.0, ent_total = 0.0;

  for (const Trajectory& t : retained) {
    Tape tape(true);
    const ForwardResult fr =
        forward_on_tape(tape, t.full_tokens(), params, t.training_injection());
    const std::size_t p0 = t.prompt_tokens.size();
    const int T = t.T();
    std::vector<std::pair<int, int>> coords;
    coords.reserve(T);
    for (int i = 0; i < T; ++i)
      coords.emplace_back(static_cast<int>(p0) - 1 + i, t.response_tokens[i]);
    const Tape::Ref new_lp = tape.pick(tape.row_log_softmax(fr.logits), coords);
    const Tape::Ref old_lp = tape.constant(1, T, t.logprobs);
    const Tape::Ref ratio = tape.exp_elem(tape.sub(new_lp, old_lp));
    const double A = *t.advantage;
    const Tape::Ref term = tape.min_elem(
        tape.scale(ratio, A),
        tape.scale(tape.clamp(ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high), A));
    const Tape::Ref surr = tape.scale(tape.sum(term), inv_tokens);
    Tape::Ref objective = surr;

    Tape::Ref h_col = -1;
    if (use_ib || use_ent)
      h_col = tape.slice_rows(tape.row_entropy(fr.logits), p0 - 1, p0 - 1 + T);
    Tape::Ref ib_node = -1, ent_node = -1;
    if (use_ib) {
      const double w = (cfg.ib_sum ? A : A / static_cast<double>(T)) * inv_retained;
      ib_node = tape.scale(tape.sum(h_col), w);
      objective = tape.add(objective, tape.scale(ib_node, cfg.gamma_ib));
    }
    if (use_ent) {
      ent_node = tape.scale(tape.sum(h_col), inv_tokens);
      objective = tape.add(objective, tape.scale(ent_node, cfg.alpha_ent));
    }
    tape.backward(tape.scale(objective, -1.0));  // descend the negated objective
    surr_total += tape.scalar(surr);
    if (use_ib) sib_total += tape.scalar(ib_node);
    if (use_ent) ent_total += tape.scalar(ent_node);
  }

  rep.surrogate_obj = surr_total;
  rep.ib_term = cfg.gamma_ib * sib_total;
  rep.entropy_term = cfg.alpha_ent * ent_total;
  rep.total_objective = (surr_total + rep.ib_term) + rep.entropy_term;
  rep.loss = -rep.total_objective;
  rep.grad_norm = grad_norm(params.all_tensors());
  if (!std::isfinite(rep.grad_norm) || !std::isfinite(rep.loss))
    throw numeric_error("train_step: non-finite loss or gradient");
  opt.step(params.all_tensors());
  ++params.version;

  // Phase 8: CVAE update on this iteration's branch pairs (decoupled from
  // the policy step; the backbone stays frozen here).
  if (K_eff > 0 && cfg.cvae_lr > 0.0) {
    std::vector<CvaePair> pairs;
    for (const BranchSet& set : sets) {
      for (const Trajectory& t : set.trajectories) {
        if (!t.is_branch() || t.new_tokens() < 1) continue;
        if (static_cast<int>(pairs.size()) >= cfg.cvae_pairs) break;
        CvaePair pair;
        pair.context = t.prompt_tokens;
        pair.context.insert(pair.context.end(), t.response_tokens.begin(),
                            t.response_tokens.begin() + t.inherited);
        pair.continuation.assign(t.response_tokens.begin() + t.inherited,
                                 t.response_tokens.end());
        pairs.push_back(std::move(pair));
      }
    }
    if (!pairs.empty()) {
      const auto trainable = elbo_trainable(cvae, params);
      for (Tensor* t : trainable) t->zero_grad();
      Rng er = rng.fork("elbo", iteration);
      const ElboReport erep = elbo_step(pairs, cvae, params, cfg.injection, er);
      for (Tensor* t : trainable)
        for (std::size_t j = 0; j < t->data.size(); ++j)
          t->data[j] -= cfg.cvae_lr * t->grad[j];
      rep.elbo_loss = erep.loss;
    }
  }

  rep.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace i2b
