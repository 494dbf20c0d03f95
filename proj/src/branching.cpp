#include "i2b/branching.hpp"

#include <algorithm>

#include "i2b/threading.hpp"

namespace i2b {

EntropyHistory::EntropyHistory(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ < static_cast<std::size_t>(kWarmup))
    throw contract_error("entropy history: capacity below the warmup threshold");
  ring_.reserve(capacity_);
}

void EntropyHistory::push(double h) {
  if (!(h >= 0.0)) throw contract_error("entropy history: entropies are nonnegative");
  if (count_ < capacity_) {
    ring_.push_back(h);
    ++count_;
  } else {
    ring_[head_] = h;
  }
  head_ = (head_ + 1) % capacity_;
}

void EntropyHistory::push_all(const std::vector<double>& hs) {
  for (double h : hs) push(h);
}

double EntropyHistory::tau() const {
  if (!warm()) throw history_cold_error("entropy history: warmup not reached");
  std::vector<double> window(ring_.begin(), ring_.begin() + count_);
  const std::size_t k = std::max<std::size_t>(1, count_ / 20);  // top 5%
  std::nth_element(window.begin(), window.begin() + (k - 1), window.end(),
                   std::greater<double>());
  return window[k - 1];
}

std::optional<int> detect_bifurcation(const Trajectory& traj, const EntropyHistory& history,
                                      Rng& rng) {
  if (traj.T() < 1) throw contract_error("detect_bifurcation: empty trajectory");
  const double threshold = history.tau();  // throws while cold
  std::vector<int> omega;
  for (int t = 1; t <= traj.T(); ++t)
    if (traj.entropies[t - 1] >= threshold) omega.push_back(t);
  if (omega.empty()) return std::nullopt;
  return omega[rng.uniform_int(0, static_cast<long>(omega.size()) - 1)];
}

std::vector<int> extract_prefix(const Trajectory& traj, int t_star,
                                const std::vector<int>& prompt) {
  if (t_star < 1 || t_star > traj.T())
    throw contract_error("extract_prefix: t* outside [1, T]");
  std::vector<int> context(prompt);
  context.insert(context.end(), traj.response_tokens.begin(),
                 traj.response_tokens.begin() + (t_star - 1));
  return context;
}

BranchSet expand(const std::vector<Trajectory>& bases, int K, const CvaeParams& cvae,
                 PolicyParams& params, const EntropyHistory& history,
                 const BranchRules& rules, Rng& rng) {
  if (bases.empty()) throw contract_error("expand: need at least one base rollout");
  if (K < 0) throw contract_error("expand: K must be nonnegative");

  BranchSet set;
  set.prompt_id = bases.front().prompt_id;
  set.M = static_cast<int>(bases.size());
  set.K = K;
  set.trajectories = bases;  // bases ride along untouched
  if (K == 0) return set;

  int next_id = 0;
  for (const Trajectory& b : bases) next_id = std::max(next_id, b.id + 1);

  const int M = set.M;
  std::vector<std::vector<Trajectory>> per_base(M);
  parallel_for(M, [&](int i) {
    const Trajectory& base = bases[i];
    std::vector<Trajectory>& out = per_base[i];
    out.reserve(K);

    if (base.branch_depth >= rules.depth_cap) {
      // Lineage exhausted: keep the set size with fresh plain rollouts.
      for (int j = 1; j <= K; ++j) {
        Rng r = rng.fork("branch-plain", base.id, j);
        Trajectory t = sample_rollout(base.prompt_tokens, params, InjectionState::none(),
                                      rules.temperature, rules.max_new, r, rules.eos_id);
        t.prompt_id = base.prompt_id;
        t.id = next_id + i * K + (j - 1);
        out.push_back(std::move(t));
      }
      return;
    }

    Rng bifurcate_rng = rng.fork("bifurcate", base.id);
    int t_star;
    if (const auto drawn = detect_bifurcation(base, history, bifurcate_rng)) {
      t_star = *drawn;
    } else {
      // Flat trajectory: fall back to its own entropy peak so every base
      // still contributes exactly K branches.
      t_star = 1 + static_cast<int>(std::distance(
                       base.entropies.begin(),
                       std::max_element(base.entropies.begin(), base.entropies.end())));
    }

    const std::vector<int> context = extract_prefix(base, t_star, base.prompt_tokens);
    Rng latent_rng = rng.fork("latent", base.id);
    const auto latents = sample_latents(context, K, cvae, params, latent_rng);
    const std::vector<int> inherited(base.response_tokens.begin(),
                                     base.response_tokens.begin() + (t_star - 1));

    for (int j = 1; j <= K; ++j) {
      Rng r = rng.fork("branch", base.id, j);
      Trajectory t =
          sample_rollout(base.prompt_tokens, params,
                         InjectionState::with(rules.mode, latents[j - 1]),
                         rules.temperature, rules.max_new, r, rules.eos_id, &inherited);
      t.prompt_id = base.prompt_id;
      t.id = next_id + i * K + (j - 1);
      t.parent_id = base.id;
      t.branch_t_star = t_star;
      t.latent_draw = latents[j - 1].draw_index;
      t.branch_depth = base.branch_depth + 1;
      out.push_back(std::move(t));
    }
  });

  for (auto& group : per_base)
    for (Trajectory& t : group) set.trajectories.push_back(std::move(t));
  return set;
}

}  // namespace i2b
