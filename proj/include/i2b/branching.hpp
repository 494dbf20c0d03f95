#pragma once

#include <optional>
#include <vector>

#include "i2b/cvae.hpp"
#include "i2b/model.hpp"

namespace i2b {

// Sliding window over recently observed per-token entropies. Percentile
// queries are defined once the window holds at least `kWarmup` values.
class EntropyHistory {
 public:
  static constexpr int kWarmup = 20;

  explicit EntropyHistory(std::size_t capacity = 50000);

  void push(double h);
  void push_all(const std::vector<double>& hs);
  std::size_t size() const { return count_; }
  bool warm() const { return count_ >= static_cast<std::size_t>(kWarmup); }

  // Top-5% threshold: the k-th largest stored value with
  // k = max(1, floor(0.05 * size)). history_cold_error until warm.
  double tau() const;

 private:
  std::vector<double> ring_;
  std::size_t capacity_;
  std::size_t head_ = 0;   // next write slot
  std::size_t count_ = 0;  // values currently held (== capacity_ once full)
};

// Uniform draw from the bifurcation candidate set
// Omega = { t in [1, T] : H_t >= tau }; nullopt when Omega is empty.
// history_cold_error before the history is warm.
std::optional<int> detect_bifurcation(const Trajectory& traj, const EntropyHistory& history,
                                      Rng& rng);

// [prompt, o_1, ..., o_{t*-1}]: the shared context a branch resumes from.
// t* is 1-based; t*=1 keeps the prompt alone.
std::vector<int> extract_prefix(const Trajectory& traj, int t_star,
                                const std::vector<int>& prompt);

struct BranchRules {
  double temperature = 1.0;
  int max_new = 32;
  int eos_id = 0;
  InjectionMode mode = InjectionMode::psa;
  int depth_cap = 4;  // lineages are re-branched at most this many times
};

struct BranchSet {
  int prompt_id = -1;
  int M = 0;
  int K = 0;
  std::vector<Trajectory> trajectories;  // M*(K+1) members, bases first
  std::vector<int> retained;             // ids of R*, filled by pruning
};

// Expands M base rollouts into the full M*(K+1) set: per base, draw a
// bifurcation point (argmax-entropy fallback when no step clears tau),
// sample K prior latents from the shared context, and resume generation
// under latent injection. Bases are copied in untouched; K=0 is the
// identity. A base whose lineage already hit the depth cap contributes
// plain un-injected rollouts instead of latent branches.
BranchSet expand(const std::vector<Trajectory>& bases, int K, const CvaeParams& cvae,
                 PolicyParams& params, const EntropyHistory& history,
                 const BranchRules& rules, Rng& rng);

}  // namespace i2b
