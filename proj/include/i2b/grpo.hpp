#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "i2b/branching.hpp"
#include "i2b/cvae.hpp"
#include "i2b/ib.hpp"
#include "i2b/model.hpp"
#include "i2b/tasks.hpp"

namespace i2b {

enum class BaselineMode { grpo_only, entropy_reg, i2b };

struct TrainConfig {
  // group shape
  int M = 4;   // base rollouts per prompt
  int K = 7;   // branches per base
  int N = 8;   // trajectories retained per prompt after IB pruning
  // objective
  double gamma_ib = 0.003;  // weight of the IB term in the combined objective
  double beta_ib = 2.0;     // symmetric-interval constant; kept for reporting
  double eps_low = 0.2;
  double eps_high = 0.28;
  double alpha_ent = 0.0;   // entropy bonus, entropy_reg mode only
  // optimization
  double lr = 1e-3;
  double momentum = 0.0;    // 0 = plain gradient descent
  double cvae_lr = 0.01;
  // rollouts
  int batch_prompts = 8;
  int max_new = 32;
  double temperature = 1.0;
  int history_window = 50000;
  int iterations = 300;
  std::uint64_t seed = 1;
  BaselineMode mode = BaselineMode::i2b;
  InjectionMode injection = InjectionMode::psa;  // pathway used by branches
  int depth_cap = 4;
  int cvae_pairs = 8;       // ELBO batch cap per iteration
  bool adv_before_prune = false;  // keep pool advantages instead of regrouping R*
  bool ib_sum = false;            // drop the 1/T in the IB score

  void validate() const;
};

struct UpdateReport {
  int iteration = 0;
  double mean_reward = 0.0;     // whole pool, bases + branches
  double pass1 = 0.0;           // bases only
  double mean_entropy = 0.0;    // per-token, bases only
  double mean_len = 0.0;        // response length, bases only
  double ib_mean = 0.0;         // mean IB score over the retained set
  double total_objective = 0.0; // == surrogate_obj + ib_term (+ entropy_term)
  double surrogate_obj = 0.0;   // J_GRPO
  double ib_term = 0.0;         // gamma_ib * S_IB
  double entropy_term = 0.0;    // alpha_ent * mean retained entropy
  double loss = 0.0;            // -total_objective
  double grad_norm = 0.0;
  double elbo_loss = 0.0;       // CVAE update of this iteration, 0 if skipped
  double seconds = 0.0;         // wall time of the step
  int pool_size = 0;
  int retained = 0;
  bool branch_skipped_cold = false;  // history not warm: K forced to 0
};

// Plain gradient descent with an optional momentum knob. step() applies one
// descent update from the gradients currently stored on the tensors.
class Optimizer {
 public:
  Optimizer(double lr, double momentum = 0.0);
  void step(const std::vector<Tensor*>& tensors);

 private:
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

// A_i = (r_i - mean) / (std + 1e-8), population std; all-equal groups give
// all zeros. contract_error for groups smaller than 2.
std::vector<double> group_advantages(const std::vector<double>& rewards);

// -mean over every token of min(rho*A, clip(rho, 1-eps_low, 1+eps_high)*A),
// rho = exp(new - old). One advantage per trajectory, broadcast to its
// tokens. contract_error on any shape mismatch.
double clipped_surrogate(const std::vector<std::vector<double>>& new_logprobs,
                         const std::vector<std::vector<double>>& old_logprobs,
                         const std::vector<double>& advantages, double eps_low,
                         double eps_high);

// One full iteration over a batch of prompts: M rollouts per prompt, branch
// expansion to M*(K+1), reward scoring, IB pruning to N, group advantages
// over the retained set, one optimizer step on the combined objective, and
// an ELBO update of the CVAE on this iteration's branch pairs.
UpdateReport train_step(const std::vector<Problem>& prompts, PolicyParams& params,
                        CvaeParams& cvae, EntropyHistory& history, Optimizer& opt,
                        const TrainConfig& cfg, int iteration, Rng& rng);

}  // namespace i2b
