#pragma once

#include <vector>

#include "i2b/branching.hpp"
#include "i2b/model.hpp"

namespace i2b {

// Information-bottleneck score of one trajectory: per-token terms
// s_t = A * H_t with the trajectory's group-relative advantage broadcast to
// every token. `value` is their mean, or their raw sum under sum_mode (the
// two normalizations both appear in the source derivation; mean is default).
struct IbScore {
  double value = 0.0;
  std::vector<double> terms;
  int trajectory_id = -1;
};

// sequencing_error when the advantage has not been assigned yet.
IbScore ib_score(const Trajectory& traj, bool sum_mode = false);

// Retains the N best-scoring members of the set: ranked by score, ties by
// higher reward then lower id. Returns them in ascending-id order and
// records their ids in set.retained. contract_error unless 1 <= N <= |set|.
std::vector<Trajectory> prune(BranchSet& set, int N, bool sum_mode = false);

// S_IB over the retained set, with every H_t rebuilt differentiably on the
// tape under the current parameters (advantages stay constant):
// S_IB = (1/|R*|) sum_r (A_r / T_r) sum_t H_t(theta).
Tape::Ref ib_objective_node(Tape& tape, const std::vector<Trajectory>& retained,
                            PolicyParams& params, bool sum_mode = false);

// Standalone evaluation: returns S_IB and accumulates dS_IB/dtheta into the
// parameter gradients.
double ib_objective(const std::vector<Trajectory>& retained, PolicyParams& params,
                    bool sum_mode = false);

}  // namespace i2b
