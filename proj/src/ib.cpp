#include "i2b/ib.hpp"

#include <algorithm>
#include <numeric>

namespace i2b {

IbScore ib_score(const Trajectory& traj, bool sum_mode) {
  if (!traj.advantage)
    throw sequencing_error("ib_score: advantage not assigned yet");
  if (traj.entropies.empty())
    throw contract_error("ib_score: trajectory carries no entropies");
  IbScore s;
  s.trajectory_id = traj.id;
  const double A = *traj.advantage;
  s.terms.reserve(traj.entropies.size());
  double acc = 0.0;
  for (double h : traj.entropies) {
    s.terms.push_back(A * h);
    acc += A * h;
  }
  s.value = sum_mode ? acc : acc / static_cast<double>(s.terms.size());
  return s;
}

std::vector<Trajectory> prune(BranchSet& set, int N, bool sum_mode) {
  const int pool = static_cast<int>(set.trajectories.size());
  if (N < 1 || N > pool)
    throw contract_error("prune: N must lie in [1, |branch set|]");

  std::vector<double> scores(pool);
  for (int i = 0; i < pool; ++i) scores[i] = ib_score(set.trajectories[i], sum_mode).value;

  std::vector<int> order(pool);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    const Trajectory &ta = set.trajectories[a], &tb = set.trajectories[b];
    if (ta.reward != tb.reward) return ta.reward > tb.reward;
    return ta.id < tb.id;
  });
  order.resize(N);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return set.trajectories[a].id < set.trajectories[b].id;
  });

  set.retained.clear();
  std::vector<Trajectory> kept;
  kept.reserve(N);
  for (int idx : order) {
    set.retained.push_back(set.trajectories[idx].id);
    kept.push_back(set.trajectories[idx]);
  }
  return kept;
}

Tape::Ref ib_objective_node(Tape& tape, const std::vector<Trajectory>& retained,
                            PolicyParams& params, bool sum_mode) {
  if (retained.empty()) throw contract_error("ib_objective: empty retained set");
  Tape::Ref acc = -1;
  for (const Trajectory& traj : retained) {
    if (!traj.advantage)
      throw sequencing_error("ib_objective: advantage not assigned yet");
    const double A = *traj.advantage;
    const std::size_t p0 = traj.prompt_tokens.size();
    const int T = traj.T();
    if (T < 1) throw contract_error("ib_objective: empty trajectory");
    const ForwardResult fr =
        forward_on_tape(tape, traj.full_tokens(), params, traj.training_injection());
    // entropies of the rows that produced the response tokens
    const Tape::Ref h_col =
        tape.slice_rows(tape.row_entropy(fr.logits), p0 - 1, p0 - 1 + T);
    const double w = sum_mode ? A : A / static_cast<double>(T);
    const Tape::Ref term = tape.scale(tape.sum(h_col), w);
    acc = acc < 0 ? term : tape.add(acc, term);
  }
  return tape.scale(acc, 1.0 / static_cast<double>(retained.size()));
}

double ib_objective(const std::vector<Trajectory>& retained, PolicyParams& params,
                    bool sum_mode) {
  Tape tape(true);
  const Tape::Ref node = ib_objective_node(tape, retained, params, sum_mode);
  tape.backward(node);
  return tape.scalar(node);
}

}  // namespace i2b
