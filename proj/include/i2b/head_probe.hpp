#pragma once

#include <vector>

#include "i2b/model.hpp"
#include "i2b/tasks.hpp"

namespace i2b {

// Difficulty attribution of one attention head: mean projection of its
// isolated output onto the difficulty direction over each cohort, and their
// difference. delta == s_hard - s_easy exactly.
struct HeadAttribution {
  int layer = -1;
  int head = -1;
  double s_hard = 0.0;
  double s_easy = 0.0;
  double delta = 0.0;
  double bootstrap_se = 0.0;  // resampled-cohort standard error of delta
};

struct ProbeConfig {
  int layer = -1;            // attention layer to probe; -1 means the last
  int bootstrap_draws = 200;
  unsigned long seed = 7;    // drives only the bootstrap resampling
};

// Isolates head `head` in each trace: every other head's slice of the
// pre-projection attention mix is zeroed, the last row is pushed through the
// layer's output map wo, and the resulting d_model vector is returned per
// trace. Summing the outputs over all heads reconstructs the unablated
// projection (the output map is linear). contract_error on a bad head index,
// an empty trace, or a trace/wo width mismatch.
std::vector<std::vector<double>> head_isolated_states(
    const std::vector<ForwardTrace>& traces, const Tensor& wo, int n_heads,
    int d_head, int head);

// Nearest-centroid linear probe: the unit-normalized difference between the
// mean hard state and the mean easy state. labels[i] is 1 for hard, 0 for
// easy. contract_error when a class is missing, on ragged dimensions, or
// when the class means coincide (no direction to learn).
std::vector<double> fit_difficulty_probe(
    const std::vector<std::vector<double>>& states,
    const std::vector<unsigned char>& labels);

// <z, v_diff> / ||v_diff||; the probe is unit-length by construction so this
// is an orthogonal projection. contract_error on dimension mismatch or a
// zero-norm direction.
double head_difficulty_score(const std::vector<double>& z,
                             const std::vector<double>& v_diff);

// Full analysis on one layer: run every problem's prompt through the frozen
// policy capturing the probed layer's attention mix, fit the difficulty
// probe on the unablated last-token projections (hard = 1, easy = 0), then
// score each head's isolated contribution on both cohorts. The probe's sign
// is canonicalized (largest coordinate positive) so it depends only on the
// pooled data; swapping the cohorts therefore negates every delta exactly.
// Cohorts with coinciding means score along a fixed axis, yielding zero
// deltas. The bootstrap standard error of each delta comes from resampling
// both cohorts' scores with replacement. contract_error on an empty cohort
// or a bad layer index.
std::vector<HeadAttribution> differentiation_scores(
    PolicyParams& params, const std::vector<Problem>& hard,
    const std::vector<Problem>& easy, const ProbeConfig& cfg = {});

}  // namespace i2b
