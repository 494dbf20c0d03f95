#include "i2b/head_probe.hpp"

#include <cmath>
#include <cstddef>
#include <vector>

#include "i2b/errors.hpp"
#include "i2b/tape.hpp"
#include "i2b/threading.hpp"

namespace i2b {

namespace {

// Last-row attention mix of one trace, projected through wo with only the
// columns of `head` contributing (head < 0 keeps every head).
std::vector<double> project_last_row(const ForwardTrace& trace, const Tensor& wo,
                                     int n_heads, int d_head, int head) {
  const std::size_t width = static_cast<std::size_t>(n_heads) * d_head;
  if (trace.rows == 0 || trace.attn_pre_o.size() != trace.rows * width)
    throw contract_error("head_isolated_states: trace does not match head layout");
  if (wo.rows() != width)
    throw contract_error("head_isolated_states: output map width mismatch");
  const double* row = trace.attn_pre_o.data() + (trace.rows - 1) * width;
  const std::size_t j0 = head < 0 ? 0 : static_cast<std::size_t>(head) * d_head;
  const std::size_t j1 = head < 0 ? width : j0 + d_head;
  std::vector<double> out(wo.cols(), 0.0);
  for (std::size_t j = j0; j < j1; ++j) {
    const double x = row[j];
    if (x == 0.0) continue;
    for (std::size_t c = 0; c < wo.cols(); ++c) out[c] += x * wo.at(j, c);
  }
  return out;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

std::vector<std::vector<double>> head_isolated_states(
    const std::vector<ForwardTrace>& traces, const Tensor& wo, int n_heads,
    int d_head, int head) {
  if (n_heads < 1 || d_head < 1)
    throw contract_error("head_isolated_states: bad head geometry");
  if (head < 0 || head >= n_heads)
    throw contract_error("head_isolated_states: head index out of range");
  if (traces.empty()) throw contract_error("head_isolated_states: no traces");
  std::vector<std::vector<double>> out;
  out.reserve(traces.size());
  for (const auto& trace : traces)
    out.push_back(project_last_row(trace, wo, n_heads, d_head, head));
  return out;
}

std::vector<double> fit_difficulty_probe(
    const std::vector<std::vector<double>>& states,
    const std::vector<unsigned char>& labels) {
  if (states.empty() || states.size() != labels.size())
    throw contract_error("fit_difficulty_probe: states and labels must align");
  const std::size_t dim = states.front().size();
  if (dim == 0) throw contract_error("fit_difficulty_probe: empty states");
  std::vector<double> mean_hard(dim, 0.0), mean_easy(dim, 0.0);
  std::size_t n_hard = 0, n_easy = 0;
  for (std::size_t i = 0; i < states.size(); ++i) {
    if (states[i].size() != dim)
      throw contract_error("fit_difficulty_probe: ragged states");
    auto& mean = labels[i] ? mean_hard : mean_easy;
    for (std::size_t d = 0; d < dim; ++d) mean[d] += states[i][d];
    ++(labels[i] ? n_hard : n_easy);
  }
  if (n_hard == 0 || n_easy == 0)
    throw contract_error("fit_difficulty_probe: both classes required");
  double norm_sq = 0.0;
  std::vector<double> diff(dim);
  for (std::size_t d = 0; d < dim; ++d) {
    diff[d] = mean_hard[d] / n_hard - mean_easy[d] / n_easy;
    norm_sq += diff[d] * diff[d];
  }
  const double norm = std::sqrt(norm_sq);
  if (norm < 1e-12)
    throw contract_error("fit_difficulty_probe: degenerate direction");
  for (double& d : diff) d /= norm;
  return diff;
}

double head_difficulty_score(const std::vector<double>& z,
                             const std::vector<double>& v_diff) {
  if (z.size() != v_diff.size() || z.empty())
    throw contract_error("head_difficulty_score: dimension mismatch");
  double dot = 0.0, norm_sq = 0.0;
  for (std::size_t d = 0; d < z.size(); ++d) {
    dot += z[d] * v_diff[d];
    norm_sq += v_diff[d] * v_diff[d];
  }
  if (norm_sq < 1e-24)
    throw contract_error("head_difficulty_score: zero direction");
  return dot / std::sqrt(norm_sq);
}

std::vector<HeadAttribution> differentiation_scores(
    PolicyParams& params, const std::vector<Problem>& hard,
    const std::vector<Problem>& easy, const ProbeConfig& cfg) {
  if (hard.empty() || easy.empty())
    throw contract_error("differentiation_scores: both cohorts required");
  const ModelConfig& mc = params.cfg;
  const int layer = cfg.layer < 0 ? mc.n_layers - 1 : cfg.layer;
  if (layer < 0 || layer >= mc.n_layers)
    throw contract_error("differentiation_scores: layer out of range");
  if (cfg.bootstrap_draws < 2)
    throw contract_error("differentiation_scores: need at least two bootstrap draws");

  const std::size_t n_hard = hard.size();
  const std::size_t total = n_hard + easy.size();
  std::vector<ForwardTrace> traces(total);
  parallel_for(static_cast<int>(total), [&](int i) {
    const std::size_t idx = static_cast<std::size_t>(i);
    const Problem& p = idx < n_hard ? hard[idx] : easy[idx - n_hard];
    traces[i].layer = layer;
    Tape tape(false);
    forward_on_tape(tape, p.prompt_tokens, params, InjectionState::none(),
                    std::nullopt, &traces[i]);
  });

  const Tensor& wo = params.layers[layer].wo;
  std::vector<std::vector<double>> full_states(total);
  std::vector<unsigned char> labels(total);
  for (std::size_t i = 0; i < total; ++i) {
    full_states[i] = project_last_row(traces[i], wo, mc.n_heads, mc.d_head, -1);
    labels[i] = i < n_hard ? 1 : 0;
  }
  std::vector<double> v_diff;
  try {
    v_diff = fit_difficulty_probe(full_states, labels);
  } catch (const contract_error&) {
    // Coinciding class means leave no direction to learn, but every delta is
    // then zero under any direction, so probe along a fixed axis instead of
    // failing; cohorts are already validated, so nothing else throws here.
    v_diff.assign(full_states.front().size(), 0.0);
    v_diff[0] = 1.0;
  }
  // Canonical sign (largest coordinate positive) so the probe depends only on
  // the data, not on which cohort was passed first; swapping the cohorts then
  // negates every delta exactly instead of also flipping the direction.
  std::size_t lead = 0;
  for (std::size_t d = 1; d < v_diff.size(); ++d)
    if (std::abs(v_diff[d]) > std::abs(v_diff[lead])) lead = d;
  if (v_diff[lead] < 0.0)
    for (double& d : v_diff) d = -d;

  Rng rng(cfg.seed);
  std::vector<HeadAttribution> out;
  out.reserve(mc.n_heads);
  for (int h = 0; h < mc.n_heads; ++h) {
    const auto states =
        head_isolated_states(traces, wo, mc.n_heads, mc.d_head, h);
    std::vector<double> hard_scores, easy_scores;
    for (std::size_t i = 0; i < total; ++i)
      (i < n_hard ? hard_scores : easy_scores)
          .push_back(head_difficulty_score(states[i], v_diff));

    HeadAttribution attr;
    attr.layer = layer;
    attr.head = h;
    attr.s_hard = mean_of(hard_scores);
    attr.s_easy = mean_of(easy_scores);
    attr.delta = attr.s_hard - attr.s_easy;

    const auto hi = static_cast<std::int64_t>(hard_scores.size()) - 1;
    const auto ei = static_cast<std::int64_t>(easy_scores.size()) - 1;
    std::vector<double> deltas(cfg.bootstrap_draws);
    for (double& d : deltas) {
      double hs = 0.0, es = 0.0;
      for (std::size_t i = 0; i < hard_scores.size(); ++i)
        hs += hard_scores[static_cast<std::size_t>(rng.uniform_int(0, hi))];
      for (std::size_t i = 0; i < easy_scores.size(); ++i)
        es += easy_scores[static_cast<std::size_t>(rng.uniform_int(0, ei))];
      d = hs / static_cast<double>(hard_scores.size()) -
          es / static_cast<double>(easy_scores.size());
    }
    const double mean_delta = mean_of(deltas);
    double var = 0.0;
    for (double d : deltas) var += (d - mean_delta) * (d - mean_delta);
    attr.bootstrap_se = std::sqrt(var / deltas.size());
    out.push_back(attr);
  }
  return out;
}

}  // namespace i2b
