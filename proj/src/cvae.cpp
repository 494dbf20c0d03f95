#include "i2b/cvae.hpp"

#include <algorithm>
#include <cmath>

namespace i2b {
namespace {

constexpr double kLogvarLo = -10.0, kLogvarHi = 10.0;

// Mean of the policy's final hidden states over rows [r0, r1) of `tokens`,
// computed without gradients (the backbone is frozen for CVAE purposes).
std::vector<double> pooled_hidden(const std::vector<int>& tokens, std::size_t r0,
                                  std::size_t r1, PolicyParams& policy) {
  Tape tape(false);
  const ForwardResult fr = forward_on_tape(tape, tokens, policy, InjectionState::none());
  const auto hidden = tape.val(fr.hidden);
  const std::size_t D = policy.cfg.d_model;
  std::vector<double> pooled(D, 0.0);
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t j = 0; j < D; ++j) pooled[j] += hidden[r * D + j];
  for (double& v : pooled) v /= static_cast<double>(r1 - r0);
  return pooled;
}

std::vector<double> affine_head(const std::vector<double>& x, const Tensor& w,
                                const Tensor& b) {
  std::vector<double> out(w.cols(), 0.0);
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double acc = b.data[j];
    for (std::size_t i = 0; i < w.rows(); ++i) acc += x[i] * w.at(i, j);
    out[j] = acc;
  }
  return out;
}

GaussianParams split_gaussian(const std::vector<double>& row, int d_z) {
  GaussianParams g;
  g.mu.assign(row.begin(), row.begin() + d_z);
  g.logvar.assign(row.begin() + d_z, row.begin() + 2 * d_z);
  for (double& lv : g.logvar) lv = std::clamp(lv, kLogvarLo, kLogvarHi);
  return g;
}

}  // namespace

CvaeParams CvaeParams::init(const ModelConfig& cfg, int width, Rng& rng) {
  if (width < 1) throw contract_error("cvae: encoder width must be positive");
  CvaeParams p;
  p.d_z = cfg.d_z;
  p.width = width;
  Rng r = rng.fork("cvae-init");
  p.enc_w = Tensor::randn(cfg.d_model, width, 0.05, r);
  p.enc_b = Tensor(static_cast<std::size_t>(width));
  p.prior_w = Tensor::randn(width, 2 * cfg.d_z, 0.05, r);
  p.prior_b = Tensor(static_cast<std::size_t>(2 * cfg.d_z));
  p.post_w = Tensor::randn(2 * width, 2 * cfg.d_z, 0.05, r);
  p.post_b = Tensor(static_cast<std::size_t>(2 * cfg.d_z));
  return p;
}

std::vector<std::pair<std::string, Tensor*>> CvaeParams::named_tensors() {
  return {{"cvae.enc_w", &enc_w},     {"cvae.enc_b", &enc_b},
          {"cvae.prior_w", &prior_w}, {"cvae.prior_b", &prior_b},
          {"cvae.post_w", &post_w},   {"cvae.post_b", &post_b}};
}

std::vector<Tensor*> CvaeParams::all_tensors() {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

void CvaeParams::zero_grads() {
  for (Tensor* t : all_tensors()) t->zero_grad();
}

std::vector<double> encode_context(const std::vector<int>& context, const CvaeParams& cvae,
                                   PolicyParams& policy) {
  if (context.empty()) throw contract_error("encode_context: empty context");
  return affine_head(pooled_hidden(context, 0, context.size(), policy), cvae.enc_w,
                     cvae.enc_b);
}

GaussianParams prior(const std::vector<double>& context_vec, const CvaeParams& cvae) {
  if (context_vec.size() != cvae.enc_w.cols())
    throw shape_error("prior: context vector width mismatch");
  return split_gaussian(affine_head(context_vec, cvae.prior_w, cvae.prior_b), cvae.d_z);
}

LatentCode reparameterize(const GaussianParams& g, const std::vector<double>& eps) {
  if (eps.size() != g.mu.size() || g.logvar.size() != g.mu.size())
    throw shape_error("reparameterize: dimension mismatch");
  LatentCode code;
  code.z.resize(g.mu.size());
  for (std::size_t i = 0; i < g.mu.size(); ++i)
    code.z[i] = g.mu[i] + std::exp(0.5 * g.logvar[i]) * eps[i];
  return code;
}

double kl_divergence(const GaussianParams& q, const GaussianParams& p) {
  if (q.mu.size() != p.mu.size() || q.logvar.size() != q.mu.size() ||
      p.logvar.size() != p.mu.size())
    throw shape_error("kl_divergence: dimension mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < q.mu.size(); ++i) {
    const double d = q.mu[i] - p.mu[i];
    acc += std::exp(q.logvar[i] - p.logvar[i]) + d * d * std::exp(-p.logvar[i]) - 1.0 +
           p.logvar[i] - q.logvar[i];
  }
  return 0.5 * acc;
}

std::vector<LatentCode> sample_latents(const std::vector<int>& context, int K,
                                       const CvaeParams& cvae, PolicyParams& policy,
                                       Rng& rng) {
  if (K < 1) throw contract_error("sample_latents: K must be >= 1");
  const GaussianParams g = prior(encode_context(context, cvae, policy), cvae);
  std::vector<LatentCode> codes;
  codes.reserve(K);
  for (int j = 1; j <= K; ++j) {
    std::vector<double> eps(g.mu.size());
    for (double& e : eps) e = rng.normal();
    LatentCode code = reparameterize(g, eps);
    code.source = LatentSource::prior;
    code.draw_index = j;
    codes.push_back(std::move(code));
  }
  return codes;
}

std::vector<Tensor*> elbo_trainable(CvaeParams& cvae, PolicyParams& policy) {
  std::vector<Tensor*> out = cvae.all_tensors();
  out.push_back(&policy.proj_phi);
  out.push_back(&policy.w_kz);
  out.push_back(&policy.w_vz);
  out.push_back(&policy.logit_map);
  return out;
}

ElboReport elbo_step(const std::vector<CvaePair>& batch, CvaeParams& cvae,
                     PolicyParams& policy, InjectionMode mode, Rng& rng) {
  if (batch.empty()) throw contract_error("elbo_step: empty batch");
  if (mode == InjectionMode::none)
    throw contract_error("elbo_step: reconstruction needs an injection pathway");
  const int dz = cvae.d_z;

  Tape tape(true);
  const Tape::Ref enc_w = tape.leaf(cvae.enc_w), enc_b = tape.leaf(cvae.enc_b);
  const Tape::Ref prior_w = tape.leaf(cvae.prior_w), prior_b = tape.leaf(cvae.prior_b);
  const Tape::Ref post_w = tape.leaf(cvae.post_w), post_b = tape.leaf(cvae.post_b);

  Tape::Ref recon_sum = -1, kl_sum = -1;
  for (const CvaePair& pair : batch) {
    if (pair.context.empty() || pair.continuation.empty())
      throw contract_error("elbo_step: empty context or continuation");
    std::vector<int> full(pair.context);
    full.insert(full.end(), pair.continuation.begin(), pair.continuation.end());
    const std::size_t C = pair.context.size(), L = full.size();

    // Frozen-backbone summaries; only the affine head is differentiable.
    const Tape::Ref ctx_pool = tape.constant(1, policy.cfg.d_model,
                                             pooled_hidden(pair.context, 0, C, policy));
    const Tape::Ref cont_pool =
        tape.constant(1, policy.cfg.d_model, pooled_hidden(full, C, L, policy));
    const Tape::Ref ctx_vec = tape.add_rowvec(tape.matmul(ctx_pool, enc_w), enc_b);
    const Tape::Ref cont_vec = tape.add_rowvec(tape.matmul(cont_pool, enc_w), enc_b);

    const Tape::Ref pri = tape.add_rowvec(tape.matmul(ctx_vec, prior_w), prior_b);
    const Tape::Ref mu_p = tape.slice_cols(pri, 0, dz);
    const Tape::Ref lv_p = tape.clamp(tape.slice_cols(pri, dz, 2 * dz), kLogvarLo, kLogvarHi);

    const Tape::Ref pst = tape.add_rowvec(
        tape.matmul(tape.concat_cols(ctx_vec, cont_vec), post_w), post_b);
    const Tape::Ref mu_q = tape.slice_cols(pst, 0, dz);
    const Tape::Ref lv_q = tape.clamp(tape.slice_cols(pst, dz, 2 * dz), kLogvarLo, kLogvarHi);

    std::vector<double> eps(dz);
    for (double& e : eps) e = rng.normal();
    const Tape::Ref z =
        tape.add(mu_q, tape.mul(tape.exp_elem(tape.scale(lv_q, 0.5)), tape.constant_row(eps)));

    // Reconstruction: continuation logprob under the policy with the
    // posterior sample injected. The latent here is a placeholder; the tape
    // node z carries the real sample and its gradient.
    InjectionState inj = InjectionState::with(
        mode, LatentCode{std::vector<double>(dz, 0.0), LatentSource::posterior, 0},
        static_cast<int>(pair.continuation.size()));
    const ForwardResult fr = forward_on_tape(tape, full, policy, inj, z);
    const Tape::Ref logp = tape.row_log_softmax(fr.logits);
    std::vector<std::pair<int, int>> coords;
    for (std::size_t i = 0; i < pair.continuation.size(); ++i)
      coords.emplace_back(static_cast<int>(C - 1 + i), pair.continuation[i]);
    const Tape::Ref recon_i = tape.sum(tape.pick(logp, coords));

    // Closed-form diagonal-Gaussian KL(q || p), built on-tape.
    const Tape::Ref d = tape.sub(mu_q, mu_p);
    const Tape::Ref inner = tape.add(
        tape.add(tape.exp_elem(tape.sub(lv_q, lv_p)),
                 tape.mul(tape.mul(d, d), tape.exp_elem(tape.scale(lv_p, -1.0)))),
        tape.add_scalar(tape.sub(lv_p, lv_q), -1.0));
    const Tape::Ref kl_i = tape.scale(tape.sum(inner), 0.5);

    recon_sum = recon_sum < 0 ? recon_i : tape.add(recon_sum, recon_i);
    kl_sum = kl_sum < 0 ? kl_i : tape.add(kl_sum, kl_i);
  }

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const Tape::Ref recon_loss = tape.scale(recon_sum, -inv_b);
  const Tape::Ref kl_mean = tape.scale(kl_sum, inv_b);
  const Tape::Ref loss = tape.add(recon_loss, kl_mean);
  tape.backward(loss);

  ElboReport report;
  report.loss = tape.scalar(loss);
  report.recon = tape.scalar(recon_loss);
  report.kl = tape.scalar(kl_mean);
  return report;
}

}  // namespace i2b
