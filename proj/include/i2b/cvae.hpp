#pragma once

#include <string>
#include <utility>
#include <vector>

#include "i2b/model.hpp"

namespace i2b {

// Diagonal Gaussian in natural (mu, log-variance) coordinates. logvar is
// clamped to [-10, 10] at construction sites to keep variances sane.
struct GaussianParams {
  std::vector<double> mu;
  std::vector<double> logvar;
};

// Conditional VAE over bifurcation contexts. The context/continuation
// encoders are a small affine head over mean-pooled hidden states of the
// frozen policy; the latent injection maps themselves live in PolicyParams
// and are trained through the reconstruction term.
struct CvaeParams {
  int d_z = 0;
  int width = 32;       // encoder head width
  Tensor enc_w;         // [d_model, width]
  Tensor enc_b;         // [width]
  Tensor prior_w;       // [width, 2*d_z]      context -> (mu, logvar)
  Tensor prior_b;       // [2*d_z]
  Tensor post_w;        // [2*width, 2*d_z]    context (+) continuation -> (mu, logvar)
  Tensor post_b;        // [2*d_z]

  [[nodiscard]] static CvaeParams init(const ModelConfig& cfg, int width, Rng& rng);

  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::vector<Tensor*> all_tensors();
  void zero_grads();
};

// Mean-pool of the policy's final hidden states over the context positions,
// mapped through the encoder head. Positional: reordering context tokens
// changes the result.
std::vector<double> encode_context(const std::vector<int>& context, const CvaeParams& cvae,
                                   PolicyParams& policy);

GaussianParams prior(const std::vector<double>& context_vec, const CvaeParams& cvae);

// z = mu + exp(logvar/2) * eps, elementwise.
LatentCode reparameterize(const GaussianParams& g, const std::vector<double>& eps);

// Closed-form KL(q || p) between diagonal Gaussians, summed over dimensions.
double kl_divergence(const GaussianParams& q, const GaussianParams& p);

// K independent prior draws conditioned on the context; draw indices 1..K.
std::vector<LatentCode> sample_latents(const std::vector<int>& context, int K,
                                       const CvaeParams& cvae, PolicyParams& policy, Rng& rng);

// One (context, realized continuation) training pair; the continuation is a
// trajectory suffix that actually followed the context under the policy.
struct CvaePair {
  std::vector<int> context;
  std::vector<int> continuation;
};

struct ElboReport {
  double loss = 0.0;   // == recon + kl exactly
  double recon = 0.0;  // negative mean continuation logprob
  double kl = 0.0;     // mean KL(posterior || prior)
};

// Builds the ELBO loss over the batch, backpropagates, and leaves gradients
// on the CVAE head tensors and the policy's injection maps (the backbone is
// treated as frozen: its gradients are discarded by the caller's update).
// `mode` selects the injection pathway the reconstruction runs through.
ElboReport elbo_step(const std::vector<CvaePair>& batch, CvaeParams& cvae,
                     PolicyParams& policy, InjectionMode mode, Rng& rng);

// Tensors an ELBO update is allowed to move: the CVAE heads plus the shared
// injection maps.
std::vector<Tensor*> elbo_trainable(CvaeParams& cvae, PolicyParams& policy);

}  // namespace i2b
