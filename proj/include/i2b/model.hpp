#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "i2b/rng.hpp"
#include "i2b/tape.hpp"
#include "i2b/tensor.hpp"

namespace i2b {

// ---------------------------------------------------------------------------
// Configuration and parameters

struct ModelConfig {
  int vocab_size = 16;   // matches the arithmetic tokenizer's character set
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_head = 16;
  int max_seq_len = 128;
  int d_z = 16;
  // Layers whose attention receives latent injection; empty means the last
  // half of the stack.
  std::vector<int> psa_layers;
  // Generation-step horizon of the injection-strength decay: gamma(t) walks
  // from 5e-2 down to its 5e-4 floor over decay_horizon/2 steps.
  int decay_horizon = 16;

  std::vector<int> effective_psa_layers() const;
  void validate() const;
};

struct LayerParams {
  Tensor attn_norm_w;  // [d_model]
  Tensor wq, wk, wv, wo;  // [d_model, d_model], bias-free
  Tensor ffn_norm_w;   // [d_model]
  Tensor w1;           // [d_model, 4*d_model]
  Tensor w2;           // [4*d_model, d_model]
};

struct PolicyParams {
  ModelConfig cfg;
  Tensor tok_emb;       // [vocab, d_model]
  Tensor pos_emb;       // [max_seq_len, d_model]
  std::vector<LayerParams> layers;
  Tensor final_norm_w;  // [d_model]
  Tensor w_out;         // [d_model, vocab]  (untied output head)
  // Latent injection maps (shared with the CVAE).
  Tensor proj_phi;      // [d_z, d_model]   norm modulation / input fusion
  Tensor w_kz;          // [d_z, d_model]   pseudo key, sliced per head
  Tensor w_vz;          // [d_z, d_model]   pseudo value
  Tensor logit_map;     // [d_z, vocab]     logit-level fusion
  std::uint64_t version = 0;  // bumped by every optimizer step

  [[nodiscard]] static PolicyParams init(const ModelConfig& cfg, Rng& rng);

  // Deterministic (name, tensor) enumeration used by checkpoints, gradient
  // norms, and the optimizer.
  std::vector<std::pair<std::string, Tensor*>> named_tensors();
  std::vector<Tensor*> all_tensors();
  void zero_grads();
};

// ---------------------------------------------------------------------------
// Latent injection

enum class LatentSource { prior, posterior };

struct LatentCode {
  std::vector<double> z;
  LatentSource source = LatentSource::prior;
  int draw_index = 0;
};

enum class InjectionMode { none, psa, input_fusion, logit_fusion };

const char* injection_mode_name(InjectionMode m);

struct InjectionState {
  std::optional<LatentCode> latent;
  InjectionMode mode = InjectionMode::none;
  // Number of tokens generated so far under this injection; drives gamma(t).
  int decay_step = 0;

  static InjectionState none() { return {}; }
  static InjectionState with(InjectionMode mode, LatentCode z, int decay_step = 0) {
    InjectionState s;
    s.mode = mode;
    s.latent = std::move(z);
    s.decay_step = decay_step;
    return s;
  }
  void validate(int d_z) const;
};

// gamma(t) = max(gamma0 * r^t, 5e-4) with gamma0 = 5e-2 and r chosen so the
// floor is reached after horizon/2 steps.
double gamma_decay(int t, int horizon);

// ---------------------------------------------------------------------------
// Forward pass

// Optional capture of one layer's per-head attention mix (before the output
// projection), consumed by the head-probing analysis.
struct ForwardTrace {
  int layer = -1;                   // set by the caller
  std::vector<double> attn_pre_o;   // rows x (heads*d_head), filled by forward
  std::size_t rows = 0;
};

struct ForwardResult {
  Tape::Ref logits;  // [len(tokens), vocab]
  Tape::Ref hidden;  // [len(tokens), d_model], after the final norm
};

// Builds the full decoder forward pass on the given tape. When z_override is
// set it is used as the latent node instead of a constant built from
// injection.latent, which lets ELBO gradients flow through the latent sample.
ForwardResult forward_on_tape(Tape& tape, const std::vector<int>& tokens,
                              PolicyParams& params, const InjectionState& injection,
                              std::optional<Tape::Ref> z_override = std::nullopt,
                              ForwardTrace* trace = nullptr);

// Convenience: per-position logits values, no gradients. Row-major
// [len(tokens) x vocab].
std::vector<double> forward(const std::vector<int>& tokens, PolicyParams& params,
                            const InjectionState& injection);

// Shannon entropy (nats) of softmax(logits_row); in [0, ln vocab].
double token_entropy(const std::vector<double>& logits_row);

// Standalone pseudo-self-attention for one head. Q holds the last m query
// positions of an l-token sequence (so a single query row attends every key);
// the latent-derived pseudo slot is visible to all queries. w_kz_head and
// w_vz_head map d_z -> d_head for this head.
Tensor psa_attention(const Tensor& Q, const Tensor& K, const Tensor& V,
                     const LatentCode& z, const Tensor& w_kz_head,
                     const Tensor& w_vz_head);

// w' = w + gamma(decay_step) * Proj_phi(z), then RMS-normalize x by w'.
std::vector<double> modulated_norm(const std::vector<double>& x,
                                   const std::vector<double>& w,
                                   const LatentCode& z, const Tensor& proj_phi,
                                   int decay_step, int horizon);

// h'(x_t) = h(x_t) + z_proj for every position (z already projected to d_model).
std::vector<double> input_fusion(const std::vector<double>& token_embeddings,
                                 std::size_t d_model,
                                 const std::vector<double>& z_proj);

// p' = p + logit_map(z).
std::vector<double> logit_fusion(const std::vector<double>& logits,
                                 const LatentCode& z, const Tensor& logit_map);

// ---------------------------------------------------------------------------
// Rollouts

struct Trajectory {
  int prompt_id = -1;
  std::vector<int> prompt_tokens;
  std::vector<int> response_tokens;   // includes the end token when sampled
  std::vector<double> logprobs;       // chosen-token logprob per response token
  std::vector<double> entropies;      // full-distribution entropy per step
  double reward = 0.0;
  bool has_reward = false;
  std::optional<double> advantage;

  // Lineage. Roots have parent_id -1; branches carry the 1-based bifurcation
  // step t* in the parent's response and their latent draw index.
  int id = -1;
  int parent_id = -1;
  int branch_t_star = -1;
  int latent_draw = -1;
  int branch_depth = 0;
  int inherited = 0;    // leading response tokens copied from the parent
  bool truncated = false;
  InjectionState injection;  // how this trajectory was generated

  int T() const { return static_cast<int>(response_tokens.size()); }
  int new_tokens() const { return T() - inherited; }
  bool is_branch() const { return parent_id >= 0; }
  std::vector<int> full_tokens() const;
  // Injection state for re-running the forward over the whole sequence: the
  // decay step equals the number of tokens that were generated live.
  InjectionState training_injection() const;
};

// Autoregressive sampling. Records the model's own (temperature-1) logprob
// and entropy at every step; `temperature` only shapes the sampling draw.
// Stops on eos_id or after max_new response tokens (counting inherited ones),
// setting `truncated` when no eos was reached. When response_prefix is given,
// those tokens are placed at the start of the response and their
// logprobs/entropies are read off the first forward pass — this is how
// branches resume from a parent's prefix.
Trajectory sample_rollout(const std::vector<int>& prompt, PolicyParams& params,
                          const InjectionState& injection, double temperature,
                          int max_new, Rng& rng, int eos_id,
                          const std::vector<int>* response_prefix = nullptr);

}  // namespace i2b
