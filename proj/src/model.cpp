#include "i2b/model.hpp"

#include <algorithm>
#include <cmath>

namespace i2b {
namespace {

bool all_zero(const std::vector<double>& v) {
  for (double x : v)
    if (x != 0.0) return false;
  return true;
}

constexpr double kGamma0 = 5e-2;
constexpr double kGammaFloor = 5e-4;

}  // namespace

std::vector<int> ModelConfig::effective_psa_layers() const {
  if (!psa_layers.empty()) return psa_layers;
  std::vector<int> out;
  for (int l = n_layers / 2; l < n_layers; ++l) out.push_back(l);
  return out;
}

void ModelConfig::validate() const {
  if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_head <= 0 ||
      max_seq_len <= 0 || d_z <= 0 || decay_horizon <= 0)
    throw contract_error("model config: all dimensions must be positive");
  if (n_heads * d_head != d_model)
    throw contract_error("model config: n_heads * d_head must equal d_model");
  for (int l : psa_layers)
    if (l < 0 || l >= n_layers) throw contract_error("model config: psa layer out of range");
}

double gamma_decay(int t, int horizon) {
  if (t < 0) t = 0;
  // Floor reached after horizon/2 steps: r^(horizon/2) = floor/gamma0.
  const double r = std::pow(kGammaFloor / kGamma0, 2.0 / static_cast<double>(horizon));
  return std::max(kGamma0 * std::pow(r, static_cast<double>(t)), kGammaFloor);
}

const char* injection_mode_name(InjectionMode m) {
  switch (m) {
    case InjectionMode::none: return "none";
    case InjectionMode::psa: return "psa";
    case InjectionMode::input_fusion: return "input_fusion";
    case InjectionMode::logit_fusion: return "logit_fusion";
  }
  return "?";
}

void InjectionState::validate(int d_z) const {
  if ((mode == InjectionMode::none) != !latent.has_value())
    throw contract_error("injection: mode==none must match an absent latent");
  if (latent && static_cast<int>(latent->z.size()) != d_z)
    throw shape_error("injection: latent dimension != d_z");
  if (decay_step < 0) throw contract_error("injection: negative decay step");
}

PolicyParams PolicyParams::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  PolicyParams p;
  p.cfg = cfg;
  const std::size_t D = cfg.d_model, V = cfg.vocab_size, Z = cfg.d_z;
  Rng r = rng.fork("policy-init");
  p.tok_emb = Tensor::randn(V, D, 0.05, r);
  p.pos_emb = Tensor::randn(cfg.max_seq_len, D, 0.01, r);
  p.layers.resize(cfg.n_layers);
  for (auto& l : p.layers) {
    l.attn_norm_w = Tensor(D, 1.0);
    l.wq = Tensor::randn(D, D, 0.05, r);
    l.wk = Tensor::randn(D, D, 0.05, r);
    l.wv = Tensor::randn(D, D, 0.05, r);
    l.wo = Tensor::randn(D, D, 0.05, r);
    l.ffn_norm_w = Tensor(D, 1.0);
    l.w1 = Tensor::randn(D, 4 * D, 0.05, r);
    l.w2 = Tensor::randn(4 * D, D, 0.05, r);
  }
  p.final_norm_w = Tensor(D, 1.0);
  p.w_out = Tensor::randn(D, V, 0.05, r);
  // Small but nonzero: injected generation must see gradients through these
  // from the first step, and exact zeros would sit on the skip fast path.
  p.proj_phi = Tensor::randn(Z, D, 0.02, r);
  p.w_kz = Tensor::randn(Z, D, 0.02, r);
  p.w_vz = Tensor::randn(Z, D, 0.02, r);
  p.logit_map = Tensor::randn(Z, V, 0.02, r);
  p.version = 0;
  return p;
}

std::vector<std::pair<std::string, Tensor*>> PolicyParams::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("policy.tok_emb", &tok_emb);
  out.emplace_back("policy.pos_emb", &pos_emb);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string base = "policy.layer" + std::to_string(i) + ".";
    out.emplace_back(base + "attn_norm_w", &layers[i].attn_norm_w);
    out.emplace_back(base + "wq", &layers[i].wq);
    out.emplace_back(base + "wk", &layers[i].wk);
    out.emplace_back(base + "wv", &layers[i].wv);
    out.emplace_back(base + "wo", &layers[i].wo);
    out.emplace_back(base + "ffn_norm_w", &layers[i].ffn_norm_w);
    out.emplace_back(base + "w1", &layers[i].w1);
    out.emplace_back(base + "w2", &layers[i].w2);
  }
  out.emplace_back("policy.final_norm_w", &final_norm_w);
  out.emplace_back("policy.w_out", &w_out);
  out.emplace_back("policy.proj_phi", &proj_phi);
  out.emplace_back("policy.w_kz", &w_kz);
  out.emplace_back("policy.w_vz", &w_vz);
  out.emplace_back("policy.logit_map", &logit_map);
  return out;
}

std::vector<Tensor*> PolicyParams::all_tensors() {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

void PolicyParams::zero_grads() {
  for (Tensor* t : all_tensors()) t->zero_grad();
}

// ---------------------------------------------------------------------------

ForwardResult forward_on_tape(Tape& tape, const std::vector<int>& tokens,
                              PolicyParams& params, const InjectionState& injection,
                              std::optional<Tape::Ref> z_override, ForwardTrace* trace) {
  const ModelConfig& cfg = params.cfg;
  const std::size_t L = tokens.size();
  if (L == 0) throw contract_error("forward: empty token sequence");
  if (L > static_cast<std::size_t>(cfg.max_seq_len))
    throw capacity_error("forward: sequence exceeds max_seq_len");
  for (int id : tokens)
    if (id < 0 || id >= cfg.vocab_size) throw vocab_error("forward: token id outside vocabulary");
  injection.validate(cfg.d_z);

  const int dh = cfg.d_head;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto psa_set = cfg.effective_psa_layers();
  auto layer_injected = [&psa_set](int l) {
    return std::find(psa_set.begin(), psa_set.end(), l) != psa_set.end();
  };

  // Latent projections, computed once. A projection whose value is exactly
  // zero (zeroed weights, or a zero latent) is dropped from the graph
  // entirely, which is what makes zero-injection runs bit-identical to the
  // plain forward pass.
  const bool injected = injection.mode != InjectionMode::none;
  Tape::Ref z_ref = -1;
  Tape::Ref pz = -1, kz = -1, vz = -1, lz = -1;  // -1 = absent
  if (injected) {
    if (z_override)
      z_ref = *z_override;
    else
      z_ref = tape.constant(1, injection.latent->z.size(), injection.latent->z);
    if (injection.mode == InjectionMode::psa || injection.mode == InjectionMode::input_fusion) {
      pz = tape.matmul(z_ref, tape.leaf(params.proj_phi));
      if (all_zero(tape.val(pz))) pz = -1;
    }
    if (injection.mode == InjectionMode::psa) {
      kz = tape.matmul(z_ref, tape.leaf(params.w_kz));
      vz = tape.matmul(z_ref, tape.leaf(params.w_vz));
      if (all_zero(tape.val(kz)) && all_zero(tape.val(vz))) kz = vz = -1;
    }
    if (injection.mode == InjectionMode::logit_fusion) {
      lz = tape.matmul(z_ref, tape.leaf(params.logit_map));
      if (all_zero(tape.val(lz))) lz = -1;
    }
  }

  // Embeddings + learned absolute positions.
  Tape::Ref x = tape.add(tape.embed(tape.leaf(params.tok_emb), tokens),
                         tape.slice_rows(tape.leaf(params.pos_emb), 0, L));
  if (injection.mode == InjectionMode::input_fusion && pz >= 0) x = tape.add_rowvec(x, pz);

  // Per-row injection strength: the final row runs at gamma(decay_step), each
  // earlier row at the step it was the final row of, clamped to step 0 for
  // rows that predate the injection. Fixing gamma per row keeps the forward a
  // pure function of the token sequence, so sampled logprobs re-verify.
  Tape::Ref gamma_col = -1;
  if (injection.mode == InjectionMode::psa && pz >= 0) {
    std::vector<double> g(L);
    for (std::size_t r = 0; r < L; ++r) {
      const int step = injection.decay_step - static_cast<int>(L - 1 - r);
      g[r] = gamma_decay(step, cfg.decay_horizon);
    }
    gamma_col = tape.constant(L, 1, std::move(g));
  }

  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerParams& lp = params.layers[l];
    const bool inject_here = injection.mode == InjectionMode::psa && layer_injected(l);

    Tape::Ref norm_w = tape.leaf(lp.attn_norm_w);
    if (inject_here && pz >= 0)
      norm_w = tape.add_rowvec(tape.matmul(gamma_col, pz), norm_w);  // [L, D] per-row scales
    Tape::Ref xn = tape.rms_norm(x, norm_w);

    Tape::Ref q_all = tape.matmul(xn, tape.leaf(lp.wq));
    Tape::Ref k_all = tape.matmul(xn, tape.leaf(lp.wk));
    Tape::Ref v_all = tape.matmul(xn, tape.leaf(lp.wv));

    Tape::Ref heads = -1;
    for (int h = 0; h < cfg.n_heads; ++h) {
      const std::size_t c0 = h * dh, c1 = (h + 1) * dh;
      Tape::Ref qh = tape.slice_cols(q_all, c0, c1);
      Tape::Ref kh = tape.slice_cols(k_all, c0, c1);
      Tape::Ref vh = tape.slice_cols(v_all, c0, c1);
      std::size_t prefix = 0;
      if (inject_here && kz >= 0) {
        kh = tape.concat_rows(tape.slice_cols(kz, c0, c1), kh);
        vh = tape.concat_rows(tape.slice_cols(vz, c0, c1), vh);
        prefix = 1;  // the pseudo slot is visible to every query
      }
      Tape::Ref probs =
          tape.causal_softmax(tape.scale(tape.matmul(qh, kh, false, true), inv_sqrt_dh), prefix);
      Tape::Ref oh = tape.matmul(probs, vh);
      heads = h == 0 ? oh : tape.concat_cols(heads, oh);
    }
    if (trace && trace->layer == l) {
      trace->attn_pre_o = tape.val(heads);
      trace->rows = L;
    }
    x = tape.add(x, tape.matmul(heads, tape.leaf(lp.wo)));

    Tape::Ref ffn_in = tape.rms_norm(x, tape.leaf(lp.ffn_norm_w));
    Tape::Ref ffn = tape.matmul(tape.silu(tape.matmul(ffn_in, tape.leaf(lp.w1))), tape.leaf(lp.w2));
    x = tape.add(x, ffn);
  }

  Tape::Ref hidden = tape.rms_norm(x, tape.leaf(params.final_norm_w));
  Tape::Ref logits = tape.matmul(hidden, tape.leaf(params.w_out));
  if (lz >= 0) logits = tape.add_rowvec(logits, lz);
  return {logits, hidden};
}

std::vector<double> forward(const std::vector<int>& tokens, PolicyParams& params,
                            const InjectionState& injection) {
  Tape tape(false);
  const ForwardResult fr = forward_on_tape(tape, tokens, params, injection);
  return tape.val(fr.logits);
}

double token_entropy(const std::vector<double>& logits_row) {
  if (logits_row.empty()) throw contract_error("token_entropy: empty logits");
  Tape tape(false);
  return tape.val(tape.row_entropy(tape.constant_row(logits_row)))[0];
}

Tensor psa_attention(const Tensor& Q, const Tensor& K, const Tensor& V,
                     const LatentCode& z, const Tensor& w_kz_head,
                     const Tensor& w_vz_head) {
  const std::size_t m = Q.rows(), l = K.rows(), d = Q.cols();
  if (K.cols() != d || V.cols() != d || V.rows() != l)
    throw shape_error("psa_attention: Q/K/V dimensions disagree");
  if (w_kz_head.rows() != z.z.size() || w_kz_head.cols() != d ||
      w_vz_head.rows() != z.z.size() || w_vz_head.cols() != d)
    throw shape_error("psa_attention: latent maps must be d_z x d_head");
  if (m > l) throw shape_error("psa_attention: more queries than keys");

  Tape tape(false);
  Tensor q = Q, k = K, v = V, wk = w_kz_head, wv = w_vz_head;
  const Tape::Ref zr = tape.constant(1, z.z.size(), z.z);
  const Tape::Ref kp = tape.concat_rows(tape.matmul(zr, tape.leaf(wk)), tape.leaf(k));
  const Tape::Ref vp = tape.concat_rows(tape.matmul(zr, tape.leaf(wv)), tape.leaf(v));
  const Tape::Ref scores = tape.scale(tape.matmul(tape.leaf(q), kp, false, true),
                                      1.0 / std::sqrt(static_cast<double>(d)));
  // Queries are the last m positions: query i sees the pseudo slot plus keys
  // up to position l-m+i.
  const Tape::Ref probs = tape.causal_softmax(scores, 1 + l - m);
  const Tape::Ref out = tape.matmul(probs, vp);
  Tensor result(m, d);
  result.data = tape.val(out);
  return result;
}

std::vector<double> modulated_norm(const std::vector<double>& x,
                                   const std::vector<double>& w,
                                   const LatentCode& z, const Tensor& proj_phi,
                                   int decay_step, int horizon) {
  if (x.size() != w.size()) throw shape_error("modulated_norm: x/w length mismatch");
  if (proj_phi.rows() != z.z.size() || proj_phi.cols() != x.size())
    throw shape_error("modulated_norm: proj_phi must be d_z x d_model");
  const double g = gamma_decay(decay_step, horizon);
  std::vector<double> w2(w);
  for (std::size_t j = 0; j < w2.size(); ++j) {
    double pj = 0.0;
    for (std::size_t i = 0; i < z.z.size(); ++i) pj += z.z[i] * proj_phi.at(i, j);
    w2[j] += g * pj;
  }
  return rms_normalize(x, w2);
}

std::vector<double> input_fusion(const std::vector<double>& token_embeddings,
                                 std::size_t d_model,
                                 const std::vector<double>& z_proj) {
  if (z_proj.size() != d_model) throw shape_error("input_fusion: z must be projected to d_model");
  if (token_embeddings.size() % d_model != 0)
    throw shape_error("input_fusion: embeddings not a multiple of d_model");
  std::vector<double> out(token_embeddings);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += z_proj[i % d_model];
  return out;
}

std::vector<double> logit_fusion(const std::vector<double>& logits,
                                 const LatentCode& z, const Tensor& logit_map) {
  if (logit_map.rows() != z.z.size() || logit_map.cols() != logits.size())
    throw shape_error("logit_fusion: map must be d_z x vocab");
  std::vector<double> out(logits);
  for (std::size_t j = 0; j < out.size(); ++j) {
    double pj = 0.0;
    for (std::size_t i = 0; i < z.z.size(); ++i) pj += z.z[i] * logit_map.at(i, j);
    out[j] += pj;
  }
  return out;
}

std::vector<int> Trajectory::full_tokens() const {
  std::vector<int> t(prompt_tokens);
  t.insert(t.end(), response_tokens.begin(), response_tokens.end());
  return t;
}

InjectionState Trajectory::training_injection() const {
  InjectionState inj = injection;
  if (inj.mode != InjectionMode::none) inj.decay_step = new_tokens();
  return inj;
}

}  // namespace i2b
