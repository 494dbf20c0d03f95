#include "doctest.h"

#include <cmath>
#include <vector>

#include "i2b/cvae.hpp"

using namespace i2b;

namespace {

ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.vocab_size = 6;
  cfg.d_model = 4;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_head = 2;
  cfg.max_seq_len = 12;
  cfg.d_z = 3;
  cfg.psa_layers = {1};
  return cfg;
}

struct Setup {
  PolicyParams policy;
  CvaeParams cvae;
};

Setup make_setup(std::uint64_t seed) {
  Rng rng(seed);
  Setup s{PolicyParams::init(toy_config(), rng), CvaeParams{}};
  s.cvae = CvaeParams::init(toy_config(), 5, rng);
  return s;
}

}  // namespace

TEST_SUITE_BEGIN("cvae");

TEST_CASE("encode_context: single token equals its mapped hidden state") {
  Setup s = make_setup(31);
  const std::vector<int> ctx{2};
  const auto got = encode_context(ctx, s.cvae, s.policy);

  Tape tape(false);
  const ForwardResult fr = forward_on_tape(tape, ctx, s.policy, InjectionState::none());
  const auto hidden = tape.val(fr.hidden);  // one row
  for (int j = 0; j < s.cvae.width; ++j) {
    double expect = s.cvae.enc_b.data[j];
    for (int i = 0; i < s.policy.cfg.d_model; ++i)
      expect += hidden[i] * s.cvae.enc_w.at(i, j);
    CHECK(got[j] == doctest::Approx(expect).epsilon(1e-14));
  }
}

TEST_CASE("encode_context: positional, so permutations differ") {
  Setup s = make_setup(37);
  const auto ab = encode_context({1, 4}, s.cvae, s.policy);
  const auto ba = encode_context({4, 1}, s.cvae, s.policy);
  double max_diff = 0.0;
  for (std::size_t j = 0; j < ab.size(); ++j)
    max_diff = std::max(max_diff, std::abs(ab[j] - ba[j]));
  CHECK(max_diff > 1e-9);
  CHECK_THROWS_AS(encode_context({}, s.cvae, s.policy), contract_error);
}

TEST_CASE("prior: zero weights give the standard normal, and the head is linear") {
  Setup s = make_setup(41);
  CvaeParams zeroed = s.cvae;
  std::fill(zeroed.prior_w.data.begin(), zeroed.prior_w.data.end(), 0.0);
  std::fill(zeroed.prior_b.data.begin(), zeroed.prior_b.data.end(), 0.0);
  const auto ctx = encode_context({1, 2, 3}, s.cvae, s.policy);
  const GaussianParams g0 = prior(ctx, zeroed);
  for (double m : g0.mu) CHECK(m == 0.0);
  for (double lv : g0.logvar) CHECK(lv == 0.0);

  const GaussianParams a = prior(ctx, s.cvae), b = prior(ctx, s.cvae);
  CHECK(a.mu == b.mu);
  CHECK(a.logvar == b.logvar);

  // continuity, sharpened by linearity: a coordinate bump moves mu by
  // exactly delta * prior_w[i][j]
  const double delta = 1e-4;
  for (std::size_t i = 0; i < ctx.size(); ++i) {
    auto bumped = ctx;
    bumped[i] += delta;
    const GaussianParams gb = prior(bumped, s.cvae);
    for (int j = 0; j < s.cvae.d_z; ++j)
      CHECK(gb.mu[j] - a.mu[j] ==
            doctest::Approx(delta * s.cvae.prior_w.at(i, j)).epsilon(1e-9));
  }
}

TEST_CASE("prior: logvar is clamped") {
  Setup s = make_setup(43);
  CvaeParams big = s.cvae;
  std::fill(big.prior_w.data.begin(), big.prior_w.data.end(), 0.0);
  for (int j = 0; j < big.d_z; ++j) {
    big.prior_b.data[big.d_z + j] = 1e6;   // absurd logvar head bias
  }
  const GaussianParams g = prior(std::vector<double>(s.cvae.width, 0.0), big);
  for (double lv : g.logvar) CHECK(lv == 10.0);
}

TEST_CASE("reparameterize: hand oracles") {
  GaussianParams g;
  g.mu = {1.0, 1.0};
  g.logvar = {std::log(4.0), std::log(4.0)};
  CHECK(reparameterize(g, {0.0, 0.0}).z == std::vector<double>{1.0, 1.0});
  const auto z = reparameterize(g, {1.0, -1.0}).z;
  CHECK(z[0] == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(z[1] == doctest::Approx(-1.0).epsilon(1e-12));

  GaussianParams unit;
  unit.mu = {0.5, -0.5};
  unit.logvar = {0.0, 0.0};
  const auto ze = reparameterize(unit, {1.0, 0.0}).z;
  CHECK(ze[0] == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(ze[1] == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK_THROWS_AS(reparameterize(unit, {1.0}), shape_error);
}

TEST_CASE("kl_divergence: closed-form oracles and nonnegativity") {
  GaussianParams q, p;
  q.mu = {0.3, -0.2};
  q.logvar = {0.1, -0.4};
  CHECK(kl_divergence(q, q) == doctest::Approx(0.0).epsilon(1e-15));

  GaussianParams std1, shifted;
  std1.mu = {0.0};
  std1.logvar = {0.0};
  shifted.mu = {1.0};
  shifted.logvar = {0.0};
  CHECK(kl_divergence(std1, shifted) == doctest::Approx(0.5).epsilon(1e-12));

  Rng rng(71);
  for (int trial = 0; trial < 100; ++trial) {
    GaussianParams a, b;
    for (int i = 0; i < 3; ++i) {
      a.mu.push_back(rng.normal());
      b.mu.push_back(rng.normal());
      a.logvar.push_back(2.0 * rng.normal());
      b.logvar.push_back(2.0 * rng.normal());
    }
    CHECK(kl_divergence(a, b) >= 0.0);
  }
  GaussianParams wrong;
  wrong.mu = {0.0};
  wrong.logvar = {0.0};
  CHECK_THROWS_AS(kl_divergence(q, wrong), shape_error);
}

TEST_CASE("sample_latents: determinism, indexing, moment check") {
  Setup s = make_setup(47);
  const std::vector<int> ctx{0, 3, 1};
  Rng r1 = Rng(7).fork("draw"), r2 = Rng(7).fork("draw");
  const auto a = sample_latents(ctx, 1, s.cvae, s.policy, r1);
  const auto b = sample_latents(ctx, 1, s.cvae, s.policy, r2);
  REQUIRE(a.size() == 1);
  CHECK(a[0].z == b[0].z);

  Rng r7(11);
  const auto seven = sample_latents(ctx, 7, s.cvae, s.policy, r7);
  REQUIRE(seven.size() == 7);
  for (int j = 0; j < 7; ++j) {
    CHECK(seven[j].draw_index == j + 1);
    CHECK(seven[j].source == LatentSource::prior);
    CHECK(seven[j].z.size() == 3);
  }
  Rng bad(1);
  CHECK_THROWS_AS(sample_latents(ctx, 0, s.cvae, s.policy, bad), contract_error);

  // Pin the prior to a known diagonal Gaussian and check sample moments.
  CvaeParams pinned = s.cvae;
  std::fill(pinned.prior_w.data.begin(), pinned.prior_w.data.end(), 0.0);
  const std::vector<double> mu{0.5, -1.0, 2.0};
  const std::vector<double> lv{std::log(0.5), 0.0, std::log(2.0)};
  for (int j = 0; j < 3; ++j) {
    pinned.prior_b.data[j] = mu[j];
    pinned.prior_b.data[3 + j] = lv[j];
  }
  Rng rm(2024);
  const auto draws = sample_latents(ctx, 10000, pinned, s.policy, rm);
  std::vector<double> mean(3, 0.0);
  for (const auto& c : draws)
    for (int j = 0; j < 3; ++j) mean[j] += c.z[j];
  for (double& m : mean) m /= 10000.0;
  std::vector<std::vector<double>> cov(3, std::vector<double>(3, 0.0));
  for (const auto& c : draws)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) cov[i][j] += (c.z[i] - mean[i]) * (c.z[j] - mean[j]);
  for (auto& row : cov)
    for (double& v : row) v /= 10000.0;
  for (int i = 0; i < 3; ++i) {
    const double want = std::exp(lv[i]);
    CHECK(std::abs(cov[i][i] - want) <= 0.1 * want);
    CHECK(std::abs(mean[i] - mu[i]) <= 0.1);
    for (int j = 0; j < 3; ++j)
      if (i != j)
        CHECK(std::abs(cov[i][j]) <= 0.1 * std::sqrt(cov[i][i] * cov[j][j]));
  }
}

TEST_CASE("elbo_step: exact decomposition and nonnegative KL") {
  Setup s = make_setup(53);
  const std::vector<CvaePair> batch{{{1, 2, 3}, {4, 5}}, {{2, 0}, {1, 1, 0}}};
  for (Tensor* t : elbo_trainable(s.cvae, s.policy)) t->zero_grad();
  Rng rng(99);
  const ElboReport rep = elbo_step(batch, s.cvae, s.policy, InjectionMode::psa, rng);
  CHECK(rep.loss == rep.recon + rep.kl);  // built as that very sum
  CHECK(rep.kl >= 0.0);
  CHECK(std::isfinite(rep.loss));
}

TEST_CASE("elbo_step: posterior pinned to prior leaves pure reconstruction") {
  Setup s = make_setup(59);
  for (Tensor* t : {&s.cvae.prior_w, &s.cvae.prior_b, &s.cvae.post_w, &s.cvae.post_b})
    std::fill(t->data.begin(), t->data.end(), 0.0);
  Rng rng(17);
  const ElboReport rep =
      elbo_step({{{1, 2}, {3, 4}}}, s.cvae, s.policy, InjectionMode::psa, rng);
  CHECK(rep.kl == 0.0);
  CHECK(rep.loss == rep.recon);
}

TEST_CASE("elbo_step: contract errors") {
  Setup s = make_setup(61);
  Rng rng(1);
  CHECK_THROWS_AS(elbo_step({}, s.cvae, s.policy, InjectionMode::psa, rng), contract_error);
  CHECK_THROWS_AS(elbo_step({{{}, {1}}}, s.cvae, s.policy, InjectionMode::psa, rng),
                  contract_error);
  CHECK_THROWS_AS(elbo_step({{{1}, {}}}, s.cvae, s.policy, InjectionMode::psa, rng),
                  contract_error);
  CHECK_THROWS_AS(elbo_step({{{1}, {2}}}, s.cvae, s.policy, InjectionMode::none, rng),
                  contract_error);
}

TEST_CASE("elbo_step: gradients pass finite differences") {
  Setup s = make_setup(67);
  const std::vector<CvaePair> batch{{{1, 2, 3}, {4, 5}}, {{0, 2}, {3, 1}}};
  const auto trainable = elbo_trainable(s.cvae, s.policy);

  auto run = [&]() {
    Rng rng(4242);  // frozen noise: the ELBO is deterministic per call
    return elbo_step(batch, s.cvae, s.policy, InjectionMode::psa, rng);
  };
  for (Tensor* t : trainable) t->zero_grad();
  s.policy.zero_grads();
  run();  // analytic gradients

  auto eval = [&]() {
    // elbo_step accumulates into grads; shield the analytic ones
    std::vector<std::vector<double>> saved;
    saved.reserve(trainable.size());
    for (Tensor* t : trainable) saved.push_back(t->grad);
    const double loss = run().loss;
    for (std::size_t i = 0; i < trainable.size(); ++i) trainable[i]->grad = saved[i];
    return loss;
  };
  const std::vector<std::string> names{"enc_w",   "enc_b",   "prior_w", "prior_b",
                                       "post_w",  "post_b",  "proj_phi", "w_kz",
                                       "w_vz",    "logit_map"};
  for (std::size_t i = 0; i < trainable.size(); ++i) {
    INFO(names[i]);
    CHECK(finite_difference_check(eval, *trainable[i], 1e-6) < 1e-4);
  }
}

TEST_CASE("elbo_step: 200 steps on a fixed batch almost always descend") {
  Setup s = make_setup(73);
  const std::vector<CvaePair> batch{{{1, 2, 3}, {4, 5, 0}}, {{3, 0}, {2, 2}}};
  const auto trainable = elbo_trainable(s.cvae, s.policy);
  const double lr = 0.02;
  double prev = 0.0;
  int drops = 0;
  for (int step = 0; step < 200; ++step) {
    for (Tensor* t : trainable) t->zero_grad();
    s.policy.zero_grads();
    Rng rng(4242);  // same noise every step: a fixed deterministic objective
    const ElboReport rep = elbo_step(batch, s.cvae, s.policy, InjectionMode::psa, rng);
    if (step > 0 && rep.loss < prev) ++drops;
    prev = rep.loss;
    for (Tensor* t : trainable)
      for (std::size_t i = 0; i < t->data.size(); ++i) t->data[i] -= lr * t->grad[i];
  }
  CHECK(drops >= 179);  // >= 90% of the 199 consecutive pairs
  CHECK(std::isfinite(prev));
}

TEST_SUITE_END();
