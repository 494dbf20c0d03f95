#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "i2b/checkpoint.hpp"
#include "i2b/errors.hpp"

using namespace i2b;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_head = 4;
  cfg.max_seq_len = 48;
  cfg.d_z = 4;
  cfg.psa_layers = {1};
  cfg.decay_horizon = 8;
  return cfg;
}

struct TempFile {
  std::string path;
  explicit TempFile(std::string p) : path(std::move(p)) {}
  ~TempFile() { std::remove(path.c_str()); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  REQUIRE(bool(out));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_SUITE_BEGIN("checkpoint");

TEST_CASE("checkpoint: round trip is bit-exact") {
  Rng rng(3);
  PolicyParams policy = PolicyParams::init(tiny_config(), rng);
  Rng crng = rng.fork("cvae");
  CvaeParams cvae = CvaeParams::init(tiny_config(), 16, crng);
  policy.version = 42;

  TempFile f("/tmp/i2b_test_ckpt_rt.bin");
  save_checkpoint(f.path, policy, cvae);
  Checkpoint loaded = load_checkpoint(f.path);

  CHECK(loaded.policy.version == 42);
  CHECK(loaded.policy.cfg.d_model == 8);
  CHECK(loaded.policy.cfg.psa_layers == std::vector<int>{1});
  CHECK(loaded.cvae.width == 16);
  CHECK(loaded.cvae.d_z == 4);

  auto want = policy.named_tensors();
  auto got = loaded.policy.named_tensors();
  REQUIRE(want.size() == got.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    CHECK(want[i].first == got[i].first);
    CHECK(want[i].second->shape == got[i].second->shape);
    CHECK(want[i].second->data == got[i].second->data);  // exact bytes
  }
  auto want_c = cvae.named_tensors();
  auto got_c = loaded.cvae.named_tensors();
  REQUIRE(want_c.size() == got_c.size());
  for (std::size_t i = 0; i < want_c.size(); ++i)
    CHECK(want_c[i].second->data == got_c[i].second->data);

  // Saving the loaded copy reproduces the file byte for byte.
  TempFile f2("/tmp/i2b_test_ckpt_rt2.bin");
  save_checkpoint(f2.path, loaded.policy, loaded.cvae);
  CHECK(slurp(f.path) == slurp(f2.path));
}

TEST_CASE("checkpoint: strict load rejects damaged files") {
  Rng rng(4);
  PolicyParams policy = PolicyParams::init(tiny_config(), rng);
  Rng crng = rng.fork("cvae");
  CvaeParams cvae = CvaeParams::init(tiny_config(), 16, crng);
  TempFile f("/tmp/i2b_test_ckpt_bad.bin");
  save_checkpoint(f.path, policy, cvae);
  const std::string good = slurp(f.path);

  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint("/tmp/i2b_no_such_ckpt.bin"), usage_error);
  }
  SUBCASE("bad magic") {
    std::string bytes = good;
    bytes[0] = 'X';
    spit(f.path, bytes);
    CHECK_THROWS_AS(load_checkpoint(f.path), usage_error);
  }
  SUBCASE("tensor name mismatch") {
    // Layout: magic(8) + nine i32 config words(36) + psa count(4) + one psa
    // entry(4) + version(8) + tensor count(4) = 64, then the u32 length of
    // the first tensor name; its bytes start at 68.
    std::string bytes = good;
    REQUIRE(bytes.substr(68, 14) == "policy.tok_emb");
    bytes[68] = 'q';
    spit(f.path, bytes);
    CHECK_THROWS_WITH_AS(load_checkpoint(f.path),
                         doctest::Contains("expected tensor"), usage_error);
  }
  SUBCASE("rank mismatch") {
    std::string bytes = good;
    bytes[82] = static_cast<char>(7);  // u32 rank of the first tensor
    spit(f.path, bytes);
    CHECK_THROWS_WITH_AS(load_checkpoint(f.path), doctest::Contains("rank"),
                         usage_error);
  }
  SUBCASE("shape mismatch") {
    std::string bytes = good;
    bytes[86] = static_cast<char>(99);  // low byte of the first u64 dim
    spit(f.path, bytes);
    CHECK_THROWS_WITH_AS(load_checkpoint(f.path), doctest::Contains("shape"),
                         usage_error);
  }
  SUBCASE("truncated") {
    spit(f.path, good.substr(0, good.size() / 2));
    CHECK_THROWS_WITH_AS(load_checkpoint(f.path), doctest::Contains("truncated"),
                         usage_error);
  }
  SUBCASE("trailing bytes") {
    spit(f.path, good + "Z");
    CHECK_THROWS_WITH_AS(load_checkpoint(f.path), doctest::Contains("trailing"),
                         usage_error);
  }
  SUBCASE("config words that fail validation") {
    std::string bytes = good;
    bytes[12] = 0;  // d_model low byte -> 0, rejected by ModelConfig::validate
    spit(f.path, bytes);
    CHECK_THROWS_WITH_AS(load_checkpoint(f.path), doctest::Contains("bad stored"),
                         usage_error);
  }
}

TEST_CASE("checkpoint: loading restores generation behavior exactly") {
  // A checkpoint is only as good as the rollouts it reproduces.
  Rng rng(5);
  PolicyParams policy = PolicyParams::init(tiny_config(), rng);
  Rng crng = rng.fork("cvae");
  CvaeParams cvae = CvaeParams::init(tiny_config(), 16, crng);
  TempFile f("/tmp/i2b_test_ckpt_gen.bin");
  save_checkpoint(f.path, policy, cvae);
  Checkpoint loaded = load_checkpoint(f.path);

  const std::vector<int> prompt = {1, 2, 10, 3, 13};
  Rng a(77), b(77);
  Trajectory ta = sample_rollout(prompt, policy, InjectionState::none(), 1.0, 8, a, 14);
  Trajectory tb = sample_rollout(prompt, loaded.policy, InjectionState::none(), 1.0, 8, b, 14);
  CHECK(ta.response_tokens == tb.response_tokens);
  CHECK(ta.logprobs == tb.logprobs);
}

TEST_CASE("file_content_hash: FNV-1a reference values and sensitivity") {
  TempFile f("/tmp/i2b_test_hash.bin");
  spit(f.path, "");
  CHECK(file_content_hash(f.path) == 14695981039346656037ULL);  // offset basis
  spit(f.path, "a");
  CHECK(file_content_hash(f.path) == 0xaf63dc4c8601ec8cULL);
  spit(f.path, "ab");
  CHECK(file_content_hash(f.path) == 0x089c4407b545986aULL);
  spit(f.path, "b");
  CHECK(file_content_hash(f.path) != 0xaf63dc4c8601ec8cULL);
  CHECK_THROWS_AS(file_content_hash("/tmp/i2b_no_such_file.bin"), usage_error);
}

TEST_SUITE_END();
