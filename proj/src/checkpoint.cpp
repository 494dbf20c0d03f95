#include "i2b/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "i2b/errors.hpp"

namespace i2b {

namespace {

constexpr char kMagic[8] = {'I', '2', 'B', 'C', 'K', 'P', 'T', '1'};

void put_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out) throw usage_error("checkpoint: write failed");
}

void get_bytes(std::istream& in, void* p, std::size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n))
    throw usage_error("checkpoint: truncated file");
}

template <typename T>
void put(std::ostream& out, T v) {
  put_bytes(out, &v, sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v;
  get_bytes(in, &v, sizeof(T));
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  put_bytes(out, s.data(), s.size());
}

std::string get_string(std::istream& in) {
  const auto n = get<std::uint32_t>(in);
  if (n > 4096) throw usage_error("checkpoint: implausible name length");
  std::string s(n, '\0');
  get_bytes(in, s.data(), n);
  return s;
}

void put_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
  put_string(out, name);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
  for (std::size_t d : t.shape) put<std::uint64_t>(out, d);
  put_bytes(out, t.data.data(), t.data.size() * sizeof(double));
}

void get_tensor_into(std::istream& in, const std::string& want_name, Tensor& t) {
  const std::string name = get_string(in);
  if (name != want_name)
    throw usage_error("checkpoint: expected tensor '" + want_name + "', found '" +
                      name + "'");
  const auto rank = get<std::uint32_t>(in);
  if (rank != t.shape.size())
    throw usage_error("checkpoint: rank mismatch for '" + name + "'");
  for (std::size_t d : t.shape) {
    const auto stored = get<std::uint64_t>(in);
    if (stored != d)
      throw usage_error("checkpoint: shape mismatch for '" + name + "'");
  }
  get_bytes(in, t.data.data(), t.data.size() * sizeof(double));
}

void put_config(std::ostream& out, const ModelConfig& cfg, int width) {
  put<std::int32_t>(out, cfg.vocab_size);
  put<std::int32_t>(out, cfg.d_model);
  put<std::int32_t>(out, cfg.n_layers);
  put<std::int32_t>(out, cfg.n_heads);
  put<std::int32_t>(out, cfg.d_head);
  put<std::int32_t>(out, cfg.max_seq_len);
  put<std::int32_t>(out, cfg.d_z);
  put<std::int32_t>(out, cfg.decay_horizon);
  put<std::int32_t>(out, width);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.psa_layers.size()));
  for (int l : cfg.psa_layers) put<std::int32_t>(out, l);
}

ModelConfig get_config(std::istream& in, int& width) {
  ModelConfig cfg;
  cfg.vocab_size = get<std::int32_t>(in);
  cfg.d_model = get<std::int32_t>(in);
  cfg.n_layers = get<std::int32_t>(in);
  cfg.n_heads = get<std::int32_t>(in);
  cfg.d_head = get<std::int32_t>(in);
  cfg.max_seq_len = get<std::int32_t>(in);
  cfg.d_z = get<std::int32_t>(in);
  cfg.decay_horizon = get<std::int32_t>(in);
  width = get<std::int32_t>(in);
  const auto n_psa = get<std::uint32_t>(in);
  if (n_psa > 1024) throw usage_error("checkpoint: implausible layer list");
  for (std::uint32_t i = 0; i < n_psa; ++i)
    cfg.psa_layers.push_back(get<std::int32_t>(in));
  try {
    cfg.validate();
  } catch (const error& e) {
    throw usage_error(std::string("checkpoint: bad stored config: ") + e.what());
  }
  if (width < 1) throw usage_error("checkpoint: bad stored encoder width");
  return cfg;
}

}  // namespace

void save_checkpoint(const std::string& path, PolicyParams& policy,
                     CvaeParams& cvae) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw usage_error("checkpoint: cannot open '" + path + "' for writing");
  put_bytes(out, kMagic, sizeof(kMagic));
  put_config(out, policy.cfg, cvae.width);
  put<std::uint64_t>(out, policy.version);

  const auto policy_tensors = policy.named_tensors();
  const auto cvae_tensors = cvae.named_tensors();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(policy_tensors.size()));
  for (const auto& [name, t] : policy_tensors) put_tensor(out, name, *t);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cvae_tensors.size()));
  for (const auto& [name, t] : cvae_tensors) put_tensor(out, name, *t);
  out.flush();
  if (!out) throw usage_error("checkpoint: write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw usage_error("checkpoint: cannot open '" + path + "'");
  char magic[8];
  get_bytes(in, magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw usage_error("checkpoint: bad magic");

  int width = 0;
  const ModelConfig cfg = get_config(in, width);
  const auto version = get<std::uint64_t>(in);

  // Build parameter holders of the right shapes, then overwrite their data.
  Rng scratch(0);
  Checkpoint ckpt{PolicyParams::init(cfg, scratch),
                  CvaeParams::init(cfg, width, scratch)};
  ckpt.policy.version = version;

  const auto policy_tensors = ckpt.policy.named_tensors();
  const auto cvae_tensors = ckpt.cvae.named_tensors();
  if (get<std::uint32_t>(in) != policy_tensors.size())
    throw usage_error("checkpoint: policy tensor count mismatch");
  for (const auto& [name, t] : policy_tensors) get_tensor_into(in, name, *t);
  if (get<std::uint32_t>(in) != cvae_tensors.size())
    throw usage_error("checkpoint: cvae tensor count mismatch");
  for (const auto& [name, t] : cvae_tensors) get_tensor_into(in, name, *t);

  in.peek();
  if (!in.eof()) throw usage_error("checkpoint: trailing bytes");
  return ckpt;
}

std::uint64_t file_content_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw usage_error("hash: cannot open '" + path + "'");
  std::uint64_t h = 14695981039346656037ULL;  // FNV-1a offset basis
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    const std::streamsize n = in.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;  // FNV prime
    }
    if (in.eof()) break;
  }
  return h;
}

}  // namespace i2b
