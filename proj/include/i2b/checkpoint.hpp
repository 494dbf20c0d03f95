#pragma once

#include <cstdint>
#include <string>

#include "i2b/cvae.hpp"
#include "i2b/model.hpp"

namespace i2b {

// A trained model snapshot: the policy and CVAE parameters plus the config
// that shapes them.
struct Checkpoint {
  PolicyParams policy;
  CvaeParams cvae;
};

// Binary format, native byte order: 8-byte magic "I2BCKPT1", the model
// config, the policy version counter and CVAE head width, then every named
// tensor of the policy followed by the CVAE's, each as (name, rank, dims,
// raw doubles). The round trip is bit-exact. I/O failures raise usage_error.
void save_checkpoint(const std::string& path, PolicyParams& policy,
                     CvaeParams& cvae);

// Strict loader: wrong magic, unknown config values, mismatched tensor
// names or shapes, truncation, and trailing bytes all raise usage_error.
Checkpoint load_checkpoint(const std::string& path);

// FNV-1a 64-bit hash of the file bytes; fingerprints checkpoint inputs in
// run manifests. usage_error when the file cannot be read.
std::uint64_t file_content_hash(const std::string& path);

}  // namespace i2b
