#pragma once

#include <stdexcept>
#include <string>

namespace i2b {

// Base for everything this library throws on purpose.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand dimensions disagree (matmul, concat, elementwise pairs, ...).
struct shape_error : error {
  using error::error;
};

// NaN/Inf fed into an operation that requires finite input.
struct numeric_error : error {
  using error::error;
};

// A precondition that is the caller's job to uphold was violated.
struct contract_error : error {
  using error::error;
};

// An operation was invoked before the state it depends on exists
// (e.g. IB-scoring a trajectory that has no advantage yet).
struct sequencing_error : error {
  using error::error;
};

// Fixed-size budget exceeded (sequence longer than max_seq_len, ...).
struct capacity_error : error {
  using error::error;
};

// Token id outside the vocabulary, or a character we cannot encode.
struct vocab_error : error {
  using error::error;
};

// Recoverable signal: entropy history too small for percentile queries.
// Callers warm up with plain rollouts and retry.
struct history_cold_error : error {
  using error::error;
};

// Recoverable signal: dataset filtering removed every problem.
// Callers widen the difficulty range and retry.
struct frontier_empty_error : error {
  using error::error;
};

// Bad command line / config file; the CLI maps this to a nonzero exit.
struct usage_error : error {
  using error::error;
};

}  // namespace i2b
