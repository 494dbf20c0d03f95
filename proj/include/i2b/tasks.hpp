#pragma once

#include <string>
#include <vector>

#include "i2b/model.hpp"
#include "i2b/rng.hpp"

namespace i2b {

// Character-level tokenizer over the arithmetic alphabet. '$' is the
// end-of-answer token; id 15 is reserved headroom so the vocabulary is a
// round 16.
namespace tok {
inline constexpr int kEos = 14;
inline constexpr int kVocab = 16;

int encode_char(char c);                      // vocab_error on unknown chars
std::vector<int> encode(const std::string& s);
char decode_char(int id);                     // vocab_error on bad ids
std::string decode(const std::vector<int>& ids);
}  // namespace tok

// One verifiable arithmetic task. The prompt is the expression plus the '='
// marker; the answer is the exact integer result in canonical decimal form.
struct Problem {
  std::string expression;          // e.g. "12+7*3"
  std::string answer;              // e.g. "33"
  int difficulty = 1;              // number of binary operations, 1..9
  std::vector<int> prompt_tokens;  // encode(expression + "=")

  std::string prompt_text() const { return expression + "="; }
};

struct VerifyResult {
  int reward = 0;      // 1 iff the extracted answer equals the canonical one
  bool parse_ok = false;  // a signed integer run was found at all
};

struct RewardRecord {
  int trajectory_id = -1;
  int reward = 0;
  bool parse_ok = false;
};

// Uniform operands in [0, 99] joined by `difficulty` operators from {+,-,*};
// the answer is evaluated exactly with standard precedence.
Problem generate_problem(int difficulty, Rng& rng);

// Extracts the final contiguous signed-integer run of the response (the text
// after the last '=' if one is present, cut at the first end token) and
// compares it with the canonical answer. Never throws; malformed output is a
// zero-reward parse failure.
VerifyResult verify(const Problem& problem, const std::string& generated_text);

// The learning-frontier filter: probe each problem with n_probe plain
// rollouts and drop the ones solved every time (trivial) as well as the ones
// that fail every probe with every response running into the length cap
// (intractable). Throws frontier_empty_error when nothing survives.
std::vector<Problem> filter_dataset(const std::vector<Problem>& problems,
                                    PolicyParams& params, int n_probe, int max_new,
                                    Rng& rng);

// Line-oriented problem sets: difficulty<TAB>expression<TAB>answer.
void save_problems(const std::string& path, const std::vector<Problem>& problems);
std::vector<Problem> load_problems(const std::string& path);

}  // namespace i2b
