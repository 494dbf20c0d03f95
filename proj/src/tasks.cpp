#include "i2b/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <string_view>

#include "i2b/threading.hpp"

namespace i2b {

namespace tok {

namespace {
constexpr const char* kAlphabet = "0123456789+-*=$";  // id == index
}

int encode_char(char c) {
  for (int i = 0; kAlphabet[i] != '\0'; ++i)
    if (kAlphabet[i] == c) return i;
  throw vocab_error(std::string("tokenizer: cannot encode '") + c + "'");
}

std::vector<int> encode(const std::string& s) {
  std::vector<int> ids;
  ids.reserve(s.size());
  for (char c : s) ids.push_back(encode_char(c));
  return ids;
}

char decode_char(int id) {
  if (id >= 0 && id < 15) return kAlphabet[id];
  if (id == 15) return '_';  // reserved slot, never produced by encode
  throw vocab_error("tokenizer: id outside vocabulary");
}

std::string decode(const std::vector<int>& ids) {
  std::string s;
  s.reserve(ids.size());
  for (int id : ids) s.push_back(decode_char(id));
  return s;
}

}  // namespace tok

namespace {

std::string int128_to_string(__int128 v) {
  if (v == 0) return "0";
  const bool neg = v < 0;
  unsigned __int128 u = neg ? -static_cast<unsigned __int128>(v) : v;
  std::string s;
  while (u > 0) {
    s.push_back(static_cast<char>('0' + static_cast<int>(u % 10)));
    u /= 10;
  }
  if (neg) s.push_back('-');
  std::reverse(s.begin(), s.end());
  return s;
}

// Exact evaluation with '*' binding tighter than '+'/'-'. Operands stay
// within [0,99] and at most 9 operations, so |result| <= 99^10 < 2^70 fits
// comfortably in __int128.
__int128 evaluate(const std::vector<long>& operands, const std::vector<char>& ops) {
  std::vector<__int128> terms;   // additive terms, sign folded in
  std::vector<char> term_sign;
  __int128 cur = operands[0];
  char pending = '+';
  for (std::size_t i = 0; i < ops.size(); ++i) {
    if (ops[i] == '*') {
      cur *= operands[i + 1];
    } else {
      terms.push_back(pending == '-' ? -cur : cur);
      pending = ops[i];
      cur = operands[i + 1];
    }
  }
  terms.push_back(pending == '-' ? -cur : cur);
  __int128 total = 0;
  for (__int128 t : terms) total += t;
  return total;
}

// Sign-and-leading-zero normalization of a digit run: "019" -> "19",
// "-07" -> "-7", "000" -> "0", "-0" -> "0".
std::string canonicalize_run(bool negative, const std::string& digits) {
  std::size_t i = 0;
  while (i + 1 < digits.size() && digits[i] == '0') ++i;
  const std::string mag = digits.substr(i);
  if (mag == "0") return "0";
  return negative ? "-" + mag : mag;
}

}  // namespace

Problem generate_problem(int difficulty, Rng& rng) {
  if (difficulty < 1 || difficulty > 9)
    throw contract_error("generate_problem: difficulty must be in [1, 9]");
  std::vector<long> operands;
  std::vector<char> ops;
  for (int i = 0; i <= difficulty; ++i)
    operands.push_back(static_cast<long>(rng.uniform_int(0, 99)));
  const char kOps[3] = {'+', '-', '*'};
  for (int i = 0; i < difficulty; ++i)
    ops.push_back(kOps[rng.uniform_int(0, 2)]);

  Problem p;
  p.difficulty = difficulty;
  std::ostringstream expr;
  expr << operands[0];
  for (int i = 0; i < difficulty; ++i) expr << ops[i] << operands[i + 1];
  p.expression = expr.str();
  p.answer = int128_to_string(evaluate(operands, ops));
  p.prompt_tokens = tok::encode(p.prompt_text());
  return p;
}

VerifyResult verify(const Problem& problem, const std::string& generated_text) {
  // Region of interest: after the last '=' if the text carries one (e.g. the
  // caller passed prompt+response), cut at the first end token.
  std::string_view region(generated_text);
  if (const auto eq = region.rfind('='); eq != std::string_view::npos)
    region = region.substr(eq + 1);
  if (const auto end = region.find('$'); end != std::string_view::npos)
    region = region.substr(0, end);

  // Final maximal digit run, with a '-' glued on iff it directly precedes the
  // run and is not itself preceded by a digit (that would be binary minus).
  VerifyResult out;
  std::size_t run_begin = std::string_view::npos, run_end = 0;
  for (std::size_t i = region.size(); i-- > 0;) {
    if (std::isdigit(static_cast<unsigned char>(region[i]))) {
      run_end = i + 1;
      run_begin = i;
      while (run_begin > 0 && std::isdigit(static_cast<unsigned char>(region[run_begin - 1])))
        --run_begin;
      break;
    }
  }
  if (run_begin == std::string_view::npos) return out;  // no digits at all
  out.parse_ok = true;
  bool negative = false;
  if (run_begin > 0 && region[run_begin - 1] == '-' &&
      (run_begin < 2 || !std::isdigit(static_cast<unsigned char>(region[run_begin - 2]))))
    negative = true;
  const std::string extracted =
      canonicalize_run(negative, std::string(region.substr(run_begin, run_end - run_begin)));
  out.reward = extracted == problem.answer ? 1 : 0;
  return out;
}

std::vector<Problem> filter_dataset(const std::vector<Problem>& problems,
                                    PolicyParams& params, int n_probe, int max_new,
                                    Rng& rng) {
  if (n_probe < 2) throw contract_error("filter_dataset: n_probe must be >= 2");
  std::vector<char> keep(problems.size(), 0);
  parallel_for(static_cast<int>(problems.size()), [&](int i) {
    int correct = 0, truncated = 0;
    for (int j = 0; j < n_probe; ++j) {
      Rng r = rng.fork("filter-probe", i, j);
      const Trajectory t = sample_rollout(problems[i].prompt_tokens, params,
                                          InjectionState::none(), 1.0, max_new, r, tok::kEos);
      correct += verify(problems[i], tok::decode(t.response_tokens)).reward;
      truncated += t.truncated ? 1 : 0;
    }
    const bool trivial = correct == n_probe;
    const bool intractable = correct == 0 && truncated == n_probe;
    keep[i] = trivial || intractable ? 0 : 1;
  });
  std::vector<Problem> kept;
  for (std::size_t i = 0; i < problems.size(); ++i)
    if (keep[i]) kept.push_back(problems[i]);
  if (kept.empty())
    throw frontier_empty_error("filter_dataset: no problems on the learning frontier");
  return kept;
}

void save_problems(const std::string& path, const std::vector<Problem>& problems) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw usage_error("cannot write problem set: " + path);
  for (const Problem& p : problems)
    out << p.difficulty << '\t' << p.expression << '\t' << p.answer << '\n';
}

std::vector<Problem> load_problems(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw usage_error("cannot read problem set: " + path);
  std::vector<Problem> problems;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    Problem p;
    std::string diff;
    if (!std::getline(row, diff, '\t') || !std::getline(row, p.expression, '\t') ||
        !std::getline(row, p.answer))
      throw usage_error("problem set " + path + ": malformed line " + std::to_string(lineno));
    p.difficulty = std::stoi(diff);
    if (p.difficulty < 1 || p.difficulty > 9)
      throw usage_error("problem set " + path + ": difficulty out of range at line " +
                        std::to_string(lineno));
    p.prompt_tokens = tok::encode(p.prompt_text());
    problems.push_back(std::move(p));
  }
  return problems;
}

}  // namespace i2b
