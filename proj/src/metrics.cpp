#include "i2b/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <set>

#include "i2b/errors.hpp"

namespace i2b {

namespace {

using Ngram = std::vector<int>;

// C(n-c, k)/C(n, k) as the running product of (n-c-i)/(n-i); zero once the
// numerator runs out of items (n-c < k).
double miss_ratio(int n, int c, int k) {
  if (n - c < k) return 0.0;
  double ratio = 1.0;
  for (int i = 0; i < k; ++i)
    ratio *= static_cast<double>(n - c - i) / static_cast<double>(n - i);
  return ratio;
}

std::map<Ngram, int> ngram_counts(const std::vector<int>& text, int n) {
  std::map<Ngram, int> counts;
  for (std::size_t i = 0; i + n <= text.size(); ++i)
    ++counts[Ngram(text.begin() + i, text.begin() + i + n)];
  return counts;
}

}  // namespace

double pass_at_k(const std::vector<std::vector<unsigned char>>& flags, int k) {
  if (k < 1) throw contract_error("pass_at_k: k must be positive");
  if (flags.empty()) throw contract_error("pass_at_k: no prompts");
  double total = 0.0;
  for (const auto& prompt : flags) {
    const int n = static_cast<int>(prompt.size());
    if (n == 0) throw contract_error("pass_at_k: prompt with no samples");
    if (k > n) throw contract_error("pass_at_k: k exceeds sample count");
    const int c = static_cast<int>(std::count(prompt.begin(), prompt.end(), 1));
    total += 1.0 - miss_ratio(n, c, k);
  }
  return total / static_cast<double>(flags.size());
}

double distinct_n(const std::vector<std::vector<int>>& texts, int n) {
  if (n < 1) throw contract_error("distinct_n: n must be positive");
  std::set<Ngram> unique;
  std::size_t total = 0;
  for (const auto& text : texts)
    for (std::size_t i = 0; i + n <= text.size(); ++i) {
      unique.insert(Ngram(text.begin() + i, text.begin() + i + n));
      ++total;
    }
  if (total == 0) return 0.0;
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

double bleu(const std::vector<int>& candidate,
            const std::vector<std::vector<int>>& references) {
  if (references.empty()) throw contract_error("bleu: no references");
  const int c = static_cast<int>(candidate.size());
  if (c == 0) return 0.0;

  double log_precision = 0.0;
  for (int n = 1; n <= 4; ++n) {
    const auto cand_counts = ngram_counts(candidate, n);
    std::map<Ngram, int> clip;
    for (const auto& ref : references)
      for (const auto& [gram, count] : ngram_counts(ref, n))
        clip[gram] = std::max(clip[gram], count);
    long total = 0, matched = 0;
    for (const auto& [gram, count] : cand_counts) {
      total += count;
      auto it = clip.find(gram);
      if (it != clip.end()) matched += std::min(count, it->second);
    }
    // Add-one smoothing keeps the geometric mean finite when an order has no
    // matches (including orders longer than the candidate itself).
    const double p = matched > 0
                         ? static_cast<double>(matched) / static_cast<double>(total)
                         : 1.0 / static_cast<double>(total + 1);
    log_precision += 0.25 * std::log(p);
  }

  int r = static_cast<int>(references.front().size());
  for (const auto& ref : references) {
    const int len = static_cast<int>(ref.size());
    const bool closer = std::abs(len - c) < std::abs(r - c);
    const bool tie_shorter = std::abs(len - c) == std::abs(r - c) && len < r;
    if (closer || tie_shorter) r = len;
  }
  const double brevity =
      c > r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
  return brevity * std::exp(log_precision);
}

double self_bleu_diversity(const std::vector<std::vector<int>>& texts) {
  if (texts.size() < 2) throw contract_error("self_bleu_diversity: need at least two texts");
  double total = 0.0;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    std::vector<std::vector<int>> refs;
    refs.reserve(texts.size() - 1);
    for (std::size_t j = 0; j < texts.size(); ++j)
      if (j != i) refs.push_back(texts[j]);
    total += bleu(texts[i], refs);
  }
  const double diversity = 1.0 - total / static_cast<double>(texts.size());
  return std::clamp(diversity, 0.0, 1.0);
}

double perplexity(const std::vector<double>& logprobs) {
  if (logprobs.empty()) throw contract_error("perplexity: no tokens");
  double sum = 0.0;
  for (double lp : logprobs) {
    if (lp > 1e-9) throw contract_error("perplexity: log probability above zero");
    sum += std::min(lp, 0.0);
  }
  return std::exp(-sum / static_cast<double>(logprobs.size()));
}

double ngram_repetition(const std::vector<int>& text, int n) {
  if (n < 1) throw contract_error("ngram_repetition: n must be positive");
  if (static_cast<int>(text.size()) < n) return 0.0;
  return 1.0 - distinct_n({text}, n);
}

EvalReport evaluate(const std::vector<PromptSamples>& prompts,
                    const std::vector<int>& k_list) {
  if (prompts.empty()) throw contract_error("evaluate: no prompts");
  if (k_list.empty()) throw contract_error("evaluate: no k values");

  std::vector<std::vector<unsigned char>> flags;
  flags.reserve(prompts.size());
  bool all_multi_sample = true;
  for (const auto& p : prompts) {
    const std::size_t n = p.responses.size();
    if (n == 0) throw contract_error("evaluate: prompt with no samples");
    if (p.correct.size() != n || p.logprobs.size() != n || p.entropies.size() != n)
      throw contract_error("evaluate: ragged per-response arrays");
    for (std::size_t s = 0; s < n; ++s)
      if (p.logprobs[s].size() != p.responses[s].size() ||
          p.entropies[s].size() != p.responses[s].size())
        throw contract_error("evaluate: per-token arrays do not match response");
    if (n < 2) all_multi_sample = false;
    flags.push_back(p.correct);
  }

  EvalReport report;
  for (int k : k_list) report.pass_at[k] = pass_at_k(flags, k);

  double distinct_sum[5] = {};
  double bleu_div_sum = 0.0;
  for (const auto& p : prompts) {
    for (int n = 1; n <= 4; ++n) distinct_sum[n] += distinct_n(p.responses, n);
    if (all_multi_sample) bleu_div_sum += self_bleu_diversity(p.responses);
  }
  const double n_prompts = static_cast<double>(prompts.size());
  for (int n = 1; n <= 4; ++n) report.distinct[n] = distinct_sum[n] / n_prompts;
  report.self_bleu_diversity = all_multi_sample ? bleu_div_sum / n_prompts : 0.0;

  double ppl_sum = 0.0, rep_sum = 0.0, len_sum = 0.0, ent_sum = 0.0;
  std::size_t n_responses = 0, n_tokens = 0;
  for (const auto& p : prompts)
    for (std::size_t s = 0; s < p.responses.size(); ++s) {
      ppl_sum += p.logprobs[s].empty() ? 1.0 : perplexity(p.logprobs[s]);
      rep_sum += ngram_repetition(p.responses[s], 4);
      len_sum += static_cast<double>(p.responses[s].size());
      for (double h : p.entropies[s]) ent_sum += h;
      n_tokens += p.entropies[s].size();
      ++n_responses;
    }
  report.mean_perplexity = ppl_sum / static_cast<double>(n_responses);
  report.repetition_4gram = rep_sum / static_cast<double>(n_responses);
  report.mean_length = len_sum / static_cast<double>(n_responses);
  report.mean_entropy =
      n_tokens == 0 ? 0.0 : ent_sum / static_cast<double>(n_tokens);
  return report;
}

}  // namespace i2b
