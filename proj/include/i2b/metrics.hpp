#pragma once

#include <map>
#include <vector>

namespace i2b {

// Aggregate evaluation quantities over sampled responses. Rates live in
// [0,1]; perplexity >= 1; length and entropy are nonnegative.
struct EvalReport {
  std::map<int, double> pass_at;      // k -> unbiased pass@k over prompts
  std::map<int, double> distinct;     // n -> mean per-prompt distinct-n
  double self_bleu_diversity = 0.0;   // 1 - mean self-BLEU within a prompt
  double mean_perplexity = 1.0;       // mean per-response perplexity
  double repetition_4gram = 0.0;      // mean per-response 4-gram repetition
  double mean_length = 0.0;           // mean response token count
  double mean_entropy = 0.0;          // mean per-token sampling entropy
};

// One prompt's sampled responses plus everything eval derives from them.
struct PromptSamples {
  std::vector<std::vector<int>> responses;     // token ids as sampled
  std::vector<unsigned char> correct;          // verify outcome per response
  std::vector<std::vector<double>> logprobs;   // per response, per token
  std::vector<std::vector<double>> entropies;  // per response, per token
};

// Unbiased pass@k: per prompt 1 - C(n-c, k)/C(n, k) where c of the n samples
// are correct, averaged over prompts. flags[p][s] marks sample s of prompt p
// correct. contract_error if k < 1, there are no prompts, a prompt has no
// samples, or k exceeds some prompt's sample count.
double pass_at_k(const std::vector<std::vector<unsigned char>>& flags, int k);

// Unique n-grams over total n-grams, pooled across the texts; 0 when the
// pool is empty. contract_error if n < 1.
double distinct_n(const std::vector<std::vector<int>>& texts, int n);

// BLEU of one candidate against reference texts: n-grams up to 4 with
// uniform 1/4 weights, clipped match counts, add-one smoothing whenever an
// order's match count is zero, and the brevity penalty against the
// closest-length reference (ties toward the shorter one). Empty candidate
// scores 0. contract_error on empty reference list.
double bleu(const std::vector<int>& candidate,
            const std::vector<std::vector<int>>& references);

// 1 - mean BLEU of each text against all the others, clamped to [0,1]
// against smoothing artifacts. contract_error with fewer than two texts.
double self_bleu_diversity(const std::vector<std::vector<int>>& texts);

// exp(-mean logprob). Positive values up to 1e-9 are treated as rounding
// dust and clamped to zero; anything larger is a probability above one and
// a contract_error, as is an empty input.
double perplexity(const std::vector<double>& logprobs);

// 1 - unique/total n-grams of a single text; 0 by convention when the text
// is shorter than n. contract_error if n < 1.
double ngram_repetition(const std::vector<int>& text, int n = 4);

// Assembles the full report. Per-prompt quantities (distinct-n for n in
// 1..4, self-BLEU) are computed within each prompt's sample set and averaged
// over prompts; per-response quantities (perplexity, repetition, length) and
// per-token entropy are averaged over the whole pool. Self-BLEU is reported
// as 0 unless every prompt has at least two samples. contract_error on an
// empty prompt list, an empty k list, or ragged per-response arrays.
EvalReport evaluate(const std::vector<PromptSamples>& prompts,
                    const std::vector<int>& k_list);

}  // namespace i2b
