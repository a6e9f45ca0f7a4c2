#pragma once

#include "tlm/tokenizer.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

namespace tlm {

// Count-based add-k n-gram model. Immutable after fit; scoring is const.
struct NGramModel {
    int order = 2;           // n >= 1
    double smoothing_k = 0;  // add-k, k >= 0
    int32_t vocab_size = 0;  // V

    // context keys have length n-1, joint keys length n; ordered maps keep
    // the persisted dump sorted and diffable
    std::map<std::vector<int32_t>, uint64_t> context_counts;
    std::map<std::vector<int32_t>, uint64_t> joint_counts;
};

// Sliding-window tallies over each boundary-marked sequence. The counted
// events are every token after <s> through </s> inclusive; for n > 2 the
// context is left-padded with repeated <s>.
NGramModel fit_ngram(const std::vector<TokenSequence>& corpus, int n, double k,
                     int32_t vocab_size);

// (count(context, token) + k) / (count(context) + k*V); with k == 0 an unseen
// context falls back to uniform 1/V.
double cond_prob(const NGramModel& model, const std::vector<int32_t>& context, int32_t token);

struct SequenceScore {
    double log2_prob = 0.0; // -inf when a zero-probability event occurred
    uint64_t events = 0;    // K: predicted events including </s>
    bool zero_prob = false;
};

SequenceScore sequence_log_prob(const NGramModel& model, const TokenSequence& seq);

// Eq-7 style: (1 / P(seq))^(1/K), accumulated as a scaled product of the
// per-event probabilities. +inf when P == 0.
double perplexity_root(const NGramModel& model, const TokenSequence& seq);

// Per-token bit form: 2^(-(1/K) log2 P(seq)). Agrees with perplexity_root
// within relative 1e-9.
double perplexity_xent(const NGramModel& model, const TokenSequence& seq);

// Sorted text dump (tuple -> count), loadable and diffable.
void save_ngram(const NGramModel& model, const std::filesystem::path& path);
NGramModel load_ngram(const std::filesystem::path& path);

} // namespace tlm
