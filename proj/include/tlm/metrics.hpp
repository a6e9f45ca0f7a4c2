#pragma once

#include "tlm/tokenizer.hpp"

#include <cstdint>
#include <vector>

namespace tlm {

// Finite normalized distribution. All entropies below are in bits.
struct ProbDist {
    std::vector<double> p;

    size_t support() const { return p.size(); }

    // validates: non-empty, entries in [0,1], sum within 1e-9 of 1
    static ProbDist from(std::vector<double> probs);
    static ProbDist uniform(size_t n);
};

double entropy(const ProbDist& p);

// -sum p_i log2 q_i; +inf when q_i == 0 somewhere p_i > 0 (not an exception)
double cross_entropy(const ProbDist& p, const ProbDist& q);

// cross_entropy(p, q) - entropy(p)
double kl_divergence(const ProbDist& p, const ProbDist& q);

// F_N = H(N-gram windows) - H of the (N-1)-prefix marginal of the same
// windows; the 0-gram entropy is 0. Windows slide within each sequence.
// This is the conditional entropy of the empirical joint, hence >= 0.
double block_entropy(const std::vector<TokenSequence>& corpus, int n);

struct BlockEntropySeries {
    std::vector<double> values; // F_1 .. F_N for the largest computable N <= n_max
    uint64_t corpus_tokens = 0;
};

BlockEntropySeries entropy_rate_estimate(const std::vector<TokenSequence>& corpus, int n_max);

// 2^h
double perplexity_from_xent(double h_bits);

} // namespace tlm
