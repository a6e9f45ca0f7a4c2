#include "tlm/metrics.hpp"

#include "tlm/common.hpp"

#include <cmath>
#include <limits>
#include <map>

namespace tlm {

ProbDist ProbDist::from(std::vector<double> probs) {
    if (probs.empty()) {
        throw Error(ErrorKind::validation, "ProbDist: empty support");
    }
    double sum = 0.0;
    for (double v : probs) {
        if (!(v >= 0.0) || v > 1.0) {
            throw Error(ErrorKind::validation, "ProbDist: probability outside [0, 1]");
        }
        sum += v;
    }
    if (std::fabs(sum - 1.0) > 1e-9) {
        throw Error(ErrorKind::validation,
                    "ProbDist: probabilities sum to " + std::to_string(sum) + ", not 1");
    }
    ProbDist d;
    d.p = std::move(probs);
    return d;
}

ProbDist ProbDist::uniform(size_t n) {
    if (n == 0) throw Error(ErrorKind::validation, "ProbDist: empty support");
    return from(std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

double entropy(const ProbDist& p) {
    double h = 0.0;
    for (double v : p.p) {
        if (v > 0.0) h -= v * std::log2(v);
    }
    return h < 0.0 ? 0.0 : h; // clamp -0.0 from rounding
}

double cross_entropy(const ProbDist& p, const ProbDist& q) {
    if (p.support() != q.support()) {
        throw Error(ErrorKind::validation, "cross_entropy: support sizes differ");
    }
    double h = 0.0;
    for (size_t i = 0; i < p.p.size(); ++i) {
        if (p.p[i] == 0.0) continue;
        if (q.p[i] == 0.0) return std::numeric_limits<double>::infinity();
        h -= p.p[i] * std::log2(q.p[i]);
    }
    return h;
}

double kl_divergence(const ProbDist& p, const ProbDist& q) {
    double xent = cross_entropy(p, q);
    if (std::isinf(xent)) return xent;
    return xent - entropy(p);
}

namespace {

double entropy_of_counts(const std::map<std::vector<int32_t>, uint64_t>& counts, uint64_t total) {
    double h = 0.0;
    const double tot = static_cast<double>(total);
    for (const auto& [key, c] : counts) {
        const double p = static_cast<double>(c) / tot;
        h -= p * std::log2(p);
    }
    return h < 0.0 ? 0.0 : h;
}

} // namespace

double block_entropy(const std::vector<TokenSequence>& corpus, int n) {
    if (n < 1) throw Error(ErrorKind::validation, "block_entropy: order must be >= 1");

    std::map<std::vector<int32_t>, uint64_t> joint;
    std::map<std::vector<int32_t>, uint64_t> prefix;
    uint64_t total = 0;

    const auto un = static_cast<size_t>(n);
    for (const auto& seq : corpus) {
        if (seq.ids.size() < un) continue;
        for (size_t i = 0; i + un <= seq.ids.size(); ++i) {
            std::vector<int32_t> win(seq.ids.begin() + static_cast<long>(i),
                                     seq.ids.begin() + static_cast<long>(i + un));
            ++joint[win];
            win.pop_back();
            ++prefix[win];
            ++total;
        }
    }
    if (total == 0) {
        throw Error(ErrorKind::validation,
                    "block_entropy: corpus has no window of length " + std::to_string(n));
    }
    return entropy_of_counts(joint, total) - entropy_of_counts(prefix, total);
}

BlockEntropySeries entropy_rate_estimate(const std::vector<TokenSequence>& corpus, int n_max) {
    if (n_max < 1) {
        throw Error(ErrorKind::validation, "entropy_rate_estimate: n_max must be >= 1");
    }
    BlockEntropySeries series;
    for (const auto& seq : corpus) series.corpus_tokens += seq.ids.size();
    for (int n = 1; n <= n_max; ++n) {
        try {
            series.values.push_back(block_entropy(corpus, n));
        } catch (const Error&) {
            if (series.values.empty()) throw; // not even F_1 is computable
            break;                            // stop at the largest computable N
        }
    }
    return series;
}

double perplexity_from_xent(double h_bits) {
    if (std::isnan(h_bits) || h_bits < 0.0) {
        throw Error(ErrorKind::validation, "perplexity_from_xent: cross-entropy must be >= 0");
    }
    return std::exp2(h_bits);
}

} // namespace tlm
