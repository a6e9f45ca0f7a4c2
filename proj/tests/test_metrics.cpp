#include "tlm/metrics.hpp"

#include "tlm/common.hpp"

#include <doctest.h>

#include <cmath>

using namespace tlm;

namespace {

TokenSequence seq_of(std::vector<int32_t> ids) {
    TokenSequence s;
    s.ids = std::move(ids);
    return s;
}

ProbDist random_dist(SplitMix64& rng, size_t n, bool full_support) {
    std::vector<double> p(n);
    double sum = 0;
    for (auto& v : p) {
        v = full_support ? rng.uniform_pos() : rng.uniform();
        sum += v;
    }
    for (auto& v : p) v /= sum;
    return ProbDist::from(p);
}

} // namespace

TEST_CASE("entropy of simple distributions") {
    CHECK(entropy(ProbDist::from({0.5, 0.5})) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(entropy(ProbDist::from({1.0, 0.0})) == 0.0);
    CHECK(entropy(ProbDist::uniform(4)) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("ProbDist validation") {
    CHECK_THROWS_AS(ProbDist::from({}), Error);
    CHECK_THROWS_AS(ProbDist::from({0.5, 0.6}), Error);
    CHECK_THROWS_AS(ProbDist::from({-0.1, 1.1}), Error);
    CHECK_THROWS_AS(ProbDist::from({1.5, -0.5}), Error);
}

TEST_CASE("cross-entropy basics") {
    const ProbDist half = ProbDist::from({0.5, 0.5});
    CHECK(cross_entropy(half, half) == doctest::Approx(1.0));
    CHECK(cross_entropy(ProbDist::from({1.0, 0.0}), half) == doctest::Approx(1.0));
    CHECK(std::isinf(cross_entropy(half, ProbDist::from({1.0, 0.0}))));
    CHECK_THROWS_AS(cross_entropy(half, ProbDist::uniform(3)), Error);
}

TEST_CASE("KL divergence and the decomposition identity") {
    const ProbDist half = ProbDist::from({0.5, 0.5});
    CHECK(kl_divergence(half, half) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(kl_divergence(ProbDist::from({1.0, 0.0}), half) == doctest::Approx(1.0));

    SplitMix64 rng(123);
    for (int i = 0; i < 200; ++i) {
        const size_t n = 2 + rng.below(7);
        const ProbDist p = random_dist(rng, n, false);
        const ProbDist q = random_dist(rng, n, true);
        const double kl = kl_divergence(p, q);
        CHECK(kl >= -1e-12); // Gibbs
        CHECK(cross_entropy(p, q) ==
              doctest::Approx(entropy(p) + kl).epsilon(1e-10));

        // independent oracle: direct sum p_i log2(p_i / q_i)
        double direct = 0;
        for (size_t j = 0; j < n; ++j) {
            if (p.p[j] > 0) direct += p.p[j] * std::log2(p.p[j] / q.p[j]);
        }
        CHECK(kl == doctest::Approx(direct).epsilon(1e-10));
    }
}

TEST_CASE("block entropy hand cases") {
    const std::vector<TokenSequence> aaaa = {seq_of({3, 3, 3, 3})};
    CHECK(block_entropy(aaaa, 1) == doctest::Approx(0.0));

    const std::vector<TokenSequence> abab = {seq_of({3, 4, 3, 4})};
    CHECK(block_entropy(abab, 1) == doctest::Approx(1.0).epsilon(1e-12));
    // the next symbol is fully determined by the previous one
    CHECK(block_entropy(abab, 2) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("block entropy requires a long enough corpus") {
    const std::vector<TokenSequence> tiny = {seq_of({3, 4})};
    CHECK_NOTHROW(block_entropy(tiny, 2));
    CHECK_THROWS_AS(block_entropy(tiny, 3), Error);
    CHECK_THROWS_AS(block_entropy({}, 1), Error);
    CHECK_THROWS_AS(block_entropy(tiny, 0), Error);
}

TEST_CASE("F_N is non-negative on random corpora") {
    SplitMix64 rng(7);
    for (int iter = 0; iter < 100; ++iter) {
        std::vector<TokenSequence> corpus;
        const size_t n_seqs = 1 + rng.below(4);
        for (size_t s = 0; s < n_seqs; ++s) {
            std::vector<int32_t> ids(2 + rng.below(20));
            for (auto& id : ids) id = static_cast<int32_t>(rng.below(4));
            corpus.push_back(seq_of(std::move(ids)));
        }
        for (int n = 1; n <= 3; ++n) {
            try {
                CHECK(block_entropy(corpus, n) >= 0.0);
            } catch (const Error&) {
                // corpus too short for this n
            }
        }
    }
}

TEST_CASE("entropy rate series") {
    const std::vector<TokenSequence> abab = {seq_of({3, 4, 3, 4})};
    const BlockEntropySeries s = entropy_rate_estimate(abab, 2);
    REQUIRE(s.values.size() == 2);
    CHECK(s.values[0] == doctest::Approx(1.0));
    CHECK(s.values[1] == doctest::Approx(0.0));
    CHECK(s.corpus_tokens == 4);

    const std::vector<TokenSequence> mono = {seq_of({5, 5, 5, 5, 5})};
    const BlockEntropySeries m = entropy_rate_estimate(mono, 3);
    for (double v : m.values) CHECK(v == doctest::Approx(0.0));

    // series stops at the largest computable N instead of failing
    const BlockEntropySeries shorty = entropy_rate_estimate({seq_of({3, 4})}, 5);
    CHECK(shorty.values.size() == 2);
}

TEST_CASE("Monte-Carlo: uniform 4-symbol corpus has F_1 near 2 bits") {
    SplitMix64 rng(99);
    std::vector<int32_t> ids(100000);
    for (auto& id : ids) id = static_cast<int32_t>(rng.below(4));
    const double f1 = block_entropy({seq_of(std::move(ids))}, 1);
    CHECK(f1 == doctest::Approx(2.0).epsilon(0.01));
}

TEST_CASE("perplexity from cross-entropy") {
    CHECK(perplexity_from_xent(0.0) == 1.0);
    CHECK(perplexity_from_xent(1.0) == 2.0);
    CHECK(perplexity_from_xent(2.0) == 4.0);
    CHECK(std::isinf(perplexity_from_xent(std::numeric_limits<double>::infinity())));
    CHECK_THROWS_AS(perplexity_from_xent(-0.5), Error);
    // 2^entropy(uniform V) = V
    for (size_t v : {2, 4, 8, 16, 5, 12}) {
        CHECK(perplexity_from_xent(entropy(ProbDist::uniform(v))) ==
              doctest::Approx(static_cast<double>(v)).epsilon(1e-9));
    }
}
