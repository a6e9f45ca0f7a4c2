#include "tlm/ngram.hpp"

#include "tlm/common.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace tlm {

namespace {

// context of the event at position i: the n-1 ids before it, <s>-padded
std::vector<int32_t> context_at(const std::vector<int32_t>& ids, size_t i, int n) {
    std::vector<int32_t> ctx(static_cast<size_t>(n - 1));
    for (int j = 0; j < n - 1; ++j) {
        const long src = static_cast<long>(i) - (n - 1) + j;
        ctx[static_cast<size_t>(j)] = src < 0 ? Vocabulary::bos_id : ids[static_cast<size_t>(src)];
    }
    return ctx;
}

} // namespace

NGramModel fit_ngram(const std::vector<TokenSequence>& corpus, int n, double k,
                     int32_t vocab_size) {
    if (n < 1) throw Error(ErrorKind::validation, "fit_ngram: order must be >= 1");
    if (k < 0) throw Error(ErrorKind::validation, "fit_ngram: smoothing k must be >= 0");
    if (vocab_size < 1) throw Error(ErrorKind::validation, "fit_ngram: vocab_size must be >= 1");

    NGramModel m;
    m.order = n;
    m.smoothing_k = k;
    m.vocab_size = vocab_size;

    for (const auto& seq : corpus) {
        if (!seq.has_boundaries) {
            throw Error(ErrorKind::validation, "fit_ngram: sequences must carry boundaries");
        }
        validate_sequence(seq, vocab_size);
        // events: every position after <s> through </s>
        for (size_t i = 1; i < seq.ids.size(); ++i) {
            std::vector<int32_t> ctx = context_at(seq.ids, i, n);
            ++m.context_counts[ctx];
            ctx.push_back(seq.ids[i]);
            ++m.joint_counts[ctx];
        }
    }
    return m;
}

double cond_prob(const NGramModel& model, const std::vector<int32_t>& context, int32_t token) {
    if (context.size() != static_cast<size_t>(model.order - 1)) {
        throw Error(ErrorKind::validation, "cond_prob: context length must be n-1 = " +
                                               std::to_string(model.order - 1));
    }
    const double v = static_cast<double>(model.vocab_size);

    uint64_t cc = 0;
    if (auto it = model.context_counts.find(context); it != model.context_counts.end()) {
        cc = it->second;
    }

    std::vector<int32_t> joint = context;
    joint.push_back(token);
    uint64_t jc = 0;
    if (auto it = model.joint_counts.find(joint); it != model.joint_counts.end()) {
        jc = it->second;
    }

    if (model.smoothing_k > 0.0) {
        return (static_cast<double>(jc) + model.smoothing_k) /
               (static_cast<double>(cc) + model.smoothing_k * v);
    }
    if (cc == 0) return 1.0 / v; // unseen context: uniform fallback
    return static_cast<double>(jc) / static_cast<double>(cc);
}

SequenceScore sequence_log_prob(const NGramModel& model, const TokenSequence& seq) {
    if (!seq.has_boundaries) {
        throw Error(ErrorKind::validation, "sequence_log_prob: sequence must carry boundaries");
    }
    validate_sequence(seq, model.vocab_size);
    SequenceScore score;
    for (size_t i = 1; i < seq.ids.size(); ++i) {
        const double p = cond_prob(model, context_at(seq.ids, i, model.order), seq.ids[i]);
        ++score.events;
        if (p == 0.0) {
            score.zero_prob = true;
            score.log2_prob = -std::numeric_limits<double>::infinity();
            continue;
        }
        if (!score.zero_prob) score.log2_prob += std::log2(p);
    }
    return score;
}

double perplexity_root(const NGramModel& model, const TokenSequence& seq) {
    if (!seq.has_boundaries) {
        throw Error(ErrorKind::validation, "perplexity_root: sequence must carry boundaries");
    }
    validate_sequence(seq, model.vocab_size);
    // multiply the event probabilities, tracking a power-of-two scale so the
    // product cannot underflow; then take the K-th root of the inverse
    double mantissa = 1.0;
    int exponent = 0;
    uint64_t events = 0;
    for (size_t i = 1; i < seq.ids.size(); ++i) {
        const double p = cond_prob(model, context_at(seq.ids, i, model.order), seq.ids[i]);
        ++events;
        if (p == 0.0) return std::numeric_limits<double>::infinity();
        mantissa *= p;
        int e = 0;
        mantissa = std::frexp(mantissa, &e);
        exponent += e;
    }
    if (events == 0) {
        throw Error(ErrorKind::validation, "perplexity_root: no predicted events");
    }
    const double k = static_cast<double>(events);
    // (1/P)^(1/K) with P = mantissa * 2^exponent
    return std::pow(mantissa, -1.0 / k) * std::exp2(-static_cast<double>(exponent) / k);
}

double perplexity_xent(const NGramModel& model, const TokenSequence& seq) {
    const SequenceScore s = sequence_log_prob(model, seq);
    if (s.events == 0) {
        throw Error(ErrorKind::validation, "perplexity_xent: no predicted events");
    }
    if (s.zero_prob) return std::numeric_limits<double>::infinity();
    const double h = -s.log2_prob / static_cast<double>(s.events);
    return std::exp2(h);
}

void save_ngram(const NGramModel& model, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::io, "cannot write n-gram model: " + path.string());
    f << "tlm-ngram 1\n";
    f << "order " << model.order << "\n";
    f << "smoothing " << format_g9(model.smoothing_k) << "\n";
    f << "vocab " << model.vocab_size << "\n";
    for (const auto& [key, count] : model.context_counts) {
        f << "context";
        for (int32_t id : key) f << ' ' << id;
        f << " : " << count << "\n";
    }
    for (const auto& [key, count] : model.joint_counts) {
        f << "joint";
        for (int32_t id : key) f << ' ' << id;
        f << " : " << count << "\n";
    }
    if (!f) throw Error(ErrorKind::io, "write failed: " + path.string());
}

NGramModel load_ngram(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::io, "cannot open n-gram model: " + path.string());

    std::string line;
    if (!std::getline(f, line) || line != "tlm-ngram 1") {
        throw Error(ErrorKind::validation, "not a tlm-ngram file: " + path.string());
    }
    NGramModel m;
    auto bad = [&](const std::string& what) {
        return Error(ErrorKind::validation, "malformed n-gram model (" + what + "): " + path.string());
    };
    if (!(f >> line >> m.order) || line != "order") throw bad("order");
    if (!(f >> line >> m.smoothing_k) || line != "smoothing") throw bad("smoothing");
    if (!(f >> line >> m.vocab_size) || line != "vocab") throw bad("vocab");

    while (f >> line) {
        const bool is_ctx = line == "context";
        if (!is_ctx && line != "joint") throw bad("unknown row '" + line + "'");
        const size_t arity = static_cast<size_t>(is_ctx ? m.order - 1 : m.order);
        std::vector<int32_t> key(arity);
        for (auto& id : key) {
            if (!(f >> id)) throw bad("tuple");
        }
        std::string sep;
        uint64_t count = 0;
        if (!(f >> sep >> count) || sep != ":") throw bad("count");
        auto& table = is_ctx ? m.context_counts : m.joint_counts;
        table[key] = count;
    }
    return m;
}

} // namespace tlm
