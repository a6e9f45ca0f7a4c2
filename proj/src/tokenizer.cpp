#include "tlm/tokenizer.hpp"

#include "tlm/common.hpp"
#include "tlm/text.hpp"

#include <algorithm>
#include <fstream>
#include <map>

namespace tlm {

int32_t Vocabulary::lookup(const std::string& token) const {
    auto it = token_to_id.find(token);
    if (it == token_to_id.end()) return unk_id;
    // surface forms spelling a reserved token are treated as unknown
    if (it->second < 3) return unk_id;
    return it->second;
}

const std::string& Vocabulary::token(int32_t id) const {
    if (id < 0 || id >= size()) {
        throw Error(ErrorKind::validation,
                    "invalid token id " + std::to_string(id) + " (vocabulary size " +
                        std::to_string(size()) + ")");
    }
    return id_to_token[static_cast<size_t>(id)];
}

std::vector<std::string> split_tokens(const std::string& text) {
    std::u32string cps = decode_utf8(nfc_normalize(text));
    std::vector<std::string> out;

    size_t i = 0;
    const size_t n = cps.size();
    while (i < n) {
        while (i < n && is_unicode_space(cps[i])) ++i;
        if (i >= n) break;
        size_t j = i;
        while (j < n && !is_unicode_space(cps[j])) ++j;
        std::u32string chunk = cps.substr(i, j - i);
        i = j;

        // peel punctuation off both ends, one codepoint per token
        size_t b = 0, e = chunk.size();
        std::vector<std::u32string> lead, tail;
        while (b < e && is_unicode_punct(chunk[b])) lead.push_back(std::u32string(1, chunk[b++]));
        while (e > b && is_unicode_punct(chunk[e - 1])) tail.push_back(std::u32string(1, chunk[--e]));
        for (auto& t : lead) out.push_back(encode_utf8(t));
        if (e > b) out.push_back(encode_utf8(chunk.substr(b, e - b)));
        std::reverse(tail.begin(), tail.end());
        for (auto& t : tail) out.push_back(encode_utf8(t));
    }
    return out;
}

namespace {

Vocabulary make_reserved_vocab() {
    Vocabulary v;
    v.id_to_token = {kBosToken, kEosToken, kUnkToken};
    for (int32_t id = 0; id < 3; ++id) v.token_to_id[v.id_to_token[static_cast<size_t>(id)]] = id;
    return v;
}

bool is_reserved_surface(const std::string& tok) {
    return tok == kBosToken || tok == kEosToken || tok == kUnkToken;
}

} // namespace

Vocabulary build_vocab(const std::string& corpus, size_t max_size) {
    if (max_size < 4) {
        throw Error(ErrorKind::validation, "build_vocab: max_size must be >= 4");
    }
    // std::map keeps candidate order deterministic before the stable sort
    std::map<std::string, uint64_t> counts;
    for (const auto& tok : split_tokens(corpus)) {
        if (is_reserved_surface(tok)) continue;
        ++counts[tok];
    }

    std::vector<std::pair<std::string, uint64_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocabulary v = make_reserved_vocab();
    const size_t budget = max_size - 3;
    for (size_t i = 0; i < ranked.size() && i < budget; ++i) {
        v.token_to_id[ranked[i].first] = v.size();
        v.id_to_token.push_back(ranked[i].first);
    }
    return v;
}

TokenSequence encode(const std::string& text, const Vocabulary& vocab, bool add_boundaries) {
    TokenSequence seq;
    seq.has_boundaries = add_boundaries;
    if (add_boundaries) seq.ids.push_back(Vocabulary::bos_id);
    for (const auto& tok : split_tokens(text)) {
        seq.ids.push_back(vocab.lookup(tok));
    }
    if (add_boundaries) seq.ids.push_back(Vocabulary::eos_id);
    return seq;
}

std::string decode(const std::vector<int32_t>& ids, const Vocabulary& vocab) {
    std::string out;
    for (int32_t id : ids) {
        const std::string& tok = vocab.token(id); // validates
        if (id == Vocabulary::bos_id || id == Vocabulary::eos_id) continue;
        if (!out.empty()) out += ' ';
        out += tok;
    }
    return out;
}

void save_vocab(const Vocabulary& vocab, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::io, "cannot write vocabulary file: " + path.string());
    for (const auto& tok : vocab.id_to_token) f << tok << '\n';
    if (!f) throw Error(ErrorKind::io, "write failed: " + path.string());
}

Vocabulary load_vocab(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::io, "cannot open vocabulary file: " + path.string());
    Vocabulary v;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (v.token_to_id.count(line)) {
            throw Error(ErrorKind::validation, "duplicate token in vocabulary: '" + line + "'");
        }
        v.token_to_id[line] = v.size();
        v.id_to_token.push_back(line);
    }
    if (v.size() < 3 || v.id_to_token[0] != kBosToken || v.id_to_token[1] != kEosToken ||
        v.id_to_token[2] != kUnkToken) {
        throw Error(ErrorKind::validation,
                    "vocabulary file must start with the reserved tokens " +
                        std::string(kBosToken) + ", " + kEosToken + ", " + kUnkToken);
    }
    return v;
}

void validate_sequence(const TokenSequence& seq, int32_t vocab_size) {
    for (int32_t id : seq.ids) {
        if (id < 0 || id >= vocab_size) {
            throw Error(ErrorKind::validation, "token id " + std::to_string(id) +
                                                   " out of range [0, " +
                                                   std::to_string(vocab_size) + ")");
        }
    }
    if (seq.has_boundaries) {
        if (seq.ids.size() < 2 || seq.ids.front() != Vocabulary::bos_id ||
            seq.ids.back() != Vocabulary::eos_id) {
            throw Error(ErrorKind::validation,
                        "sequence marked with boundaries must start with <s> and end with </s>");
        }
        for (size_t i = 1; i + 1 < seq.ids.size(); ++i) {
            if (seq.ids[i] == Vocabulary::bos_id || seq.ids[i] == Vocabulary::eos_id) {
                throw Error(ErrorKind::validation,
                            "boundary token in the interior of a sequence");
            }
        }
    }
}

} // namespace tlm
