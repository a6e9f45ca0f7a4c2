#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace tlm {

inline constexpr const char* kBosToken = "<s>";
inline constexpr const char* kEosToken = "</s>";
inline constexpr const char* kUnkToken = "<unk>";

// Immutable after build; ids are contiguous, 0/1/2 reserved for <s>, </s>, <unk>.
struct Vocabulary {
    static constexpr int32_t bos_id = 0;
    static constexpr int32_t eos_id = 1;
    static constexpr int32_t unk_id = 2;

    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, int32_t> token_to_id;

    int32_t size() const { return static_cast<int32_t>(id_to_token.size()); }

    // surface token -> id; unknown (or reserved surface forms) map to <unk>
    int32_t lookup(const std::string& token) const;

    const std::string& token(int32_t id) const; // throws on invalid id
};

struct TokenSequence {
    std::vector<int32_t> ids;
    bool has_boundaries = false;

    size_t size() const { return ids.size(); }
};

// The split rule shared by build_vocab and encode: NFC, split on Unicode
// whitespace, then peel leading/trailing punctuation codepoints (category P*)
// off each chunk as single-codepoint tokens.
std::vector<std::string> split_tokens(const std::string& text);

// Keeps the 3 reserved tokens plus up to max_size-3 most frequent surface
// tokens; ties broken by byte-lexicographic order of the token.
Vocabulary build_vocab(const std::string& corpus, size_t max_size);

TokenSequence encode(const std::string& text, const Vocabulary& vocab, bool add_boundaries);

// Tokens joined by single spaces; boundary markers omitted.
std::string decode(const std::vector<int32_t>& ids, const Vocabulary& vocab);

// One token per line, line number == id; first three lines are the reserved tokens.
void save_vocab(const Vocabulary& vocab, const std::filesystem::path& path);
Vocabulary load_vocab(const std::filesystem::path& path);

// Checks the TokenSequence invariants against a vocabulary (id range and
// boundary placement); throws on violation.
void validate_sequence(const TokenSequence& seq, int32_t vocab_size);

} // namespace tlm
