#pragma once

#include <string>
#include <vector>

namespace tlm {

// Canonical composition (NFC). Invalid UTF-8 bytes are replaced with U+FFFD.
std::string nfc_normalize(const std::string& utf8);

bool is_unicode_space(char32_t cp);

// Unicode general category P* (what the tokenizer strips at token edges).
bool is_unicode_punct(char32_t cp);

std::u32string decode_utf8(const std::string& utf8);
std::string encode_utf8(const std::u32string& s);
std::string encode_utf8(char32_t cp);

// Leading/trailing Unicode whitespace removed.
std::string trim(const std::string& utf8);

// NFC, trim, and internal whitespace runs collapsed to single spaces.
// Verbatim spans fenced by ``` are left byte-for-byte untouched.
std::string normalize_text(const std::string& utf8);

} // namespace tlm
