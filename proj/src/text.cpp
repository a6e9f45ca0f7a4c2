#include "tlm/text.hpp"

#include "tlm/common.hpp"

#include <unicode/uchar.h>
#include <unicode/unorm2.h>
#include <unicode/ustring.h>
#include <unicode/utf8.h>

#include <vector>

namespace tlm {

std::string nfc_normalize(const std::string& utf8) {
    UErrorCode status = U_ZERO_ERROR;
    const UNormalizer2* nfc = unorm2_getNFCInstance(&status);
    if (U_FAILURE(status)) {
        throw Error(ErrorKind::validation, "ICU NFC instance unavailable");
    }

    // UTF-8 -> UTF-16, substituting U+FFFD for broken bytes
    std::vector<UChar> u16(utf8.size() + 1);
    int32_t u16_len = 0;
    status = U_ZERO_ERROR;
    u_strFromUTF8WithSub(u16.data(), static_cast<int32_t>(u16.size()), &u16_len,
                         utf8.data(), static_cast<int32_t>(utf8.size()),
                         0xFFFD, nullptr, &status);
    if (status == U_BUFFER_OVERFLOW_ERROR) {
        u16.resize(static_cast<size_t>(u16_len) + 1);
        status = U_ZERO_ERROR;
        u_strFromUTF8WithSub(u16.data(), static_cast<int32_t>(u16.size()), &u16_len,
                             utf8.data(), static_cast<int32_t>(utf8.size()),
                             0xFFFD, nullptr, &status);
    }
    if (U_FAILURE(status)) {
        throw Error(ErrorKind::validation, "UTF-8 decode failed");
    }

    std::vector<UChar> norm(u16_len + 16);
    status = U_ZERO_ERROR;
    int32_t norm_len = unorm2_normalize(nfc, u16.data(), u16_len, norm.data(),
                                        static_cast<int32_t>(norm.size()), &status);
    if (status == U_BUFFER_OVERFLOW_ERROR) {
        norm.resize(static_cast<size_t>(norm_len));
        status = U_ZERO_ERROR;
        norm_len = unorm2_normalize(nfc, u16.data(), u16_len, norm.data(),
                                    static_cast<int32_t>(norm.size()), &status);
    }
    if (U_FAILURE(status)) {
        throw Error(ErrorKind::validation, "NFC normalization failed");
    }

    std::string out(static_cast<size_t>(norm_len) * 4 + 1, '\0');
    int32_t out_len = 0;
    status = U_ZERO_ERROR;
    u_strToUTF8(out.data(), static_cast<int32_t>(out.size()), &out_len,
                norm.data(), norm_len, &status);
    if (U_FAILURE(status)) {
        throw Error(ErrorKind::validation, "UTF-8 encode failed");
    }
    out.resize(static_cast<size_t>(out_len));
    return out;
}

bool is_unicode_space(char32_t cp) {
    return u_isUWhiteSpace(static_cast<UChar32>(cp)) != 0;
}

bool is_unicode_punct(char32_t cp) {
    return u_ispunct(static_cast<UChar32>(cp)) != 0;
}

std::u32string decode_utf8(const std::string& utf8) {
    std::u32string out;
    out.reserve(utf8.size());
    const auto* s = reinterpret_cast<const uint8_t*>(utf8.data());
    int32_t i = 0;
    const auto len = static_cast<int32_t>(utf8.size());
    while (i < len) {
        UChar32 cp;
        U8_NEXT(s, i, len, cp);
        if (cp < 0) cp = 0xFFFD;
        out.push_back(static_cast<char32_t>(cp));
    }
    return out;
}

std::string encode_utf8(char32_t cp) {
    uint8_t buf[4];
    int32_t off = 0;
    UBool err = 0;
    U8_APPEND(buf, off, 4, static_cast<UChar32>(cp), err);
    if (err) return "\xEF\xBF\xBD";
    return std::string(reinterpret_cast<char*>(buf), static_cast<size_t>(off));
}

std::string encode_utf8(const std::u32string& s) {
    std::string out;
    out.reserve(s.size() * 2);
    for (char32_t cp : s) out += encode_utf8(cp);
    return out;
}

std::string trim(const std::string& utf8) {
    std::u32string cps = decode_utf8(utf8);
    size_t b = 0, e = cps.size();
    while (b < e && is_unicode_space(cps[b])) ++b;
    while (e > b && is_unicode_space(cps[e - 1])) --e;
    return encode_utf8(cps.substr(b, e - b));
}

namespace {

// NFC + every whitespace run -> single space. Boundary runs are kept as a
// single space too; the caller trims the assembled string.
std::string collapse_ws(const std::string& utf8) {
    std::u32string cps = decode_utf8(nfc_normalize(utf8));
    std::u32string out;
    out.reserve(cps.size());
    bool in_run = false;
    for (char32_t cp : cps) {
        if (is_unicode_space(cp)) {
            in_run = true;
            continue;
        }
        if (in_run) out.push_back(U' ');
        in_run = false;
        out.push_back(cp);
    }
    if (in_run) out.push_back(U' ');
    return encode_utf8(out);
}

} // namespace

std::string normalize_text(const std::string& utf8) {
    static const std::string fence = "```";
    std::string out;
    size_t pos = 0;
    while (pos < utf8.size()) {
        size_t open = utf8.find(fence, pos);
        if (open == std::string::npos) {
            out += collapse_ws(utf8.substr(pos));
            break;
        }
        size_t close = utf8.find(fence, open + fence.size());
        // unterminated fence: preserve the rest verbatim
        size_t block_end = (close == std::string::npos) ? utf8.size() : close + fence.size();
        out += collapse_ws(utf8.substr(pos, open - pos));
        out += utf8.substr(open, block_end - open);
        pos = block_end;
    }
    // after collapse the ends are plain ASCII spaces unless a fence sits there
    size_t b = 0, e = out.size();
    while (b < e && out[b] == ' ') ++b;
    while (e > b && out[e - 1] == ' ') --e;
    return out.substr(b, e - b);
}

} // namespace tlm
