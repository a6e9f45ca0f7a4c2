#include "tlm/dataset.hpp"

#include "tlm/common.hpp"
#include "tlm/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <regex>
#include <unordered_set>

namespace tlm {

using nlohmann::json;

IngestResult ingest_jsonl(const std::filesystem::path& path, bool strict) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::io, "cannot open dataset: " + path.string());

    IngestResult out;
    std::string line;
    uint64_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue; // blank lines are not records

        auto fail = [&](const std::string& why) -> bool {
            if (strict) {
                throw Error(ErrorKind::validation,
                            path.string() + ": line " + std::to_string(line_no) + ": " + why);
            }
            ++out.skipped;
            return false;
        };

        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            fail("not a JSON object");
            continue;
        }

        auto text_field = [&](const char* key, bool required,
                              std::string& dst) -> bool {
            auto it = j.find(key);
            if (it == j.end() || it->is_null()) {
                if (required) return fail(std::string("missing field \"") + key + "\"");
                return true;
            }
            if (!it->is_string()) return fail(std::string("field \"") + key + "\" is not a string");
            dst = it->get<std::string>();
            if (required && trim(dst).empty()) {
                return fail(std::string("field \"") + key + "\" is empty");
            }
            return true;
        };

        InstructionRecord rec;
        if (!text_field("instruction", true, rec.instruction)) continue;
        if (!text_field("response", true, rec.response)) continue;
        std::string sys;
        bool sys_ok = true;
        if (j.contains("system") && !j["system"].is_null()) {
            sys_ok = text_field("system", false, sys);
            if (sys_ok && !trim(sys).empty()) rec.system = sys;
        }
        if (!sys_ok) continue;
        if (!text_field("lang", false, rec.lang)) continue;
        if (!text_field("source", false, rec.source)) continue;
        out.records.push_back(std::move(rec));
    }
    return out;
}

InstructionRecord normalize_record(const InstructionRecord& rec) {
    InstructionRecord out = rec;
    out.instruction = normalize_text(rec.instruction);
    out.response = normalize_text(rec.response);
    if (rec.system) out.system = normalize_text(*rec.system);
    out.lang = trim(rec.lang);
    out.source = trim(rec.source);
    return out;
}

std::pair<std::vector<InstructionRecord>, DedupStats>
dedup_records(const std::vector<InstructionRecord>& records) {
    std::vector<InstructionRecord> kept;
    std::unordered_set<std::string> seen;
    DedupStats stats;
    stats.input = records.size();
    for (const auto& rec : records) {
        // unit separator cannot occur in normalized text as a boundary artifact
        std::string key = normalize_text(rec.instruction);
        key += '\x1f';
        key += normalize_text(rec.response);
        if (seen.insert(std::move(key)).second) {
            kept.push_back(rec);
        }
    }
    stats.kept = kept.size();
    stats.removed = stats.input - stats.kept;
    stats.removal_rate =
        stats.input == 0 ? 0.0 : static_cast<double>(stats.removed) / static_cast<double>(stats.input);
    return {std::move(kept), stats};
}

ChatTemplate chat_template_from_name(const std::string& name) {
    if (name == "zephyr") return ChatTemplate::zephyr;
    if (name == "alt") return ChatTemplate::alt;
    throw Error(ErrorKind::validation, "unknown chat template '" + name + "' (zephyr|alt)");
}

std::string format_chat(const InstructionRecord& rec, ChatTemplate tmpl) {
    if (tmpl == ChatTemplate::zephyr) {
        std::string out = "<|system|>\n";
        if (rec.system) out += *rec.system;
        out += "</s>\n<|user|>\n";
        out += rec.instruction;
        out += "</s>\n<|assistant|>\n";
        out += rec.response;
        out += "</s>";
        return out;
    }
    return "### Instruction:\n" + rec.instruction + "\n### Response:\n" + rec.response;
}

namespace {

[[noreturn]] void missing_marker(const std::string& marker) {
    throw Error(ErrorKind::validation, "parse_chat: missing marker '" + marker + "'");
}

// consume `marker` at position pos or fail naming it
void expect(const std::string& text, size_t& pos, const std::string& marker) {
    if (text.compare(pos, marker.size(), marker) != 0) missing_marker(marker);
    pos += marker.size();
}

std::string take_until(const std::string& text, size_t& pos, const std::string& marker) {
    const size_t at = text.find(marker, pos);
    if (at == std::string::npos) missing_marker(marker);
    std::string body = text.substr(pos, at - pos);
    pos = at + marker.size();
    return body;
}

} // namespace

InstructionRecord parse_chat(const std::string& text, ChatTemplate tmpl) {
    InstructionRecord rec;
    size_t pos = 0;
    if (tmpl == ChatTemplate::zephyr) {
        expect(text, pos, "<|system|>\n");
        std::string sys = take_until(text, pos, "</s>\n<|user|>\n");
        rec.instruction = take_until(text, pos, "</s>\n<|assistant|>\n");
        rec.response = take_until(text, pos, "</s>");
        if (pos != text.size()) {
            throw Error(ErrorKind::validation, "parse_chat: trailing bytes after final </s>");
        }
        if (!trim(sys).empty()) rec.system = sys;
    } else {
        expect(text, pos, "### Instruction:\n");
        rec.instruction = take_until(text, pos, "\n### Response:\n");
        rec.response = text.substr(pos);
    }
    if (trim(rec.instruction).empty()) {
        throw Error(ErrorKind::validation, "parse_chat: instruction is empty");
    }
    if (trim(rec.response).empty()) {
        throw Error(ErrorKind::validation, "parse_chat: response is empty");
    }
    return rec;
}

std::pair<std::vector<InstructionRecord>, std::vector<InstructionRecord>>
split_records(const std::vector<InstructionRecord>& records, double test_fraction, uint64_t seed) {
    if (records.size() < 2) {
        throw Error(ErrorKind::validation, "split: need at least 2 records");
    }
    if (!(test_fraction > 0.0) || !(test_fraction < 1.0)) {
        throw Error(ErrorKind::validation, "split: test_fraction must be in (0, 1)");
    }
    const size_t n = records.size();
    auto n_test = static_cast<size_t>(
        std::llround(test_fraction * static_cast<double>(n)));
    n_test = std::clamp<size_t>(n_test, 1, n - 1);

    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    SplitMix64 rng(seed);
    for (size_t i = n - 1; i > 0; --i) {
        const size_t j = rng.below(i + 1);
        std::swap(order[i], order[j]);
    }

    std::vector<size_t> test_idx(order.begin(), order.begin() + static_cast<long>(n_test));
    std::vector<size_t> train_idx(order.begin() + static_cast<long>(n_test), order.end());
    std::sort(test_idx.begin(), test_idx.end());
    std::sort(train_idx.begin(), train_idx.end());

    std::pair<std::vector<InstructionRecord>, std::vector<InstructionRecord>> out;
    for (size_t i : train_idx) out.first.push_back(records[i]);
    for (size_t i : test_idx) out.second.push_back(records[i]);
    return out;
}

double code_score(const std::string& response) {
    static const std::regex assignment(R"(^[A-Za-z_][^=]*=[^=].*$)");
    static const std::regex keyword(
        R"(^(def|class|import|from|return|if|elif|else|for|while|try|except|with|print|pass|break|continue)\b.*)");

    uint64_t non_empty = 0, matching = 0;
    size_t pos = 0;
    while (pos <= response.size()) {
        const size_t nl = response.find('\n', pos);
        const std::string raw =
            response.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? response.size() + 1 : nl + 1;

        const std::string line = trim(raw);
        if (line.empty()) continue;
        ++non_empty;
        const bool indented = raw.rfind("    ", 0) == 0 || raw.rfind("\t", 0) == 0;
        if (indented || std::regex_match(line, assignment) || std::regex_match(line, keyword)) {
            ++matching;
        }
    }
    if (non_empty == 0) return 0.0;
    return static_cast<double>(matching) / static_cast<double>(non_empty);
}

std::vector<InstructionRecord> filter_code(const std::vector<InstructionRecord>& records) {
    std::vector<InstructionRecord> out;
    for (const auto& rec : records) {
        if (rec.response.find("```") != std::string::npos || code_score(rec.response) >= 0.3) {
            out.push_back(rec);
        }
    }
    return out;
}

void write_jsonl(const std::vector<InstructionRecord>& records,
                 const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::io, "cannot write dataset: " + path.string());
    for (const auto& rec : records) {
        json j;
        j["instruction"] = rec.instruction;
        j["response"] = rec.response;
        if (rec.system) j["system"] = *rec.system;
        if (!rec.lang.empty()) j["lang"] = rec.lang;
        if (!rec.source.empty()) j["source"] = rec.source;
        f << j.dump() << '\n';
    }
    if (!f) throw Error(ErrorKind::io, "write failed: " + path.string());
}

void write_dedup_stats(const DedupStats& stats, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::io, "cannot write stats: " + path.string());
    json j;
    j["input"] = stats.input;
    j["kept"] = stats.kept;
    j["removed"] = stats.removed;
    j["removal_rate"] = stats.removal_rate;
    f << j.dump(2) << '\n';
    if (!f) throw Error(ErrorKind::io, "write failed: " + path.string());
}

} // namespace tlm
