#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace tlm {

struct InstructionRecord {
    std::string instruction;
    std::string response;
    std::optional<std::string> system;
    std::string lang;
    std::string source;
};

struct DedupStats {
    uint64_t input = 0;
    uint64_t kept = 0;
    uint64_t removed = 0;
    double removal_rate = 0.0;
};

struct IngestResult {
    std::vector<InstructionRecord> records;
    uint64_t skipped = 0; // lenient mode only
};

// One JSON object per line; instruction and response required and non-empty.
// strict: malformed line throws naming the line number; lenient: skip + count.
IngestResult ingest_jsonl(const std::filesystem::path& path, bool strict);

// NFC + trim + whitespace-run collapse on the text fields (``` fenced spans
// stay byte-exact). Idempotent.
InstructionRecord normalize_record(const InstructionRecord& rec);

// Exact-duplicate removal keyed on normalize(instruction) and
// normalize(response); first occurrence kept, input order preserved.
std::pair<std::vector<InstructionRecord>, DedupStats>
dedup_records(const std::vector<InstructionRecord>& records);

enum class ChatTemplate { zephyr, alt };

ChatTemplate chat_template_from_name(const std::string& name);

// zephyr: <|system|>\n{system}</s>\n<|user|>\n{instruction}</s>\n<|assistant|>\n{response}</s>
//         (empty system body when absent)
// alt:    ### Instruction:\n{instruction}\n### Response:\n{response}
std::string format_chat(const InstructionRecord& rec, ChatTemplate tmpl);

// Exact inverse on format_chat's image; missing markers throw naming the
// marker; whitespace-only instruction/response rejected.
InstructionRecord parse_chat(const std::string& text, ChatTemplate tmpl);

// Deterministic seeded shuffle; disjoint covering split, sizes within 1 of
// the fractions, both sides non-empty, original order kept within each side.
std::pair<std::vector<InstructionRecord>, std::vector<InstructionRecord>>
split_records(const std::vector<InstructionRecord>& records, double test_fraction, uint64_t seed);

// Fraction of non-empty response lines that look like code (assignment,
// leading keyword, or >= 4-space indent).
double code_score(const std::string& response);

// Keeps records with a ``` fence or code_score >= 0.3.
std::vector<InstructionRecord> filter_code(const std::vector<InstructionRecord>& records);

void write_jsonl(const std::vector<InstructionRecord>& records,
                 const std::filesystem::path& path);
void write_dedup_stats(const DedupStats& stats, const std::filesystem::path& path);

} // namespace tlm
