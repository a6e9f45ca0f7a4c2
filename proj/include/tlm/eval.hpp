#pragma once

#include "tlm/lora.hpp"
#include "tlm/model.hpp"
#include "tlm/ngram.hpp"
#include "tlm/quant.hpp"
#include "tlm/tokenizer.hpp"

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace tlm::eval {

struct EvalRow {
    std::string variant;
    std::string dataset;
    uint64_t tokens = 0;       // total predicted events (K)
    double mean_h_bits = 0.0;  // micro-average: total bits / total events
    double perplexity = 0.0;   // 2^mean_h_bits
    std::string config_digest;
    std::string timestamp; // empty when timestamps are disabled
    std::string error;     // per-cell failure; numeric fields invalid when set
};

struct EvalReport {
    std::vector<EvalRow> rows;
};

class Scorer {
public:
    virtual ~Scorer() = default;
    virtual const std::string& label() const = 0;
    virtual const std::string& digest() const = 0;
    // (total bits, predicted events) for one boundary-marked sequence
    virtual std::pair<double, uint64_t> score(const TokenSequence& seq) const = 0;
};

std::unique_ptr<Scorer> make_neural_scorer(std::string label,
                                           std::shared_ptr<const TinyModel> model,
                                           std::shared_ptr<const LoraAdapter> runtime_adapter = {});
std::unique_ptr<Scorer> make_ngram_scorer(std::string label,
                                          std::shared_ptr<const NGramModel> model);

struct Dataset {
    std::string label;
    std::vector<TokenSequence> sequences;
};

EvalRow eval_ppl(const Scorer& scorer, const Dataset& dataset, bool with_timestamp);

// Full cross-product, rows ordered by (variant, dataset); per-cell errors are
// recorded in the row and the run continues.
EvalReport compare(const std::vector<const Scorer*>& variants,
                   const std::vector<Dataset>& datasets, bool with_timestamps);

// JSON: array of row objects, stable field order, numbers at 9 significant
// digits. CSV: RFC-4180. Identical inputs yield byte-identical output when
// timestamps are disabled.
void emit_json(const EvalReport& report, std::ostream& os);
void emit_csv(const EvalReport& report, std::ostream& os);
void emit(const EvalReport& report, const std::string& format, const std::filesystem::path& path);

// Every 2-d tensor replaced by its dequantized quantization; gains untouched.
TinyModel quantize_model_weights(const TinyModel& model, QuantScheme scheme);

// Deterministic synthetic corpora: prose-like sentences and code-like lines.
std::vector<std::string> synth_prose_lines(size_t n, uint64_t seed);
std::vector<std::string> synth_code_lines(size_t n, uint64_t seed);

// The canned desk-scale experiment: a 256-vocab, d=32, 2-layer base model
// pre-trained 500 steps on prose, an adapter trained 500 steps on code, then
// base/adapter/merged/quantized/n-gram variants evaluated on both held-out
// splits.
struct DeskExperiment {
    Vocabulary vocab;
    ModelConfig config;
    TinyModel base;
    LoraAdapter adapter;
    TinyModel merged;
    EvalReport report;
    std::string digest_before, digest_after; // base digests around adapter training
    double base_ppl_code = 0.0, adapted_ppl_code = 0.0;
    double base_ppl_prose = 0.0, adapted_ppl_prose = 0.0;
};

DeskExperiment run_desk_experiment(uint64_t seed);

} // namespace tlm::eval
