#include "tlm/eval.hpp"

#include "tlm/metrics.hpp"

#include <json.hpp>

#include <cmath>
#include <ctime>
#include <fstream>
#include <sstream>

namespace tlm::eval {

namespace {

std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

class NeuralScorer final : public Scorer {
public:
    NeuralScorer(std::string label, std::shared_ptr<const TinyModel> model,
                 std::shared_ptr<const LoraAdapter> adapter)
        : label_(std::move(label)), model_(std::move(model)), adapter_(std::move(adapter)) {
        digest_ = model_->base_digest;
        if (adapter_) digest_ += "+" + adapter_digest(*adapter_);
    }

    const std::string& label() const override { return label_; }
    const std::string& digest() const override { return digest_; }

    std::pair<double, uint64_t> score(const TokenSequence& seq) const override {
        const NllResult r = neural_nll(*model_, seq, adapter_.get());
        return {r.mean_bits * static_cast<double>(r.events), r.events};
    }

private:
    std::string label_;
    std::shared_ptr<const TinyModel> model_;
    std::shared_ptr<const LoraAdapter> adapter_;
    std::string digest_;
};

class NgramScorer final : public Scorer {
public:
    NgramScorer(std::string label, std::shared_ptr<const NGramModel> model)
        : label_(std::move(label)), model_(std::move(model)) {
        uint64_t h = 0xcbf29ce484222325ull;
        h = fnv1a64(&model_->order, sizeof(model_->order), h);
        h = fnv1a64(&model_->smoothing_k, sizeof(model_->smoothing_k), h);
        h = fnv1a64(&model_->vocab_size, sizeof(model_->vocab_size), h);
        for (const auto& [key, count] : model_->joint_counts) {
            h = fnv1a64(key.data(), key.size() * sizeof(int32_t), h);
            h = fnv1a64(&count, sizeof(count), h);
        }
        digest_ = hex_u64(h);
    }

    const std::string& label() const override { return label_; }
    const std::string& digest() const override { return digest_; }

    std::pair<double, uint64_t> score(const TokenSequence& seq) const override {
        const SequenceScore s = sequence_log_prob(*model_, seq);
        const double bits = s.zero_prob ? std::numeric_limits<double>::infinity() : -s.log2_prob;
        return {bits, s.events};
    }

private:
    std::string label_;
    std::shared_ptr<const NGramModel> model_;
    std::string digest_;
};

} // namespace

std::unique_ptr<Scorer> make_neural_scorer(std::string label,
                                           std::shared_ptr<const TinyModel> model,
                                           std::shared_ptr<const LoraAdapter> runtime_adapter) {
    return std::make_unique<NeuralScorer>(std::move(label), std::move(model),
                                          std::move(runtime_adapter));
}

std::unique_ptr<Scorer> make_ngram_scorer(std::string label,
                                          std::shared_ptr<const NGramModel> model) {
    return std::make_unique<NgramScorer>(std::move(label), std::move(model));
}

EvalRow eval_ppl(const Scorer& scorer, const Dataset& dataset, bool with_timestamp) {
    EvalRow row;
    row.variant = scorer.label();
    row.dataset = dataset.label;
    row.config_digest = scorer.digest();
    if (with_timestamp) row.timestamp = utc_timestamp();
    try {
        if (dataset.sequences.empty()) {
            throw Error(ErrorKind::validation, "dataset '" + dataset.label + "' is empty");
        }
        double total_bits = 0.0;
        uint64_t total_events = 0;
        for (const auto& seq : dataset.sequences) {
            auto [bits, events] = scorer.score(seq);
            total_bits += bits;
            total_events += events;
        }
        if (total_events == 0) {
            throw Error(ErrorKind::validation, "dataset '" + dataset.label + "' has no events");
        }
        row.tokens = total_events;
        row.mean_h_bits = total_bits / static_cast<double>(total_events);
        row.perplexity = perplexity_from_xent(row.mean_h_bits);
    } catch (const Error& e) {
        row.error = e.what();
    }
    return row;
}

EvalReport compare(const std::vector<const Scorer*>& variants,
                   const std::vector<Dataset>& datasets, bool with_timestamps) {
    if (variants.empty()) throw Error(ErrorKind::validation, "compare: no variants");
    if (datasets.empty()) throw Error(ErrorKind::validation, "compare: no datasets");
    EvalReport report;
    for (const Scorer* v : variants) {
        for (const Dataset& d : datasets) {
            report.rows.push_back(eval_ppl(*v, d, with_timestamps));
        }
    }
    return report;
}

namespace {

std::string json_str(const std::string& s) { return nlohmann::json(s).dump(); }

// 9 significant digits; infinities become the string "inf"
std::string json_num(double v) {
    if (!std::isfinite(v)) return "\"inf\"";
    return format_g9(v);
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

} // namespace

void emit_json(const EvalReport& report, std::ostream& os) {
    os << "[\n";
    for (size_t i = 0; i < report.rows.size(); ++i) {
        const EvalRow& r = report.rows[i];
        os << "  {";
        os << "\"variant\":" << json_str(r.variant);
        os << ",\"dataset\":" << json_str(r.dataset);
        if (r.error.empty()) {
            os << ",\"tokens\":" << r.tokens;
            os << ",\"mean_h_bits\":" << json_num(r.mean_h_bits);
            os << ",\"perplexity\":" << json_num(r.perplexity);
        } else {
            os << ",\"error\":" << json_str(r.error);
        }
        os << ",\"config_digest\":" << json_str(r.config_digest);
        if (!r.timestamp.empty()) os << ",\"timestamp\":" << json_str(r.timestamp);
        os << "}";
        if (i + 1 < report.rows.size()) os << ",";
        os << "\n";
    }
    os << "]\n";
}

void emit_csv(const EvalReport& report, std::ostream& os) {
    os << "variant,dataset,tokens,mean_h_bits,perplexity,config_digest,timestamp,error\r\n";
    for (const EvalRow& r : report.rows) {
        os << csv_field(r.variant) << ',' << csv_field(r.dataset) << ',';
        if (r.error.empty()) {
            os << r.tokens << ',' << format_g9(r.mean_h_bits) << ',' << format_g9(r.perplexity);
        } else {
            os << ",,";
        }
        os << ',' << csv_field(r.config_digest) << ',' << csv_field(r.timestamp) << ','
           << csv_field(r.error) << "\r\n";
    }
}

void emit(const EvalReport& report, const std::string& format,
          const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::io, "cannot write report: " + path.string());
    if (format == "json") {
        emit_json(report, f);
    } else if (format == "csv") {
        emit_csv(report, f);
    } else {
        throw Error(ErrorKind::validation, "unknown report format '" + format + "' (json|csv)");
    }
    if (!f) throw Error(ErrorKind::io, "write failed: " + path.string());
}

TinyModel quantize_model_weights(const TinyModel& model, QuantScheme scheme) {
    TinyModel out = model;
    for (const auto& tv : tensor_table(model)) {
        if (tv.shape.size() != 2) continue;
        const QuantTensor q =
            quantize(std::span<const float>(tv.data, tv.elements()), tv.shape, scheme);
        const std::vector<float> back = dequantize(q);
        ParamRef ref = named_param(out, tv.name);
        std::copy(back.begin(), back.end(), ref.data);
    }
    out.base_digest = compute_digest(out);
    return out;
}

// --- synthetic corpora -------------------------------------------------------

std::vector<std::string> synth_prose_lines(size_t n, uint64_t seed) {
    static const std::vector<std::string> subjects = {
        "the cat",     "the dog",   "a bird",     "the old man", "my friend",
        "the teacher", "the river", "a child",    "the sailor",  "the gardener"};
    static const std::vector<std::string> verbs = {
        "watches", "remembers", "follows", "paints", "hears",
        "loves",   "visits",    "finds",   "knows",  "describes"};
    static const std::vector<std::string> objects = {
        "the sea",    "an old song", "the morning", "a quiet road", "the forest",
        "the market", "a story",     "the rain",    "the city",     "a garden"};
    static const std::vector<std::string> tails = {
        "", "at night", "every day", "in spring", "with care", "for hours"};

    SplitMix64 rng(seed);
    std::vector<std::string> lines;
    lines.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        std::string s = subjects[rng.below(subjects.size())];
        s += ' ';
        s += verbs[rng.below(verbs.size())];
        s += ' ';
        s += objects[rng.below(objects.size())];
        const std::string& tail = tails[rng.below(tails.size())];
        if (!tail.empty()) {
            s += ' ';
            s += tail;
        }
        s += " .";
        lines.push_back(std::move(s));
    }
    return lines;
}

std::vector<std::string> synth_code_lines(size_t n, uint64_t seed) {
    SplitMix64 rng(seed);
    auto var = [&] { return "x" + std::to_string(rng.below(6)); };
    auto fn = [&] { return "f" + std::to_string(rng.below(4)); };
    auto num = [&] { return std::to_string(rng.below(10)); };

    std::vector<std::string> lines;
    lines.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        std::string s;
        switch (rng.below(5)) {
            case 0: s = var() + " = " + fn() + " ( " + var() + " , " + num() + " )"; break;
            case 1: s = "def " + fn() + " ( " + var() + " ) : return " + var() + " + " + num(); break;
            case 2: s = "for i in range ( " + num() + " ) : " + var() + " = " + var() + " + 1"; break;
            case 3: s = "if " + var() + " > " + num() + " : print ( " + var() + " )"; break;
            default: s = var() + " = " + var() + " * " + num() + " + " + num(); break;
        }
        lines.push_back(std::move(s));
    }
    return lines;
}

// --- desk-scale experiment ---------------------------------------------------

namespace {

std::vector<TokenSequence> encode_lines(const std::vector<std::string>& lines,
                                        const Vocabulary& vocab) {
    std::vector<TokenSequence> out;
    out.reserve(lines.size());
    for (const auto& line : lines) {
        out.push_back(encode(line, vocab, true));
    }
    return out;
}

} // namespace

DeskExperiment run_desk_experiment(uint64_t seed) {
    DeskExperiment ex;

    SplitMix64 seeder(seed);
    const uint64_t seed_prose = seeder.next();
    const uint64_t seed_code = seeder.next();
    const uint64_t seed_model = seeder.next();
    const uint64_t seed_base_train = seeder.next();
    const uint64_t seed_adapter = seeder.next();
    const uint64_t seed_adapter_train = seeder.next();

    const auto prose = synth_prose_lines(480, seed_prose);
    const auto code = synth_code_lines(480, seed_code);
    const std::vector<std::string> prose_train(prose.begin(), prose.begin() + 400);
    const std::vector<std::string> prose_test(prose.begin() + 400, prose.end());
    const std::vector<std::string> code_train(code.begin(), code.begin() + 400);
    const std::vector<std::string> code_test(code.begin() + 400, code.end());

    std::string vocab_corpus;
    for (const auto& l : prose_train) {
        vocab_corpus += l;
        vocab_corpus += '\n';
    }
    for (const auto& l : code_train) {
        vocab_corpus += l;
        vocab_corpus += '\n';
    }
    ex.vocab = build_vocab(vocab_corpus, 256);

    ex.config = ModelConfig{256, 32, 2, 4, 128, 40, seed_model};
    ex.base = init_model(ex.config);

    const auto prose_train_seqs = encode_lines(prose_train, ex.vocab);
    const auto code_train_seqs = encode_lines(code_train, ex.vocab);

    TrainOptions base_opts;
    base_opts.steps = 500;
    base_opts.lr = 3e-3;
    base_opts.optimizer = Optimizer::adam;
    base_opts.batch_size = 8;
    base_opts.seed = seed_base_train;
    train_model(ex.base, prose_train_seqs, base_opts);

    std::vector<std::string> targets = default_lora_targets(ex.config);
    for (int32_t l = 0; l < ex.config.n_layers; ++l) {
        targets.push_back("blk." + std::to_string(l) + ".ffn_up");
        targets.push_back("blk." + std::to_string(l) + ".ffn_down");
    }
    targets.push_back("output");
    const LoraAdapter fresh = init_adapter(ex.base, targets, 8, 16.0f, seed_adapter);

    TrainOptions ad_opts;
    ad_opts.steps = 500;
    ad_opts.lr = 2e-3;
    ad_opts.optimizer = Optimizer::adam;
    ad_opts.batch_size = 8;
    ad_opts.seed = seed_adapter_train;
    TrainReport tr = train_adapter(ex.base, fresh, code_train_seqs, ad_opts);
    ex.adapter = std::move(tr.adapter);
    ex.digest_before = tr.digest_before;
    ex.digest_after = tr.digest_after;

    ex.merged = merge(ex.base, ex.adapter);

    auto base_sp = std::make_shared<const TinyModel>(ex.base);
    auto adapter_sp = std::make_shared<const LoraAdapter>(ex.adapter);
    auto merged_sp = std::make_shared<const TinyModel>(ex.merged);
    auto merged_q4 =
        std::make_shared<const TinyModel>(quantize_model_weights(ex.merged, QuantScheme::q4s));
    auto merged_q6 =
        std::make_shared<const TinyModel>(quantize_model_weights(ex.merged, QuantScheme::q6s));
    auto ngram2 = std::make_shared<const NGramModel>(
        fit_ngram(code_train_seqs, 2, 1.0, ex.vocab.size()));

    std::vector<std::unique_ptr<Scorer>> scorers;
    scorers.push_back(make_neural_scorer("base", base_sp));
    scorers.push_back(make_neural_scorer("adapter-runtime", base_sp, adapter_sp));
    scorers.push_back(make_neural_scorer("merged", merged_sp));
    scorers.push_back(make_neural_scorer("merged-q4s", merged_q4));
    scorers.push_back(make_neural_scorer("merged-q6s", merged_q6));
    scorers.push_back(make_ngram_scorer("ngram-2", ngram2));

    std::vector<Dataset> datasets;
    datasets.push_back({"heldout-prose", encode_lines(prose_test, ex.vocab)});
    datasets.push_back({"heldout-code", encode_lines(code_test, ex.vocab)});

    std::vector<const Scorer*> refs;
    for (const auto& s : scorers) refs.push_back(s.get());
    ex.report = compare(refs, datasets, false);

    for (const auto& row : ex.report.rows) {
        if (!row.error.empty()) continue;
        if (row.variant == "base" && row.dataset == "heldout-code") ex.base_ppl_code = row.perplexity;
        if (row.variant == "base" && row.dataset == "heldout-prose") ex.base_ppl_prose = row.perplexity;
        if (row.variant == "adapter-runtime" && row.dataset == "heldout-code") {
            ex.adapted_ppl_code = row.perplexity;
        }
        if (row.variant == "adapter-runtime" && row.dataset == "heldout-prose") {
            ex.adapted_ppl_prose = row.perplexity;
        }
    }
    return ex;
}

} // namespace tlm::eval
