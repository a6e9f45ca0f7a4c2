// tlm command line: tokenize, n-gram and information metrics, model packing,
// quantization, adapter training/merging, dataset curation, and the
// perplexity comparison harness.

#include "tlm/dataset.hpp"
#include "tlm/eval.hpp"
#include "tlm/lora.hpp"
#include "tlm/metrics.hpp"
#include "tlm/model.hpp"
#include "tlm/ngram.hpp"
#include "tlm/quant.hpp"
#include "tlm/store.hpp"
#include "tlm/tokenizer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <limits>
#include <memory>
#include <sstream>

namespace {

using namespace tlm;

struct GlobalFlags {
    uint64_t seed = 0;
    bool no_timestamp = false;
    std::string format = "json";
};

std::vector<std::string> load_corpus_lines(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::io, "cannot open corpus: " + path.string());
    std::vector<std::string> lines;
    std::string line;
    const bool jsonl = path.extension() == ".jsonl";
    uint64_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (jsonl) {
            auto j = nlohmann::json::parse(line, nullptr, false);
            if (j.is_discarded() || !j.is_object() || !j.contains("text") ||
                !j["text"].is_string()) {
                throw Error(ErrorKind::validation,
                            path.string() + ": line " + std::to_string(line_no) +
                                ": expected an object with a \"text\" field");
            }
            lines.push_back(j["text"].get<std::string>());
        } else {
            lines.push_back(line);
        }
    }
    return lines;
}

std::vector<TokenSequence> encode_corpus(const std::vector<std::string>& lines,
                                         const Vocabulary& vocab) {
    std::vector<TokenSequence> seqs;
    seqs.reserve(lines.size());
    for (const auto& l : lines) seqs.push_back(encode(l, vocab, true));
    return seqs;
}

std::vector<double> parse_dist(const std::string& csv) {
    std::vector<double> out;
    std::istringstream is(csv);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        try {
            out.push_back(std::stod(tok));
        } catch (const std::exception&) {
            throw Error(ErrorKind::validation, "bad probability value '" + tok + "'");
        }
    }
    return out;
}

TinyModel load_model(const std::filesystem::path& path) {
    return store::model_from_packed(store::unpack(path));
}

struct VariantSpec {
    std::string label; // kind
    std::string kind;
    std::vector<std::string> paths;
};

VariantSpec parse_variant(const std::string& spec) {
    const size_t eq = spec.find('=');
    if (eq == std::string::npos) {
        throw Error(ErrorKind::validation,
                    "variant '" + spec + "' must be kind=path[:path] (kinds: base, "
                    "adapter-runtime, merged, merged-q4s, merged-q6s, ngram-<n>)");
    }
    VariantSpec v;
    v.kind = spec.substr(0, eq);
    v.label = v.kind;
    std::string rest = spec.substr(eq + 1);
    size_t pos = 0;
    while (pos <= rest.size()) {
        const size_t colon = rest.find(':', pos);
        v.paths.push_back(rest.substr(pos, colon == std::string::npos ? std::string::npos
                                                                      : colon - pos));
        if (colon == std::string::npos) break;
        pos = colon + 1;
    }
    return v;
}

std::unique_ptr<eval::Scorer> make_scorer(const VariantSpec& v) {
    auto need = [&](size_t n, const char* what) {
        if (v.paths.size() != n) {
            throw Error(ErrorKind::validation,
                        "variant '" + v.kind + "' needs " + what);
        }
    };
    if (v.kind == "base") {
        need(1, "one model file");
        return eval::make_neural_scorer(v.label,
                                        std::make_shared<const TinyModel>(load_model(v.paths[0])));
    }
    if (v.kind == "adapter-runtime" || v.kind == "merged" || v.kind == "merged-q4s" ||
        v.kind == "merged-q6s") {
        need(2, "base:adapter files");
        TinyModel base = load_model(v.paths[0]);
        LoraAdapter ad = store::adapter_from_packed(store::unpack(v.paths[1]));
        if (v.kind == "adapter-runtime") {
            return eval::make_neural_scorer(v.label, std::make_shared<const TinyModel>(std::move(base)),
                                            std::make_shared<const LoraAdapter>(std::move(ad)));
        }
        TinyModel merged = merge(base, ad);
        if (v.kind == "merged-q4s") merged = eval::quantize_model_weights(merged, QuantScheme::q4s);
        if (v.kind == "merged-q6s") merged = eval::quantize_model_weights(merged, QuantScheme::q6s);
        return eval::make_neural_scorer(v.label,
                                        std::make_shared<const TinyModel>(std::move(merged)));
    }
    if (v.kind.rfind("ngram-", 0) == 0) {
        need(1, "one n-gram model file");
        auto model = std::make_shared<NGramModel>(load_ngram(v.paths[0]));
        const std::string order_str = v.kind.substr(6);
        if (order_str != std::to_string(model->order)) {
            throw Error(ErrorKind::validation, "variant '" + v.kind + "' does not match model order " +
                                                   std::to_string(model->order));
        }
        return eval::make_ngram_scorer(v.label, std::move(model));
    }
    throw Error(ErrorKind::validation, "unknown variant kind '" + v.kind + "'");
}

eval::Dataset parse_dataset(const std::string& spec, const Vocabulary& vocab) {
    const size_t eq = spec.find('=');
    if (eq == std::string::npos) {
        throw Error(ErrorKind::validation, "dataset '" + spec + "' must be label=path");
    }
    eval::Dataset d;
    d.label = spec.substr(0, eq);
    d.sequences = encode_corpus(load_corpus_lines(spec.substr(eq + 1)), vocab);
    return d;
}

void print_report(const eval::EvalReport& report, const GlobalFlags& g,
                  const std::string& out_path) {
    if (!out_path.empty()) {
        eval::emit(report, g.format, out_path);
        return;
    }
    if (g.format == "json") {
        eval::emit_json(report, std::cout);
    } else if (g.format == "csv") {
        eval::emit_csv(report, std::cout);
    } else {
        throw Error(ErrorKind::validation, "unknown report format '" + g.format + "' (json|csv)");
    }
}

store::Dtype dtype_from_name(const std::string& name) {
    if (name == "f32") return store::Dtype::f32;
    if (name == "q4s") return store::Dtype::q4s;
    if (name == "q6s") return store::Dtype::q6s;
    throw Error(ErrorKind::validation, "unknown dtype '" + name + "' (f32|q4s|q6s)");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"tlm: tiny LM adapters, quantization, and perplexity evaluation"};
    app.require_subcommand(1);
    app.fallthrough(); // global flags may appear after the subcommand

    GlobalFlags g;
    app.add_option("--seed", g.seed, "seed for every stochastic choice")->capture_default_str();
    app.add_flag("--no-timestamp", g.no_timestamp, "omit timestamps from reports");
    app.add_option("--format", g.format, "report format: json|csv")->capture_default_str();

    // --- tokenize ---
    {
        auto* cmd = app.add_subcommand("tokenize", "build a vocabulary, encode or decode text");
        struct Opts1 {
            std::string corpus, vocab, vocab_out, encode_text, decode_ids;
            uint64_t max_size = 4096;
            bool boundaries = false;
        };
        auto opt = std::make_shared<Opts1>();
        cmd->add_option("--corpus", opt->corpus, "corpus file (vocabulary building)");
        cmd->add_option("--max-size", opt->max_size, "vocabulary budget incl. reserved tokens");
        cmd->add_option("--vocab-out", opt->vocab_out, "write the built vocabulary here");
        cmd->add_option("--vocab", opt->vocab, "existing vocabulary file");
        cmd->add_option("--encode", opt->encode_text, "text to encode");
        cmd->add_option("--decode", opt->decode_ids, "space-separated ids to decode");
        cmd->add_flag("--boundaries", opt->boundaries, "add <s>/</s> when encoding");
        cmd->callback([opt] {
            if (!opt->vocab_out.empty()) {
                std::string corpus;
                for (const auto& line : load_corpus_lines(opt->corpus)) {
                    corpus += line;
                    corpus += '\n';
                }
                const Vocabulary v = build_vocab(corpus, opt->max_size);
                save_vocab(v, opt->vocab_out);
                std::cout << "vocabulary of " << v.size() << " tokens -> " << opt->vocab_out
                          << "\n";
                return;
            }
            if (opt->vocab.empty()) {
                throw Error(ErrorKind::validation,
                            "tokenize needs --vocab-out (build) or --vocab (encode/decode)");
            }
            const Vocabulary v = load_vocab(opt->vocab);
            if (!opt->encode_text.empty()) {
                const TokenSequence seq = encode(opt->encode_text, v, opt->boundaries);
                for (size_t i = 0; i < seq.ids.size(); ++i) {
                    if (i) std::cout << ' ';
                    std::cout << seq.ids[i];
                }
                std::cout << "\n";
            } else if (!opt->decode_ids.empty()) {
                std::istringstream is(opt->decode_ids);
                std::vector<int32_t> ids;
                int32_t id;
                while (is >> id) ids.push_back(id);
                std::cout << decode(ids, v) << "\n";
            } else {
                throw Error(ErrorKind::validation, "tokenize needs --encode or --decode");
            }
        });
    }

    // --- ngram fit|ppl ---
    {
        auto* cmd = app.add_subcommand("ngram", "count-based n-gram language model");
        cmd->require_subcommand(1);
        auto* fit = cmd->add_subcommand("fit", "fit a model on a corpus");
        struct Opts2 {
            std::string corpus, vocab, out;
            int n = 2;
            double k = 0.0;
        };
        auto fo = std::make_shared<Opts2>();
        fit->add_option("--corpus", fo->corpus, "corpus file, one sentence per line")->required();
        fit->add_option("--vocab", fo->vocab, "vocabulary file")->required();
        fit->add_option("--n", fo->n, "model order")->capture_default_str();
        fit->add_option("--k", fo->k, "add-k smoothing")->capture_default_str();
        fit->add_option("--out", fo->out, "output model file")->required();
        fit->callback([fo] {
            const Vocabulary v = load_vocab(fo->vocab);
            const auto seqs = encode_corpus(load_corpus_lines(fo->corpus), v);
            const NGramModel m = fit_ngram(seqs, fo->n, fo->k, v.size());
            save_ngram(m, fo->out);
            std::cout << "fitted " << fo->n << "-gram on " << seqs.size() << " sequences ("
                      << m.joint_counts.size() << " joint tuples) -> " << fo->out << "\n";
        });

        auto* ppl = cmd->add_subcommand("ppl", "score text under a fitted model");
        struct Opts3 {
            std::string model, vocab, text, corpus;
        };
        auto po = std::make_shared<Opts3>();
        ppl->add_option("--model", po->model, "fitted model file")->required();
        ppl->add_option("--vocab", po->vocab, "vocabulary file")->required();
        ppl->add_option("--text", po->text, "a single sentence");
        ppl->add_option("--corpus", po->corpus, "corpus file, one sentence per line");
        ppl->callback([po] {
            const Vocabulary v = load_vocab(po->vocab);
            const NGramModel m = load_ngram(po->model);
            std::vector<TokenSequence> seqs;
            if (!po->text.empty()) {
                seqs.push_back(encode(po->text, v, true));
            } else if (!po->corpus.empty()) {
                seqs = encode_corpus(load_corpus_lines(po->corpus), v);
            } else {
                throw Error(ErrorKind::validation, "ngram ppl needs --text or --corpus");
            }
            double total_bits = 0;
            uint64_t events = 0;
            for (const auto& s : seqs) {
                const SequenceScore sc = sequence_log_prob(m, s);
                total_bits += sc.zero_prob ? std::numeric_limits<double>::infinity()
                                           : -sc.log2_prob;
                events += sc.events;
            }
            const double h = total_bits / static_cast<double>(events);
            std::cout << "events " << events << "\nmean_h_bits " << format_g9(h)
                      << "\nperplexity_xent " << format_g9(std::exp2(h)) << "\n";
            if (seqs.size() == 1) {
                std::cout << "perplexity_root " << format_g9(perplexity_root(m, seqs[0])) << "\n";
            }
        });
    }

    // --- metrics xent|kl|fn ---
    {
        auto* cmd = app.add_subcommand("metrics", "entropy, cross-entropy, KL, block entropy");
        cmd->require_subcommand(1);

        auto* xent = cmd->add_subcommand("xent", "cross-entropy of two distributions");
        struct Opts4 { std::string p, q; };
        auto xo = std::make_shared<Opts4>();
        xent->add_option("--p", xo->p, "comma-separated probabilities")->required();
        xent->add_option("--q", xo->q, "comma-separated probabilities")->required();
        xent->callback([xo] {
            const ProbDist p = ProbDist::from(parse_dist(xo->p));
            const ProbDist q = ProbDist::from(parse_dist(xo->q));
            std::cout << "entropy_p " << format_g9(entropy(p)) << "\ncross_entropy "
                      << format_g9(cross_entropy(p, q)) << "\nkl " << format_g9(kl_divergence(p, q))
                      << "\nperplexity " << format_g9(perplexity_from_xent(cross_entropy(p, q)))
                      << "\n";
        });

        auto* kl = cmd->add_subcommand("kl", "Kullback-Leibler divergence");
        struct Opts5 { std::string p, q; };
        auto ko = std::make_shared<Opts5>();
        kl->add_option("--p", ko->p, "comma-separated probabilities")->required();
        kl->add_option("--q", ko->q, "comma-separated probabilities")->required();
        kl->callback([ko] {
            const ProbDist p = ProbDist::from(parse_dist(ko->p));
            const ProbDist q = ProbDist::from(parse_dist(ko->q));
            std::cout << format_g9(kl_divergence(p, q)) << "\n";
        });

        auto* fn = cmd->add_subcommand("fn", "block entropy series F_1..F_N");
        struct Opts6 {
            std::string corpus, vocab;
            int n_max = 3;
        };
        auto no = std::make_shared<Opts6>();
        fn->add_option("--corpus", no->corpus, "corpus file")->required();
        fn->add_option("--vocab", no->vocab, "vocabulary file")->required();
        fn->add_option("--n-max", no->n_max, "largest window")->capture_default_str();
        fn->callback([no] {
            const Vocabulary v = load_vocab(no->vocab);
            std::vector<TokenSequence> seqs;
            for (const auto& l : load_corpus_lines(no->corpus)) {
                seqs.push_back(encode(l, v, false));
            }
            const BlockEntropySeries series = entropy_rate_estimate(seqs, no->n_max);
            std::cout << "corpus_tokens " << series.corpus_tokens << "\n";
            for (size_t i = 0; i < series.values.size(); ++i) {
                std::cout << "F_" << (i + 1) << " " << format_g9(series.values[i]) << "\n";
            }
            std::cout << "entropy_rate_estimate " << format_g9(series.values.back()) << "\n";
        });
    }

    // --- quantize ---
    {
        auto* cmd = app.add_subcommand("quantize", "block-quantize a packed model's matrices");
        struct Opts7 {
            std::string in, out, scheme = "q4s";
        };
        auto o = std::make_shared<Opts7>();
        cmd->add_option("--in", o->in, "input .tlmf model")->required();
        cmd->add_option("--scheme", o->scheme, "q4s|q6s")->capture_default_str();
        cmd->add_option("--out", o->out, "output .tlmf model")->required();
        cmd->callback([o] {
            const store::PackedFile file = store::unpack(o->in);
            const TinyModel model = store::model_from_packed(file);
            const QuantScheme scheme = scheme_from_name(o->scheme);
            std::string kind = "base";
            if (auto it = file.meta.find("general.kind"); it != file.meta.end()) kind = it->second.s;
            double worst = 0, sum_rmse = 0;
            uint64_t mats = 0;
            for (const auto& tv : tensor_table(model)) {
                if (tv.shape.size() != 2) continue;
                const QuantErrorStats st =
                    quant_error(std::span<const float>(tv.data, tv.elements()), scheme);
                worst = std::max(worst, st.max_abs);
                sum_rmse += st.rmse;
                ++mats;
            }
            const uint32_t crc =
                store::pack_model(model, kind, dtype_from_name(o->scheme), o->out);
            std::cout << "quantized " << mats << " matrices to " << o->scheme << " (max |err| "
                      << format_g9(worst) << ", mean rmse "
                      << format_g9(mats ? sum_rmse / static_cast<double>(mats) : 0.0) << ") -> "
                      << o->out << " crc " << crc << "\n";
        });
    }

    // --- merge ---
    {
        auto* cmd = app.add_subcommand("merge", "fold an adapter into its base model");
        struct Opts8 {
            std::string base, adapter, out, requantize;
        };
        auto o = std::make_shared<Opts8>();
        cmd->add_option("--base", o->base, "base .tlmf model")->required();
        cmd->add_option("--adapter", o->adapter, "adapter .tlmf file")->required();
        cmd->add_option("--out", o->out, "output .tlmf model")->required();
        cmd->add_option("--requantize", o->requantize, "re-quantize the merged model: q4s|q6s");
        cmd->callback([o] {
            const store::PackedFile base_file = store::unpack(o->base);
            std::string base_dtype = "f32";
            for (const auto& t : base_file.tensors) {
                if (t.dtype != store::Dtype::f32) {
                    base_dtype = store::dtype_name(t.dtype);
                    break;
                }
            }
            const TinyModel base = store::model_from_packed(base_file);
            const LoraAdapter ad = store::adapter_from_packed(store::unpack(o->adapter));
            const TinyModel merged = merge(base, ad);
            store::MetaTable extra;
            extra.emplace("merge.base_dtype", store::MetaValue::of(base_dtype));
            extra.emplace("merge.requantized",
                          store::MetaValue::of(o->requantize.empty() ? std::string("none")
                                                                     : o->requantize));
            const store::Dtype out_dtype =
                o->requantize.empty() ? store::Dtype::f32 : dtype_from_name(o->requantize);
            const uint32_t crc = store::pack_model(merged, "merged", out_dtype, o->out, extra);
            std::cout << "merged (base weights " << base_dtype << ", output "
                      << store::dtype_name(out_dtype) << ") -> " << o->out << " crc " << crc
                      << "\n    note: quantize-after-merge differs from merge-of-quantized\n";
        });
    }

    // --- train-adapter ---
    {
        auto* cmd = app.add_subcommand("train-adapter", "train a low-rank adapter, base frozen");
        struct Opts9 {
            std::string base, data, vocab, out, optimizer = "adam", targets, loss_out;
            int rank = 8, steps = 200, batch = 4;
            double lr = 1e-3;
            float alpha = 16.0f;
        };
        auto o = std::make_shared<Opts9>();
        cmd->add_option("--base", o->base, "base .tlmf model")->required();
        cmd->add_option("--data", o->data, "training corpus (.txt lines or .jsonl with text)")
            ->required();
        cmd->add_option("--vocab", o->vocab, "vocabulary file")->required();
        cmd->add_option("--out", o->out, "output adapter .tlmf")->required();
        cmd->add_option("--targets", o->targets,
                        "comma-separated target tensors (default: attn_q+attn_v of every layer)");
        cmd->add_option("--rank", o->rank)->capture_default_str();
        cmd->add_option("--alpha", o->alpha)->capture_default_str();
        cmd->add_option("--steps", o->steps)->capture_default_str();
        cmd->add_option("--lr", o->lr)->capture_default_str();
        cmd->add_option("--batch-size", o->batch)->capture_default_str();
        cmd->add_option("--optimizer", o->optimizer, "sgd|adam")->capture_default_str();
        cmd->add_option("--loss-curve", o->loss_out, "write the per-step loss as JSON");
        cmd->callback([o, &g] {
            const TinyModel base = load_model(o->base);
            const Vocabulary v = load_vocab(o->vocab);
            const auto seqs = encode_corpus(load_corpus_lines(o->data), v);

            std::vector<std::string> targets;
            if (!o->targets.empty()) {
                std::istringstream is(o->targets);
                std::string t;
                while (std::getline(is, t, ',')) {
                    if (!t.empty()) targets.push_back(t);
                }
            }
            const LoraAdapter fresh =
                init_adapter(base, targets, o->rank, o->alpha, g.seed);

            TrainOptions opts;
            opts.steps = o->steps;
            opts.lr = o->lr;
            opts.batch_size = o->batch;
            opts.seed = g.seed;
            if (o->optimizer == "sgd") {
                opts.optimizer = Optimizer::sgd;
            } else if (o->optimizer == "adam") {
                opts.optimizer = Optimizer::adam;
            } else {
                throw Error(ErrorKind::validation, "unknown optimizer '" + o->optimizer + "'");
            }

            const TrainReport rep = train_adapter(base, fresh, seqs, opts);
            if (rep.digest_before != rep.digest_after) {
                throw Error(ErrorKind::numeric, "base digest changed during adapter training");
            }
            store::pack_adapter(rep.adapter, base.config, base.base_digest, o->out);
            std::cout << "trained " << rep.adapter.entries.size() << " targets, loss "
                      << format_g9(rep.loss_bits.front()) << " -> "
                      << format_g9(rep.loss_bits.back()) << " bits, base digest "
                      << rep.digest_after << " (unchanged) -> " << o->out << "\n";
            if (!o->loss_out.empty()) {
                std::ofstream lf(o->loss_out, std::ios::binary);
                if (!lf) throw Error(ErrorKind::io, "cannot write loss curve: " + o->loss_out);
                lf << "[";
                for (size_t i = 0; i < rep.loss_bits.size(); ++i) {
                    if (i) lf << ",";
                    lf << format_g9(rep.loss_bits[i]);
                }
                lf << "]\n";
            }
        });
    }

    // --- pack / unpack / inspect ---
    {
        auto* cmd = app.add_subcommand("pack", "initialize a fresh base model file");
        struct Opts10 {
            std::string out, dtype = "f32";
            int32_t vocab_size = 256, d_model = 32, n_layers = 2, n_heads = 4, d_ff = 128,
                    max_seq = 64;
        };
        auto o = std::make_shared<Opts10>();
        cmd->add_option("--out", o->out, "output .tlmf model")->required();
        cmd->add_option("--vocab-size", o->vocab_size)->capture_default_str();
        cmd->add_option("--d-model", o->d_model)->capture_default_str();
        cmd->add_option("--n-layers", o->n_layers)->capture_default_str();
        cmd->add_option("--n-heads", o->n_heads)->capture_default_str();
        cmd->add_option("--d-ff", o->d_ff)->capture_default_str();
        cmd->add_option("--max-seq", o->max_seq)->capture_default_str();
        cmd->add_option("--dtype", o->dtype, "f32|q4s|q6s")->capture_default_str();
        cmd->callback([o, &g] {
            ModelConfig cfg{o->vocab_size, o->d_model, o->n_layers,
                            o->n_heads,    o->d_ff,    o->max_seq,  g.seed};
            const TinyModel model = init_model(cfg);
            const uint32_t crc =
                store::pack_model(model, "base", dtype_from_name(o->dtype), o->out);
            std::cout << "packed base model, digest " << model.base_digest << ", crc " << crc
                      << " -> " << o->out << "\n";
        });

        auto* up = app.add_subcommand("unpack", "validate and summarize a packed file");
        struct Opts11 {
            std::string in;
            bool verify = false;
        };
        auto uo = std::make_shared<Opts11>();
        up->add_option("--in", uo->in, "packed .tlmf file")->required();
        up->add_flag("--verify", uo->verify, "full validation (magic, alignment, checksum)");
        up->callback([uo] {
            const store::PackedFile file = store::unpack(uo->in); // always fully validates
            std::string kind = "?";
            if (auto it = file.meta.find("general.kind"); it != file.meta.end()) kind = it->second.s;
            std::cout << "ok: kind " << kind << ", " << file.tensors.size() << " tensors, crc "
                      << file.crc << (uo->verify ? " (verified)" : "") << "\n";
        });

        auto* ins = app.add_subcommand("inspect", "print metadata and tensor index");
        auto io = std::make_shared<std::string>();
        ins->add_option("--in", *io, "packed .tlmf file")->required();
        ins->callback([io] { std::cout << store::inspect(store::unpack(*io)); });
    }

    // --- dataset pipeline: dedup / format / split ---
    {
        auto* cmd = app.add_subcommand("dedup", "normalize and exact-deduplicate a jsonl dataset");
        struct Opts12 {
            std::string in, out, stats;
            bool strict = false;
        };
        auto o = std::make_shared<Opts12>();
        cmd->add_option("--in", o->in, "input .jsonl")->required();
        cmd->add_option("--out", o->out, "output .jsonl")->required();
        cmd->add_option("--stats", o->stats, "stats sidecar path (default: <out>.stats.json)");
        cmd->add_flag("--strict", o->strict, "fail on malformed lines instead of skipping");
        cmd->callback([o] {
            IngestResult in = ingest_jsonl(o->in, o->strict);
            for (auto& r : in.records) r = normalize_record(r);
            auto [kept, stats] = dedup_records(in.records);
            write_jsonl(kept, o->out);
            write_dedup_stats(stats, o->stats.empty() ? o->out + ".stats.json" : o->stats);
            std::cout << "kept " << stats.kept << " of " << stats.input << " records (removed "
                      << stats.removed << ", skipped " << in.skipped << " malformed lines)\n";
        });

        auto* fmt = app.add_subcommand("format", "render records through a chat template");
        struct Opts13 {
            std::string in, out, tmpl = "zephyr";
            bool strict = false;
            bool code_only = false;
        };
        auto fo = std::make_shared<Opts13>();
        fmt->add_option("--in", fo->in, "input .jsonl")->required();
        fmt->add_option("--out", fo->out, "output .jsonl with a \"text\" field per record")
            ->required();
        fmt->add_option("--template", fo->tmpl, "zephyr|alt")->capture_default_str();
        fmt->add_flag("--strict", fo->strict);
        fmt->add_flag("--code-only", fo->code_only,
                      "keep only records whose response looks like code");
        fmt->callback([fo] {
            const ChatTemplate tmpl = chat_template_from_name(fo->tmpl);
            IngestResult in = ingest_jsonl(fo->in, fo->strict);
            if (fo->code_only) in.records = filter_code(in.records);
            std::ofstream f(fo->out, std::ios::binary);
            if (!f) throw Error(ErrorKind::io, "cannot write: " + fo->out);
            for (const auto& r : in.records) {
                nlohmann::json j;
                j["text"] = format_chat(r, tmpl);
                f << j.dump() << '\n';
            }
            std::cout << "formatted " << in.records.size() << " records (" << fo->tmpl << ") -> "
                      << fo->out << "\n";
        });

        auto* sp = app.add_subcommand("split", "deterministic train/test split");
        struct Opts14 {
            std::string in, train_out, test_out;
            double fraction = 0.2;
            bool strict = false;
        };
        auto so = std::make_shared<Opts14>();
        sp->add_option("--in", so->in, "input .jsonl")->required();
        sp->add_option("--train-out", so->train_out)->required();
        sp->add_option("--test-out", so->test_out)->required();
        sp->add_option("--test-fraction", so->fraction)->capture_default_str();
        sp->add_flag("--strict", so->strict);
        sp->callback([so, &g] {
            const IngestResult in = ingest_jsonl(so->in, so->strict);
            auto [train, test] = split_records(in.records, so->fraction, g.seed);
            write_jsonl(train, so->train_out);
            write_jsonl(test, so->test_out);
            std::cout << "split " << in.records.size() << " records into " << train.size()
                      << " train / " << test.size() << " test (seed " << g.seed << ")\n";
        });
    }

    // --- ppl / compare ---
    {
        auto* cmd = app.add_subcommand("ppl", "perplexity of one variant on one dataset");
        struct Opts15 {
            std::string variant, data, vocab, out;
        };
        auto o = std::make_shared<Opts15>();
        cmd->add_option("--variant", o->variant, "kind=path[:path]")->required();
        cmd->add_option("--data", o->data, "label=path")->required();
        cmd->add_option("--vocab", o->vocab, "vocabulary file")->required();
        cmd->add_option("--out", o->out, "write the report here instead of stdout");
        cmd->callback([o, &g] {
            const Vocabulary v = load_vocab(o->vocab);
            const auto scorer = make_scorer(parse_variant(o->variant));
            const eval::Dataset d = parse_dataset(o->data, v);
            eval::EvalReport report;
            report.rows.push_back(eval::eval_ppl(*scorer, d, !g.no_timestamp));
            print_report(report, g, o->out);
            if (!report.rows[0].error.empty()) {
                throw Error(ErrorKind::validation, report.rows[0].error);
            }
        });

        auto* cmp = app.add_subcommand("compare", "cross-product perplexity comparison");
        struct Opts16 {
            std::vector<std::string> variants, datasets;
            std::string vocab, out;
        };
        auto co = std::make_shared<Opts16>();
        cmp->add_option("--variant", co->variants, "kind=path[:path] (repeatable)")->required();
        cmp->add_option("--data", co->datasets, "label=path (repeatable)")->required();
        cmp->add_option("--vocab", co->vocab, "vocabulary file")->required();
        cmp->add_option("--out", co->out, "write the report here instead of stdout");
        cmp->callback([co, &g] {
            const Vocabulary v = load_vocab(co->vocab);
            std::vector<std::unique_ptr<eval::Scorer>> scorers;
            for (const auto& s : co->variants) scorers.push_back(make_scorer(parse_variant(s)));
            std::vector<eval::Dataset> datasets;
            for (const auto& d : co->datasets) datasets.push_back(parse_dataset(d, v));
            std::vector<const eval::Scorer*> refs;
            for (const auto& s : scorers) refs.push_back(s.get());
            const eval::EvalReport report = eval::compare(refs, datasets, !g.no_timestamp);
            print_report(report, g, co->out);
        });
    }

    // --- gradcheck ---
    {
        auto* cmd = app.add_subcommand("gradcheck", "finite-difference check of adapter gradients");
        struct Opts17 {
            std::string base, adapter, vocab, text;
            int n_coords = 20;
            double tol = 1e-4;
        };
        auto o = std::make_shared<Opts17>();
        cmd->add_option("--base", o->base, "base .tlmf model")->required();
        cmd->add_option("--adapter", o->adapter, "adapter .tlmf (default: fresh r=4 adapter)");
        cmd->add_option("--vocab", o->vocab, "vocabulary file")->required();
        cmd->add_option("--text", o->text, "probe sentence")->required();
        cmd->add_option("--n-coords", o->n_coords)->capture_default_str();
        cmd->add_option("--tol", o->tol)->capture_default_str();
        cmd->callback([o, &g] {
            const TinyModel base = load_model(o->base);
            const Vocabulary v = load_vocab(o->vocab);
            const TokenSequence seq = encode(o->text, v, true);
            LoraAdapter ad;
            if (o->adapter.empty()) {
                ad = init_adapter(base, {}, 4, 8.0f, g.seed);
                // move B off zero so both factors carry signal
                GaussianRng rng(g.seed + 1);
                for (auto& e : ad.entries) {
                    for (Eigen::Index i = 0; i < e.b.size(); ++i) {
                        e.b.data()[i] = static_cast<float>(0.02 * rng.next());
                    }
                }
            } else {
                ad = store::adapter_from_packed(store::unpack(o->adapter));
            }
            const GradCheckResult r = grad_check(base, ad, seq, o->n_coords, o->tol, g.seed);
            std::cout << (r.pass ? "PASS" : "FAIL") << ": worst relative error "
                      << format_g9(r.worst_rel_error) << " at " << r.worst_coord << " over "
                      << r.checked << " coordinates (tol " << format_g9(o->tol) << ")\n";
            if (!r.pass) {
                throw Error(ErrorKind::numeric, "gradient check failed");
            }
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1; // usage problems are validation errors
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        switch (e.kind()) {
            case ErrorKind::validation: return 1;
            case ErrorKind::io: return 2;
            case ErrorKind::numeric: return 3;
        }
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
