#pragma once

#include "tlm/model.hpp"

#include <string>
#include <vector>

namespace tlm {

struct QuantTensor; // quant.hpp

struct LoraEntry {
    std::string target; // base tensor name, e.g. "blk.0.attn_q"
    MatF a;             // [r x in], Gaussian at init
    MatF b;             // [out x r], zero at init
};

// Low-rank delta (alpha/r)·B·A per target. The base model is never written:
// runtime application adds the adapter path, merge() produces a new model.
struct LoraAdapter {
    int32_t rank = 0;
    float alpha = 0.0f;
    std::vector<LoraEntry> entries;

    double scaling() const { return static_cast<double>(alpha) / rank; }
    const LoraEntry* find(const std::string& target) const;
};

// The canonical default: attention q and v projections of every layer.
std::vector<std::string> default_lora_targets(const ModelConfig& cfg);

// A ~ Gaussian(0, 0.02) from the seed, B = 0, so a fresh adapter computes
// exactly the base function. Unknown targets throw, listing the valid names.
LoraAdapter init_adapter(const TinyModel& model, const std::vector<std::string>& targets,
                         int32_t rank, float alpha, uint64_t seed);

// y = W·x + scaling·B·(A·x); W is read-only.
VecF lora_apply(const MatF& w, const LoraEntry& entry, double scaling, const VecF& x);

// QLoRA path: the frozen base tensor stays quantized and is dequantized on
// the fly; the adapter stays full precision.
VecF lora_apply(const QuantTensor& w, const LoraEntry& entry, double scaling, const VecF& x);

// W' = W + scaling·B·A per target, everything else copied verbatim; the input
// model is untouched and the result carries a fresh digest.
TinyModel merge(const TinyModel& model, const LoraAdapter& adapter);

// "<target>.lora_a" / "<target>.lora_b"
std::vector<std::string> adapter_param_names(const LoraAdapter& adapter);
ParamRef named_param(LoraAdapter& adapter, const std::string& name);
std::string adapter_digest(const LoraAdapter& adapter);

struct TrainReport {
    std::vector<double> loss_bits; // per-step batch loss
    LoraAdapter adapter;
    std::string digest_before; // base digest before training
    std::string digest_after;  // must equal digest_before (frozen base)
};

// Gradient steps on A and B only. Deterministic given opts.seed.
TrainReport train_adapter(const TinyModel& model, const LoraAdapter& adapter,
                          const std::vector<TokenSequence>& data, const TrainOptions& opts);

struct FdCoord {
    std::string param; // adapter param name
    int row = 0;
    int col = 0;
};

struct GradCheckResult {
    bool pass = false;
    double worst_rel_error = 0.0;
    std::string worst_coord;
    int checked = 0;
};

// Central finite differences (64-bit loss evaluations at f32-perturbed
// coordinates, effective-step corrected) against the supplied gradients.
GradCheckResult fd_compare(const TinyModel& model, const LoraAdapter& adapter,
                           const TokenSequence& seq, const Gradients& grads,
                           const std::vector<FdCoord>& coords, double step, double tol);

// Samples n_coords coordinates across the adapter (optionally restricted to
// targets containing target_filter), runs backward, and compares.
GradCheckResult grad_check(const TinyModel& model, const LoraAdapter& adapter,
                           const TokenSequence& seq, int n_coords, double tol, uint64_t seed,
                           const std::string& target_filter = "");

} // namespace tlm
