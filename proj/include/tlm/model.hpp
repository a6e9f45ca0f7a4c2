#pragma once

#include "tlm/common.hpp"
#include "tlm/tokenizer.hpp"

#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace tlm {

struct LoraAdapter; // lora.hpp

struct ModelConfig {
    int32_t vocab_size = 0;
    int32_t d_model = 0;
    int32_t n_layers = 0;
    int32_t n_heads = 0;
    int32_t d_ff = 0;
    int32_t max_seq = 0;
    uint64_t seed = 0;

    void validate() const;
    int32_t head_dim() const { return d_model / n_heads; }
};

struct LayerWeights {
    MatF attn_q, attn_k, attn_v, attn_o; // [d x d]
    MatF ffn_up;                         // [d_ff x d]
    MatF ffn_down;                       // [d x d_ff]
    VecF norm_attn, norm_ffn;            // [d]
};

// Pre-norm causal decoder: embed+pos -> L x (RMSNorm, causal MHA, residual,
// RMSNorm, GELU MLP, residual) -> RMSNorm -> untied output head.
// Weights are f32 storage; all math runs in f64.
struct TinyModel {
    ModelConfig config;
    MatF tok_embed; // [V x d]
    MatF pos_embed; // [max_seq x d]
    std::vector<LayerWeights> layers;
    VecF final_norm; // [d]
    MatF head;       // [V x d]

    // FNV-1a over all base tensor bytes in table order; the frozen-base witness
    std::string base_digest;
};

// Tensor names: token_embd, pos_embd, output_norm, output, and
// blk.<l>.{attn_q,attn_k,attn_v,attn_o,ffn_up,ffn_down,norm_attn,norm_ffn}.
std::vector<std::string> tensor_names(const ModelConfig& cfg);

// The 2-d projection tensors an adapter may target.
std::vector<std::string> adapter_target_names(const ModelConfig& cfg);

// [out, in] of an adapter-targetable tensor; throws listing the valid targets.
std::pair<Eigen::Index, Eigen::Index> adapter_target_dims(const ModelConfig& cfg,
                                                          const std::string& name);

struct TensorView {
    std::string name;
    const float* data = nullptr; // row-major
    std::vector<uint64_t> shape;

    uint64_t elements() const {
        uint64_t n = 1;
        for (uint64_t d : shape) n *= d;
        return n;
    }
};

// All tensors in the fixed serialization/digest order.
std::vector<TensorView> tensor_table(const TinyModel& model);

struct ParamRef {
    float* data = nullptr;
    size_t elements = 0;
};

// Mutable flat view of a base tensor (optimizer updates); throws on unknown name.
ParamRef named_param(TinyModel& model, const std::string& name);

std::string compute_digest(const TinyModel& model);

// Deterministic init: one SplitMix64/Box-Muller stream seeded with config.seed
// fills the tensors in table order, scale 0.02; norm gains are 1.
TinyModel init_model(const ModelConfig& cfg);

// Weight access abstraction: lets forward run either from an in-memory model
// or from a partially-resident packed file (model_store::LayeredHandle).
class WeightSource {
public:
    virtual ~WeightSource() = default;
    virtual const ModelConfig& config() const = 0;
    virtual const MatF& tok_embed() = 0;
    virtual const MatF& pos_embed() = 0;
    virtual const VecF& final_norm() = 0;
    virtual const MatF& head() = 0;
    virtual std::shared_ptr<const LayerWeights> layer(int l) = 0;
};

class ModelSource final : public WeightSource {
public:
    explicit ModelSource(const TinyModel& model) : model_(model) {}
    const ModelConfig& config() const override { return model_.config; }
    const MatF& tok_embed() override { return model_.tok_embed; }
    const MatF& pos_embed() override { return model_.pos_embed; }
    const VecF& final_norm() override { return model_.final_norm; }
    const MatF& head() override { return model_.head; }
    std::shared_ptr<const LayerWeights> layer(int l) override;

private:
    const TinyModel& model_;
};

// Causal forward pass; logits [T x V]. Position t depends only on tokens
// 0..t, bit-exactly: trailing context never perturbs earlier rows.
MatF forward(WeightSource& src, std::span<const int32_t> tokens,
             const LoraAdapter* adapter = nullptr);
MatF forward(const TinyModel& model, std::span<const int32_t> tokens,
             const LoraAdapter* adapter = nullptr);

struct NllResult {
    std::vector<double> bits; // -log2 p(true token), one per predicted event
    double mean_bits = 0.0;   // H(S)
    double perplexity = 1.0;  // 2^H
    uint64_t events = 0;      // K
};

// Scores every event after <s> through </s>, the same K convention as the
// n-gram scorer.
NllResult neural_nll(WeightSource& src, const TokenSequence& seq,
                     const LoraAdapter* adapter = nullptr);
NllResult neural_nll(const TinyModel& model, const TokenSequence& seq,
                     const LoraAdapter* adapter = nullptr);

struct Gradients {
    // vectors appear as [d x 1]; adapter params as "<target>.lora_a"/".lora_b"
    std::map<std::string, MatD> tensors;
    double loss_nats = 0.0;

    double loss_bits() const;
};

// Exact reverse-mode gradients of the mean cross-entropy loss with respect to
// the named tensors; names absent from `trainable` get no gradient buffer.
Gradients backward(const TinyModel& model, const TokenSequence& seq,
                   const std::set<std::string>& trainable,
                   const LoraAdapter* adapter = nullptr);

enum class Optimizer { sgd, adam };

struct TrainOptions {
    int steps = 100;
    double lr = 1e-2;
    Optimizer optimizer = Optimizer::adam;
    int batch_size = 1;
    uint64_t seed = 0;
};

// Full-model pre-training (every base tensor trainable). Returns the per-step
// batch loss in bits. Throws ErrorKind::numeric naming the step on NaN loss.
std::vector<double> train_model(TinyModel& model, const std::vector<TokenSequence>& data,
                                const TrainOptions& opts);

} // namespace tlm
