#include "tlm/lora.hpp"

#include "tlm/common.hpp"
#include "tlm/model.hpp"
#include "tlm/quant.hpp"

#include <doctest.h>

#include <cmath>

using namespace tlm;

namespace {

const ModelConfig kCfg{8, 16, 2, 2, 32, 12, 42};

TokenSequence boundary_seq(std::vector<int32_t> words) {
    TokenSequence s;
    s.has_boundaries = true;
    s.ids.push_back(Vocabulary::bos_id);
    for (int32_t w : words) s.ids.push_back(w);
    s.ids.push_back(Vocabulary::eos_id);
    return s;
}

// generic position: B moved off zero so gradients flow through both factors
LoraAdapter randomized_adapter(const TinyModel& model, const std::vector<std::string>& targets,
                               int32_t rank, float alpha, uint64_t seed) {
    LoraAdapter ad = init_adapter(model, targets, rank, alpha, seed);
    GaussianRng rng(seed ^ 0xabcdef);
    for (auto& e : ad.entries) {
        for (Eigen::Index i = 0; i < e.b.size(); ++i) {
            e.b.data()[i] = static_cast<float>(0.02 * rng.next());
        }
    }
    return ad;
}

// worst per-row deviation relative to the row scale (per-element ratios are
// unbounded at logit zero crossings under f32 merge rounding)
double max_rel_diff(const MatF& a, const MatF& b) {
    double worst = 0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        const double scale = std::max({static_cast<double>(a.row(i).cwiseAbs().maxCoeff()),
                                       static_cast<double>(b.row(i).cwiseAbs().maxCoeff()), 1e-6});
        worst = std::max(
            worst, static_cast<double>((a.row(i) - b.row(i)).cwiseAbs().maxCoeff()) / scale);
    }
    return worst;
}

} // namespace

TEST_CASE("fresh adapters leave the model function unchanged") {
    const TinyModel m = init_model(kCfg);
    const LoraAdapter ad = init_adapter(m, {}, 4, 8.0f, 7);
    // default targets: q and v of both layers
    CHECK(ad.entries.size() == 4);
    for (const auto& e : ad.entries) {
        CHECK(e.b.cwiseAbs().maxCoeff() == 0.0f);
    }
    const std::vector<int32_t> tokens = {0, 3, 4, 5, 1};
    const MatF base = forward(m, tokens);
    const MatF adapted = forward(m, tokens, &ad);
    CHECK((adapted - base).cwiseAbs().maxCoeff() <= 1e-7f);
}

TEST_CASE("adapter shapes follow the rank rule") {
    const TinyModel m = init_model(kCfg);
    const LoraAdapter ad = init_adapter(m, {"blk.0.attn_q", "blk.1.ffn_up", "output"}, 3, 6.0f, 1);
    CHECK(ad.entries[0].a.rows() == 3);
    CHECK(ad.entries[0].a.cols() == kCfg.d_model);
    CHECK(ad.entries[0].b.rows() == kCfg.d_model);
    CHECK(ad.entries[0].b.cols() == 3);
    CHECK(ad.entries[1].a.cols() == kCfg.d_model);
    CHECK(ad.entries[1].b.rows() == kCfg.d_ff);
    CHECK(ad.entries[2].b.rows() == kCfg.vocab_size);
    CHECK(ad.scaling() == doctest::Approx(2.0));
}

TEST_CASE("adapter init is deterministic and validates targets") {
    const TinyModel m = init_model(kCfg);
    const LoraAdapter a = init_adapter(m, {"blk.0.attn_q"}, 2, 4.0f, 5);
    const LoraAdapter b = init_adapter(m, {"blk.0.attn_q"}, 2, 4.0f, 5);
    CHECK(a.entries[0].a == b.entries[0].a);

    CHECK_THROWS_AS(init_adapter(m, {"blk.0.norm_attn"}, 2, 4.0f, 5), Error);
    CHECK_THROWS_AS(init_adapter(m, {"token_embd"}, 2, 4.0f, 5), Error);
    CHECK_THROWS_AS(init_adapter(m, {"blk.7.attn_q"}, 2, 4.0f, 5), Error);
    CHECK_THROWS_AS(init_adapter(m, {}, 0, 4.0f, 5), Error);
    CHECK_THROWS_AS(init_adapter(m, {}, 2, 0.0f, 5), Error);
    try {
        init_adapter(m, {"bogus"}, 2, 4.0f, 5);
        CHECK(false);
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("blk.0.attn_q") != std::string::npos);
    }
}

TEST_CASE("apply: hand-computed low-rank path") {
    // W = I2, A = [[1,2]], B = [[1],[0]], alpha=2 r=1, x=(1,1) -> y=(7,1)
    MatF w(2, 2);
    w << 1, 0, 0, 1;
    LoraEntry e;
    e.target = "test";
    e.a = MatF(1, 2);
    e.a << 1, 2;
    e.b = MatF(2, 1);
    e.b << 1, 0;
    VecF x(2);
    x << 1, 1;

    const VecF y = lora_apply(w, e, 2.0, x);
    CHECK(y(0) == doctest::Approx(7.0));
    CHECK(y(1) == doctest::Approx(1.0));

    // zero scale and zero B both reduce to W x
    const VecF y0 = lora_apply(w, e, 0.0, x);
    CHECK(y0(0) == doctest::Approx(1.0));
    CHECK(y0(1) == doctest::Approx(1.0));
    e.b.setZero();
    const VecF yb = lora_apply(w, e, 2.0, x);
    CHECK(yb(0) == doctest::Approx(1.0));

    VecF bad(3);
    bad.setZero();
    CHECK_THROWS_AS(lora_apply(w, e, 2.0, bad), Error);
}

TEST_CASE("apply over a quantized base dequantizes on the fly") {
    SplitMix64 rng(3);
    MatF w(4, 4);
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        w.data()[i] = static_cast<float>(rng.uniform() - 0.5);
    }
    LoraEntry e;
    e.target = "test";
    e.a = MatF::Ones(1, 4);
    e.b = MatF::Ones(4, 1);
    VecF x(4);
    x << 0.5f, -0.25f, 1.0f, 0.0f;

    const QuantTensor wq = quantize(w, QuantScheme::q6s);
    const VecF direct = lora_apply(dequantize_matrix(wq), e, 0.5, x);
    const VecF fly = lora_apply(wq, e, 0.5, x);
    CHECK((direct - fly).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("merge: hand-computed delta") {
    // W' = W + (alpha/r) B A = I + [[2,4],[0,0]] = [[3,4],[0,1]]
    // exercised through a d_model=2 model so merge targets a real tensor
    ModelConfig cfg{4, 2, 1, 1, 4, 4, 11};
    TinyModel m = init_model(cfg);
    ParamRef wq = named_param(m, "blk.0.attn_q");
    wq.data[0] = 1;
    wq.data[1] = 0;
    wq.data[2] = 0;
    wq.data[3] = 1;
    m.base_digest = compute_digest(m);

    LoraAdapter ad;
    ad.rank = 1;
    ad.alpha = 2.0f;
    LoraEntry e;
    e.target = "blk.0.attn_q";
    e.a = MatF(1, 2);
    e.a << 1, 2;
    e.b = MatF(2, 1);
    e.b << 1, 0;
    ad.entries.push_back(e);

    const TinyModel merged = merge(m, ad);
    const ParamRef wq2 = named_param(const_cast<TinyModel&>(merged), "blk.0.attn_q");
    CHECK(wq2.data[0] == doctest::Approx(3.0));
    CHECK(wq2.data[1] == doctest::Approx(4.0));
    CHECK(wq2.data[2] == doctest::Approx(0.0));
    CHECK(wq2.data[3] == doctest::Approx(1.0));
    CHECK(merged.base_digest != m.base_digest);
    // the source model is untouched
    CHECK(compute_digest(m) == m.base_digest);
}

TEST_CASE("merging a zero adapter is the identity") {
    const TinyModel m = init_model(kCfg);
    const LoraAdapter zero = init_adapter(m, {}, 4, 8.0f, 3);
    const TinyModel merged = merge(m, zero);
    CHECK(merged.base_digest == m.base_digest);
}

TEST_CASE("two-path equivalence: merged equals runtime adapter") {
    const TinyModel m = init_model(kCfg);
    const LoraAdapter ad = randomized_adapter(
        m, {"blk.0.attn_q", "blk.0.attn_v", "blk.1.ffn_up", "blk.1.ffn_down", "output"}, 4,
        8.0f, 21);
    const TinyModel merged = merge(m, ad);

    SplitMix64 rng(6);
    for (int iter = 0; iter < 25; ++iter) {
        std::vector<int32_t> tokens(1 + rng.below(10));
        for (auto& t : tokens) t = static_cast<int32_t>(rng.below(kCfg.vocab_size));
        const MatF runtime = forward(m, tokens, &ad);
        const MatF folded = forward(merged, tokens);
        CHECK(max_rel_diff(runtime, folded) < 1e-5);
    }
}

TEST_CASE("merge is additive over a zero adapter") {
    const TinyModel m = init_model(kCfg);
    const LoraAdapter zero = init_adapter(m, {}, 2, 4.0f, 1);
    const LoraAdapter ad = randomized_adapter(m, {"blk.0.attn_q", "blk.1.attn_v"}, 2, 4.0f, 2);

    const TinyModel a = merge(merge(m, zero), ad);
    const TinyModel b = merge(m, ad);
    CHECK(a.base_digest == b.base_digest);
}

TEST_CASE("adapter training lowers the loss and freezes the base") {
    const TinyModel m = init_model(kCfg);
    SplitMix64 rng(17);
    std::vector<TokenSequence> data;
    for (int i = 0; i < 50; ++i) {
        std::vector<int32_t> words(3 + rng.below(5));
        for (auto& w : words) w = 3 + static_cast<int32_t>(rng.below(3));
        data.push_back(boundary_seq(words));
    }
    const LoraAdapter fresh = init_adapter(m, {}, 4, 8.0f, 5);

    TrainOptions opts;
    opts.steps = 200;
    opts.lr = 5e-3;
    opts.optimizer = Optimizer::adam;
    opts.batch_size = 4;
    opts.seed = 9;
    const TrainReport rep = train_adapter(m, fresh, data, opts);

    CHECK(rep.loss_bits.size() == 200);
    CHECK(rep.loss_bits.back() < rep.loss_bits.front());
    CHECK(rep.digest_before == rep.digest_after);
    CHECK(rep.digest_after == m.base_digest);

    // the trained adapter actually changed
    CHECK(adapter_digest(rep.adapter) != adapter_digest(fresh));
}

TEST_CASE("zero learning rate leaves the adapter bit-identical") {
    const TinyModel m = init_model(kCfg);
    const LoraAdapter fresh = randomized_adapter(m, {"blk.0.attn_q"}, 2, 4.0f, 8);
    TrainOptions opts;
    opts.steps = 10;
    opts.lr = 0.0;
    opts.optimizer = Optimizer::sgd;
    const TrainReport rep = train_adapter(m, fresh, {boundary_seq({3, 4, 5})}, opts);
    CHECK(adapter_digest(rep.adapter) == adapter_digest(fresh));
    for (size_t i = 1; i < rep.loss_bits.size(); ++i) {
        CHECK(rep.loss_bits[i] == rep.loss_bits[0]);
    }
}

TEST_CASE("grad_check passes on every adapter target kind") {
    const TinyModel m = init_model(kCfg);
    const TokenSequence seq = boundary_seq({3, 4, 5, 6, 7, 3});
    const std::vector<std::string> all_targets = {
        "blk.0.attn_q", "blk.0.attn_k", "blk.0.attn_v", "blk.0.attn_o",
        "blk.0.ffn_up", "blk.0.ffn_down", "output"};
    const LoraAdapter ad = randomized_adapter(m, all_targets, 3, 6.0f, 12);

    for (const auto& target : all_targets) {
        const GradCheckResult r = grad_check(m, ad, seq, 8, 1e-4, 99, target);
        INFO("target ", target, " worst ", r.worst_rel_error, " at ", r.worst_coord);
        CHECK(r.pass);
        CHECK(r.checked == 8);
    }

    const GradCheckResult single = grad_check(m, ad, seq, 1, 1e-4, 5);
    CHECK(single.checked == 1);
    CHECK(single.pass);

    CHECK_THROWS_AS(grad_check(m, ad, seq, 0, 1e-4, 5), Error);
    CHECK_THROWS_AS(grad_check(m, ad, seq, 5, 1e-4, 5, "nonexistent"), Error);
}

TEST_CASE("negative control: corrupted gradients fail the check") {
    const TinyModel m = init_model(kCfg);
    const TokenSequence seq = boundary_seq({3, 4, 5});
    const LoraAdapter ad = randomized_adapter(m, {"blk.0.attn_q"}, 2, 4.0f, 4);

    const auto names = adapter_param_names(ad);
    Gradients grads = backward(m, seq, {names.begin(), names.end()}, &ad);
    grads.tensors.at("blk.0.attn_q.lora_a")(0, 0) += 0.5;

    const std::vector<FdCoord> coords = {{"blk.0.attn_q.lora_a", 0, 0}};
    const GradCheckResult r = fd_compare(m, ad, seq, grads, coords, 1e-4, 1e-4);
    CHECK_FALSE(r.pass);
    CHECK(r.worst_rel_error > 1e-2);
}
