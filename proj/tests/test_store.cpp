#include "tlm/store.hpp"

#include "tlm/common.hpp"
#include "tlm/lora.hpp"
#include "tlm/model.hpp"
#include "tlm/quant.hpp"

#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

using namespace tlm;
using namespace tlm::store;

namespace {

const ModelConfig kCfg{16, 8, 2, 2, 16, 8, 123};

std::filesystem::path tmp(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("tlm_store_" + name);
}

std::vector<uint8_t> slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::vector<uint8_t>& bytes) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

PackedFile sample_file(uint64_t seed) {
    SplitMix64 rng(seed);
    GaussianRng g(rng.next());
    PackedFile f;
    f.meta.emplace("general.kind", MetaValue::of(std::string("base")));
    f.meta.emplace("note", MetaValue::of(std::string("fixture, with \"quotes\"")));
    f.meta.emplace("count", MetaValue::of(uint64_t{42}));
    f.meta.emplace("scale", MetaValue::of(1.5f));

    StoredTensor a;
    a.name = "alpha";
    a.dtype = Dtype::f32;
    a.shape = {3, 5};
    for (int i = 0; i < 15; ++i) a.f32.push_back(static_cast<float>(g.next()));
    f.tensors.push_back(a);

    std::vector<float> raw(70);
    for (auto& v : raw) v = static_cast<float>(g.next());
    StoredTensor b;
    b.name = "beta";
    b.dtype = Dtype::q4s;
    b.shape = {70};
    b.quant = quantize(raw, {70}, QuantScheme::q4s);
    f.tensors.push_back(b);

    StoredTensor c;
    c.name = "gamma";
    c.dtype = Dtype::q6s;
    c.shape = {2, 33};
    std::vector<float> raw2(66);
    for (auto& v : raw2) v = static_cast<float>(g.next());
    c.quant = quantize(raw2, {2, 33}, QuantScheme::q6s);
    f.tensors.push_back(c);
    return f;
}

} // namespace

TEST_CASE("pack/unpack roundtrip is bit-identical for every dtype") {
    PackedFile f = sample_file(1);
    const auto path = tmp("roundtrip.tlmf");
    const uint32_t crc = pack(f, path);
    const PackedFile g = unpack(path);
    CHECK(g.crc == crc);
    CHECK(g.version == 1);
    CHECK(g.meta.at("note").s == "fixture, with \"quotes\"");
    CHECK(g.meta.at("count").u == 42);
    CHECK(g.meta.at("scale").f == 1.5f);
    REQUIRE(g.tensors.size() == 3);
    CHECK(g.tensors[0].f32 == f.tensors[0].f32);
    CHECK(g.tensors[1].quant.scales == f.tensors[1].quant.scales);
    CHECK(g.tensors[1].quant.codes == f.tensors[1].quant.codes);
    CHECK(g.tensors[2].quant.scales == f.tensors[2].quant.scales);
    CHECK(g.tensors[2].quant.codes == f.tensors[2].quant.codes);
    CHECK(g.tensors[2].shape == std::vector<uint64_t>{2, 33});

    // repacking the parsed file reproduces the bytes exactly
    const auto path2 = tmp("roundtrip2.tlmf");
    PackedFile g2 = g;
    pack(g2, path2);
    CHECK(slurp(path) == slurp(path2));
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("an empty tensor list is a valid minimal file") {
    PackedFile f;
    f.meta.emplace("general.kind", MetaValue::of(std::string("base")));
    const auto path = tmp("minimal.tlmf");
    pack(f, path);
    const PackedFile g = unpack(path);
    CHECK(g.tensors.empty());
    CHECK(g.meta.size() == 1);
    std::filesystem::remove(path);
}

TEST_CASE("duplicate tensor names are rejected at pack time") {
    PackedFile f;
    StoredTensor t;
    t.name = "dup";
    t.dtype = Dtype::f32;
    t.shape = {1};
    t.f32 = {1.0f};
    f.tensors.push_back(t);
    f.tensors.push_back(t);
    CHECK_THROWS_AS(pack(f, tmp("dup.tlmf")), Error);
}

TEST_CASE("each malformed-file class yields its specific error") {
    PackedFile f = sample_file(2);
    const auto path = tmp("malformed.tlmf");
    pack(f, path);
    const std::vector<uint8_t> good = slurp(path);

    auto code_of = [&](const std::vector<uint8_t>& bytes) -> StoreError::Code {
        spit(path, bytes);
        try {
            unpack(path);
        } catch (const StoreError& e) {
            return e.code();
        }
        throw std::runtime_error("expected a StoreError");
    };

    SUBCASE("bad magic") {
        auto bytes = good;
        bytes[0] = 'X';
        CHECK(code_of(bytes) == StoreError::Code::bad_magic);
    }
    SUBCASE("bad version") {
        auto bytes = good;
        bytes[4] += 1;
        CHECK(code_of(bytes) == StoreError::Code::bad_version);
    }
    SUBCASE("misaligned offset") {
        // the first tensor's offset field sits right before its length field;
        // locate it by scanning for the first 32-aligned payload offset value
        auto bytes = good;
        const PackedFile parsed = unpack(path);
        // find "alpha" name in the index and step to its offset field
        const std::string needle = "alpha";
        size_t at = 0;
        for (size_t i = 0; i + needle.size() <= bytes.size(); ++i) {
            if (std::memcmp(bytes.data() + i, needle.data(), needle.size()) == 0) {
                at = i;
                break;
            }
        }
        REQUIRE(at != 0);
        // layout after the name: dtype u8, ndims u8, dims (2 x u64), offset u64
        const size_t offset_pos = at + needle.size() + 1 + 1 + 16;
        bytes[offset_pos] += 1; // offset no longer 32-byte aligned
        CHECK(code_of(bytes) == StoreError::Code::misaligned);
    }
    SUBCASE("length mismatch via truncation") {
        auto bytes = good;
        bytes.resize(bytes.size() - 24);
        CHECK(code_of(bytes) == StoreError::Code::length_mismatch);
    }
    SUBCASE("length mismatch via tiny file") {
        CHECK(code_of({'T', 'L'}) == StoreError::Code::length_mismatch);
    }
    SUBCASE("bad checksum from one flipped payload byte") {
        auto bytes = good;
        bytes[bytes.size() - 10] ^= 0x01; // inside the last payload
        CHECK(code_of(bytes) == StoreError::Code::bad_checksum);
    }
    std::filesystem::remove(path);
}

TEST_CASE("model pack/unpack preserves bytes and digest") {
    const TinyModel m = init_model(kCfg);
    const auto path = tmp("model.tlmf");
    pack_model(m, "base", Dtype::f32, path);

    const PackedFile f = unpack(path);
    CHECK(f.meta.at("general.kind").s == "base");
    const TinyModel back = model_from_packed(f);
    CHECK(back.base_digest == m.base_digest);
    CHECK(back.config.vocab_size == kCfg.vocab_size);
    CHECK(back.config.seed == kCfg.seed);

    const std::vector<int32_t> tokens = {0, 3, 4, 1};
    const MatF l1 = forward(m, tokens);
    const MatF l2 = forward(back, tokens);
    CHECK((l1 - l2).cwiseAbs().maxCoeff() == 0.0f);
    std::filesystem::remove(path);
}

TEST_CASE("quantized model files dequantize deterministically") {
    const TinyModel m = init_model(kCfg);
    const auto path = tmp("model_q.tlmf");
    for (auto d : {Dtype::q4s, Dtype::q6s}) {
        pack_model(m, "base", d, path);
        const PackedFile f = unpack(path);
        // matrices carry the quantized dtype, gains stay f32
        for (const auto& t : f.tensors) {
            if (t.shape.size() == 2) CHECK(t.dtype == d);
            else CHECK(t.dtype == Dtype::f32);
        }
        const TinyModel a = model_from_packed(f);
        const TinyModel b = model_from_packed(unpack(path));
        CHECK(a.base_digest == b.base_digest);
        // quantization moved the weights
        CHECK(a.base_digest != m.base_digest);
    }
    std::filesystem::remove(path);
}

TEST_CASE("adapter pack/unpack roundtrip") {
    const TinyModel m = init_model(kCfg);
    LoraAdapter ad = init_adapter(m, {"blk.0.attn_q", "blk.1.ffn_down"}, 3, 6.0f, 9);
    GaussianRng g(4);
    for (auto& e : ad.entries) {
        for (Eigen::Index i = 0; i < e.b.size(); ++i) {
            e.b.data()[i] = static_cast<float>(0.02 * g.next());
        }
    }
    const auto path = tmp("adapter.tlmf");
    pack_adapter(ad, kCfg, m.base_digest, path);

    const PackedFile f = unpack(path);
    CHECK(f.meta.at("general.kind").s == "adapter");
    CHECK(f.meta.at("general.base_digest").s == m.base_digest);
    const LoraAdapter back = adapter_from_packed(f);
    CHECK(back.rank == 3);
    CHECK(back.alpha == 6.0f);
    REQUIRE(back.entries.size() == 2);
    CHECK(back.entries[0].target == "blk.0.attn_q");
    CHECK(back.entries[0].a == ad.entries[0].a);
    CHECK(back.entries[0].b == ad.entries[0].b);
    CHECK(back.entries[1].a == ad.entries[1].a);
    CHECK(adapter_digest(back) == adapter_digest(ad));

    // a model file is not an adapter
    const auto mpath = tmp("notadapter.tlmf");
    pack_model(m, "base", Dtype::f32, mpath);
    CHECK_THROWS_AS(adapter_from_packed(unpack(mpath)), Error);
    std::filesystem::remove(path);
    std::filesystem::remove(mpath);
}

TEST_CASE("layered loading: residency budget and bit-identical outputs") {
    const TinyModel m = init_model(kCfg);
    const auto path = tmp("layered.tlmf");
    pack_model(m, "base", Dtype::f32, path);

    const std::vector<int32_t> tokens = {0, 5, 9, 3, 1};
    const MatF reference = forward(m, tokens);

    CHECK_THROWS_AS(LayeredHandle(path, -1), Error);
    CHECK_THROWS_AS(LayeredHandle(path, kCfg.n_layers + 1), Error);

    uint64_t peak_full = 0, peak_none = 0;
    for (int budget : {0, 1, kCfg.n_layers}) {
        LayeredHandle h(path, budget);
        const MatF out = forward(h, tokens);
        CHECK((out - reference).cwiseAbs().maxCoeff() == 0.0f);

        const LayeredStats st = h.stats();
        const uint64_t expected_layers = static_cast<uint64_t>(kCfg.n_layers - budget);
        CHECK(st.on_demand_fetches == expected_layers * 8);
        if (budget == 0) {
            peak_none = st.peak_resident_bytes;
            CHECK(st.tensor_loads.at("blk.0.attn_q") == 1);
            CHECK(st.tensor_loads.at("blk.1.ffn_up") == 1);
        }
        if (budget == kCfg.n_layers) {
            peak_full = st.peak_resident_bytes;
            CHECK(st.on_demand_fetches == 0);
            CHECK(st.tensor_loads.empty());
        }

        // a second forward fetches again at partial residency
        forward(h, tokens);
        CHECK(h.stats().on_demand_fetches == 2 * expected_layers * 8);
    }
    CHECK(peak_none < peak_full);

    // layered handles work on quantized files too, matching their dequantized model
    pack_model(m, "base", Dtype::q6s, path);
    const TinyModel q6 = model_from_packed(unpack(path));
    LayeredHandle h(path, 0);
    const MatF qout = forward(h, tokens);
    CHECK((qout - forward(q6, tokens)).cwiseAbs().maxCoeff() == 0.0f);
    std::filesystem::remove(path);
}
