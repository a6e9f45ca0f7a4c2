#include "tlm/store.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace tlm::store {

namespace {

constexpr char kMagic[4] = {'T', 'L', 'M', 'F'};
constexpr uint32_t kVersion = 1;
constexpr uint64_t kAlign = 32;

uint64_t align_up(uint64_t v) { return (v + kAlign - 1) / kAlign * kAlign; }

void put_u32(std::vector<uint8_t>& b, uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<uint8_t>& b, uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<uint8_t>& b, float v) { put_u32(b, std::bit_cast<uint32_t>(v)); }

void put_str(std::vector<uint8_t>& b, const std::string& s) {
    put_u32(b, static_cast<uint32_t>(s.size()));
    b.insert(b.end(), s.begin(), s.end());
}

struct Reader {
    const uint8_t* data;
    size_t size;
    size_t pos = 0;

    void need(size_t n) const {
        if (pos + n > size) {
            throw StoreError(StoreError::Code::length_mismatch, "truncated file");
        }
    }
    uint8_t u8() {
        need(1);
        return data[pos++];
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(data[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str() {
        const uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(data + pos), n);
        pos += n;
        return s;
    }
};

uint32_t crc_of(const uint8_t* data, size_t n) {
    return static_cast<uint32_t>(
        ::crc32(::crc32(0UL, nullptr, 0), data, static_cast<uInt>(n)));
}

std::vector<float> floats_from_le(const uint8_t* p, uint64_t count) {
    std::vector<float> out(count);
    for (uint64_t i = 0; i < count; ++i) {
        uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v |= static_cast<uint32_t>(p[i * 4 + b]) << (8 * b);
        out[i] = std::bit_cast<float>(v);
    }
    return out;
}

uint64_t expected_payload_bytes(Dtype d, const std::vector<uint64_t>& shape) {
    uint64_t n = shape.empty() ? 0 : 1;
    for (uint64_t v : shape) n *= v;
    if (d == Dtype::f32) return n * 4;
    const auto scheme = d == Dtype::q4s ? QuantScheme::q4s : QuantScheme::q6s;
    const uint64_t blocks = (n + kQuantBlock - 1) / kQuantBlock;
    return blocks * 4 + blocks * packed_bytes_per_block(scheme);
}

} // namespace

const char* dtype_name(Dtype d) {
    switch (d) {
        case Dtype::f32: return "f32";
        case Dtype::q4s: return "q4s";
        case Dtype::q6s: return "q6s";
    }
    return "?";
}

MetaValue MetaValue::of(std::string v) {
    MetaValue m;
    m.type = Type::str;
    m.s = std::move(v);
    return m;
}
MetaValue MetaValue::of(uint64_t v) {
    MetaValue m;
    m.type = Type::u64;
    m.u = v;
    return m;
}
MetaValue MetaValue::of(float v) {
    MetaValue m;
    m.type = Type::f32;
    m.f = v;
    return m;
}

uint64_t StoredTensor::elements() const {
    uint64_t n = shape.empty() ? 0 : 1;
    for (uint64_t v : shape) n *= v;
    return n;
}

uint64_t StoredTensor::payload_bytes() const { return expected_payload_bytes(dtype, shape); }

uint32_t pack(PackedFile& file, const std::filesystem::path& path) {
    {
        std::set<std::string> seen;
        for (const auto& t : file.tensors) {
            if (!seen.insert(t.name).second) {
                throw Error(ErrorKind::validation, "pack: duplicate tensor name '" + t.name + "'");
            }
            if (t.dtype == Dtype::f32) {
                if (t.f32.size() != t.elements()) {
                    throw Error(ErrorKind::validation,
                                "pack: tensor '" + t.name + "' data does not match shape");
                }
            } else {
                if (t.quant.elements() != t.elements()) {
                    throw Error(ErrorKind::validation,
                                "pack: tensor '" + t.name + "' codes do not match shape");
                }
            }
        }
    }

    // header + metadata
    std::vector<uint8_t> buf;
    buf.insert(buf.end(), kMagic, kMagic + 4);
    put_u32(buf, file.version);
    put_u32(buf, static_cast<uint32_t>(file.meta.size()));
    for (const auto& [key, value] : file.meta) {
        put_str(buf, key);
        buf.push_back(static_cast<uint8_t>(value.type));
        switch (value.type) {
            case MetaValue::Type::str: put_str(buf, value.s); break;
            case MetaValue::Type::u64: put_u64(buf, value.u); break;
            case MetaValue::Type::f32: put_f32(buf, value.f); break;
        }
    }

    // index size is known up front, so payload offsets can be assigned now
    uint64_t index_bytes = 4;
    for (const auto& t : file.tensors) {
        index_bytes += 4 + t.name.size() + 1 + 1 + 8 * t.shape.size() + 8 + 8;
    }
    uint64_t offset = align_up(buf.size() + index_bytes);

    put_u32(buf, static_cast<uint32_t>(file.tensors.size()));
    std::vector<uint64_t> offsets;
    for (const auto& t : file.tensors) {
        put_str(buf, t.name);
        buf.push_back(static_cast<uint8_t>(t.dtype));
        buf.push_back(static_cast<uint8_t>(t.shape.size()));
        for (uint64_t d : t.shape) put_u64(buf, d);
        put_u64(buf, offset);
        put_u64(buf, t.payload_bytes());
        offsets.push_back(offset);
        offset = align_up(offset + t.payload_bytes());
    }

    // payloads, 32-byte aligned
    for (size_t i = 0; i < file.tensors.size(); ++i) {
        const auto& t = file.tensors[i];
        buf.resize(offsets[i], 0);
        if (t.dtype == Dtype::f32) {
            for (float v : t.f32) put_f32(buf, v);
        } else {
            for (float v : t.quant.scales) put_f32(buf, v);
            buf.insert(buf.end(), t.quant.codes.begin(), t.quant.codes.end());
        }
    }

    const uint32_t crc = crc_of(buf.data(), buf.size());
    put_u32(buf, crc);
    file.crc = crc;

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorKind::io, "cannot write file: " + path.string());
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw Error(ErrorKind::io, "write failed: " + path.string());
    return crc;
}

namespace {

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::io, "cannot open file: " + path.string());
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return buf;
}

} // namespace

PackedFile unpack(const std::filesystem::path& path) {
    const std::vector<uint8_t> buf = read_file(path);
    if (buf.size() < 4) {
        throw StoreError(StoreError::Code::length_mismatch, "file too small for header");
    }
    if (std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw StoreError(StoreError::Code::bad_magic, "bad magic bytes (expected TLMF)");
    }

    Reader r{buf.data(), buf.size(), 4};
    PackedFile file;
    file.version = r.u32();
    if (file.version != kVersion) {
        throw StoreError(StoreError::Code::bad_version,
                         "unsupported format version " + std::to_string(file.version));
    }

    const uint32_t meta_count = r.u32();
    for (uint32_t i = 0; i < meta_count; ++i) {
        std::string key = r.str();
        const auto type = static_cast<MetaValue::Type>(r.u8());
        MetaValue v;
        v.type = type;
        switch (type) {
            case MetaValue::Type::str: v.s = r.str(); break;
            case MetaValue::Type::u64: v.u = r.u64(); break;
            case MetaValue::Type::f32: v.f = r.f32(); break;
            default:
                throw StoreError(StoreError::Code::length_mismatch,
                                 "unknown metadata value type for key '" + key + "'");
        }
        file.meta.emplace(std::move(key), std::move(v));
    }

    struct RawEntry {
        std::string name;
        Dtype dtype;
        std::vector<uint64_t> shape;
        uint64_t offset, length;
    };
    std::vector<RawEntry> entries;
    const uint32_t tensor_count = r.u32();
    for (uint32_t i = 0; i < tensor_count; ++i) {
        RawEntry e;
        e.name = r.str();
        const uint8_t dt = r.u8();
        if (dt > 2) {
            throw StoreError(StoreError::Code::length_mismatch,
                             "unknown dtype for tensor '" + e.name + "'");
        }
        e.dtype = static_cast<Dtype>(dt);
        const uint8_t ndims = r.u8();
        for (uint8_t d = 0; d < ndims; ++d) e.shape.push_back(r.u64());
        e.offset = r.u64();
        e.length = r.u64();
        entries.push_back(std::move(e));
    }

    if (buf.size() < r.pos + 4) {
        throw StoreError(StoreError::Code::length_mismatch, "missing trailing checksum");
    }
    const uint64_t payload_end = buf.size() - 4;

    uint64_t prev_end = r.pos;
    for (const auto& e : entries) {
        if (e.offset % kAlign != 0) {
            throw StoreError(StoreError::Code::misaligned,
                             "tensor '" + e.name + "' payload offset is not 32-byte aligned");
        }
        if (e.offset < prev_end) {
            throw StoreError(StoreError::Code::misaligned,
                             "tensor '" + e.name + "' payload overlaps the preceding bytes");
        }
        const uint64_t expected = expected_payload_bytes(e.dtype, e.shape);
        if (e.length != expected) {
            throw StoreError(StoreError::Code::length_mismatch,
                             "tensor '" + e.name + "' length " + std::to_string(e.length) +
                                 " != dtype*shape " + std::to_string(expected));
        }
        if (e.offset + e.length > payload_end) {
            throw StoreError(StoreError::Code::length_mismatch,
                             "tensor '" + e.name + "' payload extends past end of file");
        }
        prev_end = e.offset + e.length;
    }

    uint32_t stored_crc = 0;
    for (int i = 0; i < 4; ++i) {
        stored_crc |= static_cast<uint32_t>(buf[payload_end + static_cast<uint64_t>(i)]) << (8 * i);
    }
    const uint32_t actual_crc = crc_of(buf.data(), payload_end);
    if (stored_crc != actual_crc) {
        throw StoreError(StoreError::Code::bad_checksum, "checksum mismatch");
    }
    file.crc = stored_crc;

    for (const auto& e : entries) {
        StoredTensor t;
        t.name = e.name;
        t.dtype = e.dtype;
        t.shape = e.shape;
        const uint8_t* p = buf.data() + e.offset;
        if (e.dtype == Dtype::f32) {
            t.f32 = floats_from_le(p, t.elements());
        } else {
            const auto scheme = e.dtype == Dtype::q4s ? QuantScheme::q4s : QuantScheme::q6s;
            t.quant.scheme = scheme;
            t.quant.shape = e.shape;
            const uint64_t blocks = t.quant.blocks();
            t.quant.scales = floats_from_le(p, blocks);
            const uint8_t* codes = p + blocks * 4;
            t.quant.codes.assign(codes, codes + blocks * packed_bytes_per_block(scheme));
        }
        file.tensors.push_back(std::move(t));
    }
    return file;
}

std::string inspect(const PackedFile& file) {
    std::ostringstream os;
    os << "tlmf version " << file.version << ", checksum " << hex_u64(file.crc).substr(8) << "\n";
    os << "metadata (" << file.meta.size() << "):\n";
    for (const auto& [key, v] : file.meta) {
        os << "  " << key << " = ";
        switch (v.type) {
            case MetaValue::Type::str: os << '"' << v.s << '"'; break;
            case MetaValue::Type::u64: os << v.u; break;
            case MetaValue::Type::f32: os << format_g9(v.f); break;
        }
        os << "\n";
    }
    os << "tensors (" << file.tensors.size() << "):\n";
    for (const auto& t : file.tensors) {
        os << "  " << t.name << "  " << dtype_name(t.dtype) << "  [";
        for (size_t i = 0; i < t.shape.size(); ++i) {
            if (i) os << " x ";
            os << t.shape[i];
        }
        os << "]  " << t.payload_bytes() << " bytes\n";
    }
    return os.str();
}

// --- model / adapter packaging ---------------------------------------------

namespace {

MetaTable config_meta(const ModelConfig& cfg) {
    MetaTable m;
    m.emplace("config.vocab_size", MetaValue::of(static_cast<uint64_t>(cfg.vocab_size)));
    m.emplace("config.d_model", MetaValue::of(static_cast<uint64_t>(cfg.d_model)));
    m.emplace("config.n_layers", MetaValue::of(static_cast<uint64_t>(cfg.n_layers)));
    m.emplace("config.n_heads", MetaValue::of(static_cast<uint64_t>(cfg.n_heads)));
    m.emplace("config.d_ff", MetaValue::of(static_cast<uint64_t>(cfg.d_ff)));
    m.emplace("config.max_seq", MetaValue::of(static_cast<uint64_t>(cfg.max_seq)));
    m.emplace("config.seed", MetaValue::of(cfg.seed));
    return m;
}

bool is_matrix(const TensorView& t) { return t.shape.size() == 2; }

} // namespace

uint32_t pack_model(const TinyModel& model, const std::string& kind, Dtype weights_dtype,
                    const std::filesystem::path& path, MetaTable extra) {
    if (kind != "base" && kind != "merged") {
        throw Error(ErrorKind::validation, "pack_model: kind must be base or merged");
    }
    PackedFile file;
    file.meta = config_meta(model.config);
    file.meta.emplace("general.kind", MetaValue::of(std::string(kind)));
    file.meta.emplace("general.base_digest", MetaValue::of(std::string(model.base_digest)));
    for (auto& [k, v] : extra) file.meta.insert_or_assign(k, v);

    for (const auto& tv : tensor_table(model)) {
        StoredTensor t;
        t.name = tv.name;
        t.shape = tv.shape;
        const std::span<const float> data(tv.data, tv.elements());
        if (weights_dtype != Dtype::f32 && is_matrix(tv)) {
            t.dtype = weights_dtype;
            t.quant = quantize(data, tv.shape,
                               weights_dtype == Dtype::q4s ? QuantScheme::q4s : QuantScheme::q6s);
        } else {
            t.dtype = Dtype::f32;
            t.f32.assign(data.begin(), data.end());
        }
        file.tensors.push_back(std::move(t));
    }
    return pack(file, path);
}

uint32_t pack_adapter(const LoraAdapter& adapter, const ModelConfig& cfg,
                      const std::string& base_digest, const std::filesystem::path& path,
                      MetaTable extra) {
    PackedFile file;
    file.meta = config_meta(cfg);
    file.meta.emplace("general.kind", MetaValue::of(std::string("adapter")));
    file.meta.emplace("general.base_digest", MetaValue::of(std::string(base_digest)));
    file.meta.emplace("lora.rank", MetaValue::of(static_cast<uint64_t>(adapter.rank)));
    file.meta.emplace("lora.alpha", MetaValue::of(adapter.alpha));
    std::string targets;
    for (const auto& e : adapter.entries) {
        if (!targets.empty()) targets += ',';
        targets += e.target;
    }
    file.meta.emplace("lora.targets", MetaValue::of(targets));
    for (auto& [k, v] : extra) file.meta.insert_or_assign(k, v);

    for (const auto& e : adapter.entries) {
        StoredTensor a;
        a.name = e.target + ".lora_a";
        a.dtype = Dtype::f32;
        a.shape = {static_cast<uint64_t>(e.a.rows()), static_cast<uint64_t>(e.a.cols())};
        a.f32.assign(e.a.data(), e.a.data() + e.a.size());
        file.tensors.push_back(std::move(a));

        StoredTensor b;
        b.name = e.target + ".lora_b";
        b.dtype = Dtype::f32;
        b.shape = {static_cast<uint64_t>(e.b.rows()), static_cast<uint64_t>(e.b.cols())};
        b.f32.assign(e.b.data(), e.b.data() + e.b.size());
        file.tensors.push_back(std::move(b));
    }
    return pack(file, path);
}

ModelConfig config_from_meta(const MetaTable& meta) {
    auto u = [&](const char* key) -> uint64_t {
        auto it = meta.find(key);
        if (it == meta.end() || it->second.type != MetaValue::Type::u64) {
            throw Error(ErrorKind::validation,
                        std::string("metadata lacks u64 key '") + key + "'");
        }
        return it->second.u;
    };
    ModelConfig cfg;
    cfg.vocab_size = static_cast<int32_t>(u("config.vocab_size"));
    cfg.d_model = static_cast<int32_t>(u("config.d_model"));
    cfg.n_layers = static_cast<int32_t>(u("config.n_layers"));
    cfg.n_heads = static_cast<int32_t>(u("config.n_heads"));
    cfg.d_ff = static_cast<int32_t>(u("config.d_ff"));
    cfg.max_seq = static_cast<int32_t>(u("config.max_seq"));
    cfg.seed = u("config.seed");
    cfg.validate();
    return cfg;
}

namespace {

std::vector<float> materialize(const StoredTensor& t) {
    if (t.dtype == Dtype::f32) return t.f32;
    return dequantize(t.quant);
}

} // namespace

TinyModel model_from_packed(const PackedFile& file) {
    const ModelConfig cfg = config_from_meta(file.meta);
    std::map<std::string, const StoredTensor*> by_name;
    for (const auto& t : file.tensors) by_name[t.name] = &t;

    TinyModel model = init_model(cfg); // right shapes; contents replaced below
    for (const auto& name : tensor_names(cfg)) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw Error(ErrorKind::validation, "packed model lacks tensor '" + name + "'");
        }
        ParamRef ref = named_param(model, name);
        const std::vector<float> data = materialize(*it->second);
        if (data.size() != ref.elements) {
            throw Error(ErrorKind::validation,
                        "packed tensor '" + name + "' has wrong element count");
        }
        std::memcpy(ref.data, data.data(), data.size() * sizeof(float));
    }
    model.base_digest = compute_digest(model);
    return model;
}

LoraAdapter adapter_from_packed(const PackedFile& file) {
    auto kind = file.meta.find("general.kind");
    if (kind == file.meta.end() || kind->second.s != "adapter") {
        throw Error(ErrorKind::validation, "packed file is not an adapter (kind != adapter)");
    }
    auto rank_it = file.meta.find("lora.rank");
    auto alpha_it = file.meta.find("lora.alpha");
    auto targets_it = file.meta.find("lora.targets");
    if (rank_it == file.meta.end() || alpha_it == file.meta.end() ||
        targets_it == file.meta.end()) {
        throw Error(ErrorKind::validation, "adapter file lacks lora.rank/alpha/targets");
    }

    LoraAdapter ad;
    ad.rank = static_cast<int32_t>(rank_it->second.u);
    ad.alpha = alpha_it->second.f;

    std::map<std::string, const StoredTensor*> by_name;
    for (const auto& t : file.tensors) by_name[t.name] = &t;

    std::istringstream ts(targets_it->second.s);
    std::string target;
    while (std::getline(ts, target, ',')) {
        if (target.empty()) continue;
        auto a_it = by_name.find(target + ".lora_a");
        auto b_it = by_name.find(target + ".lora_b");
        if (a_it == by_name.end() || b_it == by_name.end()) {
            throw Error(ErrorKind::validation, "adapter file lacks tensors for '" + target + "'");
        }
        auto to_mat = [](const StoredTensor& t) {
            if (t.shape.size() != 2) {
                throw Error(ErrorKind::validation, "adapter tensor '" + t.name + "' is not 2-d");
            }
            MatF m(static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
            const std::vector<float> data = materialize(t);
            std::memcpy(m.data(), data.data(), data.size() * sizeof(float));
            return m;
        };
        LoraEntry e;
        e.target = target;
        e.a = to_mat(*a_it->second);
        e.b = to_mat(*b_it->second);
        ad.entries.push_back(std::move(e));
    }
    if (ad.entries.empty()) {
        throw Error(ErrorKind::validation, "adapter file has no targets");
    }
    return ad;
}

// --- layered loading ---------------------------------------------------------

LayeredHandle::LayeredHandle(const std::filesystem::path& path, int n_offload_layers)
    : path_(path), counters_(std::make_shared<Counters>()) {
    // full validation up front; the parsed copy also seeds the eager set
    PackedFile file = unpack(path);
    config_ = config_from_meta(file.meta);
    if (n_offload_layers < 0 || n_offload_layers > config_.n_layers) {
        throw Error(ErrorKind::validation,
                    "n_offload_layers must be in [0, " + std::to_string(config_.n_layers) + "]");
    }
    budget_ = n_offload_layers;

    std::map<std::string, const StoredTensor*> by_name;
    for (const auto& t : file.tensors) {
        by_name[t.name] = &t;
        IndexEntry e;
        e.dtype = t.dtype;
        e.shape = t.shape;
        e.length = t.payload_bytes();
        index_.emplace(t.name, std::move(e));
    }
    // unpack does not keep payload offsets, so take them from a second cheap
    // pass over the header
    {
        std::ifstream f(path, std::ios::binary);
        std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
        Reader r{buf.data(), buf.size(), 8};
        const uint32_t meta_count = r.u32();
        for (uint32_t i = 0; i < meta_count; ++i) {
            r.str();
            const auto type = static_cast<MetaValue::Type>(r.u8());
            if (type == MetaValue::Type::str) r.str();
            else if (type == MetaValue::Type::u64) r.u64();
            else r.f32();
        }
        const uint32_t tensor_count = r.u32();
        for (uint32_t i = 0; i < tensor_count; ++i) {
            const std::string name = r.str();
            r.u8();
            const uint8_t ndims = r.u8();
            for (uint8_t d = 0; d < ndims; ++d) r.u64();
            const uint64_t offset = r.u64();
            r.u64();
            index_.at(name).offset = offset;
        }
    }

    auto mat_of = [&](const std::string& name) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw Error(ErrorKind::validation, "packed model lacks tensor '" + name + "'");
        }
        const StoredTensor& t = *it->second;
        if (t.shape.size() != 2) {
            throw Error(ErrorKind::validation, "tensor '" + name + "' is not 2-d");
        }
        MatF m(static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
        const std::vector<float> data = materialize(t);
        std::memcpy(m.data(), data.data(), data.size() * sizeof(float));
        return m;
    };
    auto vec_of = [&](const std::string& name) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw Error(ErrorKind::validation, "packed model lacks tensor '" + name + "'");
        }
        const std::vector<float> data = materialize(*it->second);
        VecF v(static_cast<Eigen::Index>(data.size()));
        std::memcpy(v.data(), data.data(), data.size() * sizeof(float));
        return v;
    };

    globals_.tok_embed = mat_of("token_embd");
    globals_.pos_embed = mat_of("pos_embd");
    globals_.head = mat_of("output");
    globals_.final_norm = vec_of("output_norm");

    uint64_t resident = 4ull * (globals_.tok_embed.size() + globals_.pos_embed.size() +
                                globals_.head.size() + globals_.final_norm.size());

    eager_.resize(static_cast<size_t>(config_.n_layers));
    for (int l = 0; l < budget_; ++l) {
        const std::string p = "blk." + std::to_string(l) + ".";
        auto lw = std::make_shared<LayerWeights>();
        lw->attn_q = mat_of(p + "attn_q");
        lw->attn_k = mat_of(p + "attn_k");
        lw->attn_v = mat_of(p + "attn_v");
        lw->attn_o = mat_of(p + "attn_o");
        lw->ffn_up = mat_of(p + "ffn_up");
        lw->ffn_down = mat_of(p + "ffn_down");
        lw->norm_attn = vec_of(p + "norm_attn");
        lw->norm_ffn = vec_of(p + "norm_ffn");
        resident += 4ull * (lw->attn_q.size() + lw->attn_k.size() + lw->attn_v.size() +
                            lw->attn_o.size() + lw->ffn_up.size() + lw->ffn_down.size() +
                            lw->norm_attn.size() + lw->norm_ffn.size());
        eager_[static_cast<size_t>(l)] = std::move(lw);
    }

    counters_->stats.current_resident_bytes = resident;
    counters_->stats.peak_resident_bytes = resident;

    file_.open(path_, std::ios::binary);
    if (!file_) throw Error(ErrorKind::io, "cannot reopen file: " + path_.string());
}

std::vector<float> LayeredHandle::fetch_floats(const std::string& name, bool count_as_fetch) {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw Error(ErrorKind::validation, "packed model lacks tensor '" + name + "'");
    }
    const IndexEntry& e = it->second;

    std::vector<uint8_t> raw(e.length);
    {
        std::lock_guard<std::mutex> lock(file_mu_);
        file_.clear();
        file_.seekg(static_cast<std::streamoff>(e.offset));
        file_.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(e.length));
        if (!file_) throw Error(ErrorKind::io, "read failed for tensor '" + name + "'");
    }
    if (count_as_fetch) {
        std::lock_guard<std::mutex> lock(counters_->mu);
        ++counters_->stats.on_demand_fetches;
        ++counters_->stats.tensor_loads[name];
    }

    uint64_t elems = e.shape.empty() ? 0 : 1;
    for (uint64_t d : e.shape) elems *= d;

    if (e.dtype == Dtype::f32) {
        return floats_from_le(raw.data(), elems);
    }
    const auto scheme = e.dtype == Dtype::q4s ? QuantScheme::q4s : QuantScheme::q6s;
    QuantTensor q;
    q.scheme = scheme;
    q.shape = e.shape;
    const uint64_t blocks = q.blocks();
    q.scales = floats_from_le(raw.data(), blocks);
    q.codes.assign(raw.begin() + static_cast<long>(blocks * 4), raw.end());
    return dequantize(q);
}

MatF LayeredHandle::fetch_matrix(const std::string& name, bool count) {
    const IndexEntry& e = index_.at(name);
    if (e.shape.size() != 2) {
        throw Error(ErrorKind::validation, "tensor '" + name + "' is not 2-d");
    }
    const std::vector<float> data = fetch_floats(name, count);
    MatF m(static_cast<Eigen::Index>(e.shape[0]), static_cast<Eigen::Index>(e.shape[1]));
    std::memcpy(m.data(), data.data(), data.size() * sizeof(float));
    return m;
}

VecF LayeredHandle::fetch_vector(const std::string& name, bool count) {
    const std::vector<float> data = fetch_floats(name, count);
    VecF v(static_cast<Eigen::Index>(data.size()));
    std::memcpy(v.data(), data.data(), data.size() * sizeof(float));
    return v;
}

std::shared_ptr<const LayerWeights> LayeredHandle::layer(int l) {
    if (l < 0 || l >= config_.n_layers) {
        throw Error(ErrorKind::validation, "layer index out of range");
    }
    if (l < budget_) return eager_[static_cast<size_t>(l)];

    const std::string p = "blk." + std::to_string(l) + ".";
    auto lw = std::make_shared<LayerWeights>();
    lw->attn_q = fetch_matrix(p + "attn_q", true);
    lw->attn_k = fetch_matrix(p + "attn_k", true);
    lw->attn_v = fetch_matrix(p + "attn_v", true);
    lw->attn_o = fetch_matrix(p + "attn_o", true);
    lw->ffn_up = fetch_matrix(p + "ffn_up", true);
    lw->ffn_down = fetch_matrix(p + "ffn_down", true);
    lw->norm_attn = fetch_vector(p + "norm_attn", true);
    lw->norm_ffn = fetch_vector(p + "norm_ffn", true);

    const uint64_t bytes = 4ull * (lw->attn_q.size() + lw->attn_k.size() + lw->attn_v.size() +
                                   lw->attn_o.size() + lw->ffn_up.size() + lw->ffn_down.size() +
                                   lw->norm_attn.size() + lw->norm_ffn.size());
    {
        std::lock_guard<std::mutex> lock(counters_->mu);
        counters_->stats.current_resident_bytes += bytes;
        counters_->stats.peak_resident_bytes = std::max(
            counters_->stats.peak_resident_bytes, counters_->stats.current_resident_bytes);
    }

    // dropping the last reference evicts the layer and returns its bytes
    std::shared_ptr<Counters> counters = counters_;
    return std::shared_ptr<const LayerWeights>(lw.get(), [owned = lw, counters, bytes](const LayerWeights*) {
        std::lock_guard<std::mutex> lock(counters->mu);
        counters->stats.current_resident_bytes -= bytes;
    });
}

LayeredStats LayeredHandle::stats() const {
    std::lock_guard<std::mutex> lock(counters_->mu);
    return counters_->stats;
}

} // namespace tlm::store
