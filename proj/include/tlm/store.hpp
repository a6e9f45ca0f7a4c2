#pragma once

#include "tlm/lora.hpp"
#include "tlm/model.hpp"
#include "tlm/quant.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace tlm::store {

// Single-file container "TLMF": magic, u32 version, metadata KV table,
// tensor index, 32-byte aligned payloads, trailing CRC32 of all preceding
// bytes. Everything little-endian. Quantized payloads store the per-block
// scales directly followed by the packed codes.

enum class Dtype : uint8_t { f32 = 0, q4s = 1, q6s = 2 };

const char* dtype_name(Dtype d);

class StoreError : public Error {
public:
    enum class Code { bad_magic, bad_version, misaligned, length_mismatch, bad_checksum };

    StoreError(Code code, const std::string& msg) : Error(ErrorKind::validation, msg), code_(code) {}
    Code code() const noexcept { return code_; }

private:
    Code code_;
};

struct MetaValue {
    enum class Type : uint8_t { str = 0, u64 = 1, f32 = 2 };
    Type type = Type::str;
    std::string s;
    uint64_t u = 0;
    float f = 0.0f;

    static MetaValue of(std::string v);
    static MetaValue of(uint64_t v);
    static MetaValue of(float v);
};

using MetaTable = std::map<std::string, MetaValue>;

struct StoredTensor {
    std::string name;
    Dtype dtype = Dtype::f32;
    std::vector<uint64_t> shape;
    std::vector<float> f32; // row-major, when dtype == f32
    QuantTensor quant;      // when dtype == q4s/q6s

    uint64_t elements() const;
    uint64_t payload_bytes() const;
};

struct PackedFile {
    uint32_t version = 1;
    MetaTable meta;
    std::vector<StoredTensor> tensors;
    uint32_t crc = 0; // set by pack/unpack
};

// Writes the container; returns the file checksum.
uint32_t pack(PackedFile& file, const std::filesystem::path& path);

// Full validation: magic, version, alignment, lengths, checksum. Each failure
// class throws StoreError with its distinct code.
PackedFile unpack(const std::filesystem::path& path);

std::string inspect(const PackedFile& file);

// --- model / adapter packaging -------------------------------------------

// kind: "base" or "merged". With a quantized dtype the 2-d tensors are
// quantized; norm gains stay f32.
uint32_t pack_model(const TinyModel& model, const std::string& kind, Dtype weights_dtype,
                    const std::filesystem::path& path, MetaTable extra = {});

// Adapter files are always f32 and carry kind=adapter plus rank/alpha/targets.
uint32_t pack_adapter(const LoraAdapter& adapter, const ModelConfig& cfg,
                      const std::string& base_digest, const std::filesystem::path& path,
                      MetaTable extra = {});

ModelConfig config_from_meta(const MetaTable& meta);
TinyModel model_from_packed(const PackedFile& file);
LoraAdapter adapter_from_packed(const PackedFile& file);

// --- layered loading -------------------------------------------------------

struct LayeredStats {
    uint64_t on_demand_fetches = 0; // tensor reads from disk after open
    uint64_t current_resident_bytes = 0;
    uint64_t peak_resident_bytes = 0;
    std::map<std::string, uint64_t> tensor_loads; // on-demand loads per tensor
};

// Emulates n_gpu_layers-style partial residency: layers below the budget are
// materialized eagerly at open; the rest are fetched from the file per use
// and dropped afterwards. All paths yield bit-identical tensor bytes.
class LayeredHandle final : public WeightSource {
public:
    LayeredHandle(const std::filesystem::path& path, int n_offload_layers);

    const ModelConfig& config() const override { return config_; }
    const MatF& tok_embed() override { return globals_.tok_embed; }
    const MatF& pos_embed() override { return globals_.pos_embed; }
    const VecF& final_norm() override { return globals_.final_norm; }
    const MatF& head() override { return globals_.head; }
    std::shared_ptr<const LayerWeights> layer(int l) override;

    LayeredStats stats() const;
    int offload_layers() const { return budget_; }

private:
    struct IndexEntry {
        Dtype dtype = Dtype::f32;
        std::vector<uint64_t> shape;
        uint64_t offset = 0;
        uint64_t length = 0;
    };

    struct Globals {
        MatF tok_embed, pos_embed, head;
        VecF final_norm;
    };

    // shared with layer deleters so eviction accounting survives the handle
    struct Counters {
        mutable std::mutex mu;
        LayeredStats stats;
    };

    std::vector<float> fetch_floats(const std::string& name, bool count_as_fetch);
    MatF fetch_matrix(const std::string& name, bool count);
    VecF fetch_vector(const std::string& name, bool count);

    std::filesystem::path path_;
    ModelConfig config_;
    int budget_ = 0;
    std::map<std::string, IndexEntry> index_;
    Globals globals_;
    std::vector<std::shared_ptr<const LayerWeights>> eager_;
    std::shared_ptr<Counters> counters_;
    std::mutex file_mu_;
    std::ifstream file_;
};

} // namespace tlm::store
