#pragma once

#include "tlm/common.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace tlm {

// Symmetric block quantization over 32-element blocks of the row-major
// element stream. Codes are signed, scales are binary32, packing is bit-exact:
//   q4s: code+7 as u4, two per byte, low nibble first, 16 bytes/block
//   q6s: code+31 as u6, little-endian bitstream, 24 bytes/block
// The final partial block is zero-padded.
enum class QuantScheme : uint8_t { q4s, q6s };

inline constexpr int kQuantBlock = 32;

int qmax(QuantScheme scheme);                 // 7 or 31
size_t packed_bytes_per_block(QuantScheme s); // 16 or 24
const char* scheme_name(QuantScheme s);
QuantScheme scheme_from_name(const std::string& name);

struct QuantTensor {
    QuantScheme scheme = QuantScheme::q4s;
    std::vector<uint64_t> shape;
    std::vector<float> scales;  // one per block
    std::vector<uint8_t> codes; // packed

    uint64_t elements() const {
        uint64_t n = 1;
        for (uint64_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }
    uint64_t blocks() const { return (elements() + kQuantBlock - 1) / kQuantBlock; }
};

// Per block: scale = max|x|/qmax rounded to binary32 (snapped within 1 ulp so
// that requantizing a dequantized tensor is bit-stable), code =
// round-half-away-from-zero(x/scale) clamped; an all-zero block gets scale 0.
QuantTensor quantize(std::span<const float> data, std::vector<uint64_t> shape, QuantScheme s);
QuantTensor quantize(const MatF& m, QuantScheme s);

// element = code * scale
std::vector<float> dequantize(const QuantTensor& q);
MatF dequantize_matrix(const QuantTensor& q); // shape must be 2-d

struct QuantErrorStats {
    double max_abs = 0.0;
    double rmse = 0.0;
    std::vector<double> per_block_max;
};

QuantErrorStats quant_error(std::span<const float> data, QuantScheme s);

// exposed for tests of the bit layout
std::vector<uint8_t> pack_codes(std::span<const int8_t> codes, QuantScheme s);
std::vector<int8_t> unpack_codes(std::span<const uint8_t> bytes, uint64_t n_codes, QuantScheme s);

} // namespace tlm
