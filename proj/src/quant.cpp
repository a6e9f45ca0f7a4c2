#include "tlm/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace tlm {

int qmax(QuantScheme scheme) { return scheme == QuantScheme::q4s ? 7 : 31; }

size_t packed_bytes_per_block(QuantScheme s) {
    return s == QuantScheme::q4s ? 16 : 24; // 32*4/8, 32*6/8
}

const char* scheme_name(QuantScheme s) { return s == QuantScheme::q4s ? "q4s" : "q6s"; }

QuantScheme scheme_from_name(const std::string& name) {
    if (name == "q4s") return QuantScheme::q4s;
    if (name == "q6s") return QuantScheme::q6s;
    throw Error(ErrorKind::validation, "unknown quantization scheme '" + name + "'");
}

namespace {

// nearest-float scale for a block max m, snapped so that
// quantize(dequantize(.)) reproduces the scale bit-exactly: among the
// neighbors of fl(m/qmax), prefer the one whose f32 reconstruction qm*s
// lands closest to m (ties toward the smaller scale), applied twice to
// reach the fixpoint of the dequantize->requantize map.
float snap_scale(float m, int qm) {
    auto sigma = [qm](float mx) {
        const float s0 = static_cast<float>(static_cast<double>(mx) / qm);
        const float cand[3] = {std::nextafterf(s0, 0.0f), s0,
                               std::nextafterf(s0, std::numeric_limits<float>::max())};
        float best = cand[0];
        float best_err = std::fabs(static_cast<float>(qm) * cand[0] - mx);
        for (int i = 1; i < 3; ++i) {
            const float err = std::fabs(static_cast<float>(qm) * cand[i] - mx);
            if (err < best_err || (err == best_err && cand[i] < best)) {
                best = cand[i];
                best_err = err;
            }
        }
        return best;
    };
    const float s = sigma(m);
    return sigma(static_cast<float>(qm) * s);
}

inline int8_t quantize_one(float x, float scale, int qm) {
    if (scale == 0.0f) return 0;
    // round half away from zero, in double, against the stored f32 scale
    const double q = std::round(static_cast<double>(x) / static_cast<double>(scale));
    const double lim = static_cast<double>(qm);
    return static_cast<int8_t>(std::clamp(q, -lim, lim));
}

} // namespace

std::vector<uint8_t> pack_codes(std::span<const int8_t> codes, QuantScheme s) {
    const uint64_t blocks = (codes.size() + kQuantBlock - 1) / kQuantBlock;
    const size_t padded = blocks * kQuantBlock;
    std::vector<uint8_t> out(blocks * packed_bytes_per_block(s), 0);
    // the tail of a partial block packs as code 0 (zero values)
    auto code_at = [&](size_t i) -> int8_t { return i < codes.size() ? codes[i] : 0; };
    if (s == QuantScheme::q4s) {
        for (size_t i = 0; i < padded; ++i) {
            const auto u = static_cast<uint8_t>(code_at(i) + 7); // 0..14
            if (i % 2 == 0) {
                out[i / 2] |= u; // low nibble first
            } else {
                out[i / 2] |= static_cast<uint8_t>(u << 4);
            }
        }
    } else {
        for (size_t i = 0; i < padded; ++i) {
            const auto u = static_cast<uint32_t>(code_at(i) + 31); // 0..62
            const size_t bit = i * 6;
            for (int b = 0; b < 6; ++b) {
                if (u & (1u << b)) {
                    out[(bit + b) / 8] |= static_cast<uint8_t>(1u << ((bit + b) % 8));
                }
            }
        }
    }
    return out;
}

std::vector<int8_t> unpack_codes(std::span<const uint8_t> bytes, uint64_t n_codes, QuantScheme s) {
    std::vector<int8_t> out(n_codes, 0);
    if (s == QuantScheme::q4s) {
        for (uint64_t i = 0; i < n_codes; ++i) {
            const uint8_t byte = bytes[i / 2];
            const uint8_t u = (i % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
            out[i] = static_cast<int8_t>(static_cast<int>(u) - 7);
        }
    } else {
        for (uint64_t i = 0; i < n_codes; ++i) {
            const size_t bit = i * 6;
            uint32_t u = 0;
            for (int b = 0; b < 6; ++b) {
                if (bytes[(bit + b) / 8] & (1u << ((bit + b) % 8))) u |= 1u << b;
            }
            out[i] = static_cast<int8_t>(static_cast<int>(u) - 31);
        }
    }
    return out;
}

QuantTensor quantize(std::span<const float> data, std::vector<uint64_t> shape, QuantScheme s) {
    uint64_t n = shape.empty() ? 0 : 1;
    for (uint64_t d : shape) n *= d;
    if (n != data.size()) {
        throw Error(ErrorKind::validation, "quantize: shape does not match element count");
    }
    for (float x : data) {
        if (!std::isfinite(x)) {
            throw Error(ErrorKind::validation, "quantize: input contains NaN or Inf");
        }
    }

    QuantTensor q;
    q.scheme = s;
    q.shape = std::move(shape);
    const int qm = qmax(s);
    const uint64_t blocks = q.blocks();
    q.scales.resize(blocks, 0.0f);

    std::vector<int8_t> codes(blocks * kQuantBlock, 0);
    for (uint64_t blk = 0; blk < blocks; ++blk) {
        const uint64_t begin = blk * kQuantBlock;
        const uint64_t end = std::min<uint64_t>(begin + kQuantBlock, n);
        float max_abs = 0.0f;
        for (uint64_t i = begin; i < end; ++i) {
            max_abs = std::max(max_abs, std::fabs(data[i]));
        }
        if (max_abs == 0.0f) continue; // scale 0, codes 0
        const float scale = snap_scale(max_abs, qm);
        q.scales[blk] = scale;
        for (uint64_t i = begin; i < end; ++i) {
            codes[i] = quantize_one(data[i], scale, qm);
        }
    }
    q.codes = pack_codes(std::span<const int8_t>(codes.data(), codes.size()), s);
    return q;
}

QuantTensor quantize(const MatF& m, QuantScheme s) {
    return quantize(std::span<const float>(m.data(), static_cast<size_t>(m.size())),
                    {static_cast<uint64_t>(m.rows()), static_cast<uint64_t>(m.cols())}, s);
}

std::vector<float> dequantize(const QuantTensor& q) {
    const uint64_t n = q.elements();
    const uint64_t blocks = q.blocks();
    if (q.scales.size() != blocks || q.codes.size() != blocks * packed_bytes_per_block(q.scheme)) {
        throw Error(ErrorKind::validation, "dequantize: inconsistent QuantTensor");
    }
    const std::vector<int8_t> codes =
        unpack_codes(std::span<const uint8_t>(q.codes.data(), q.codes.size()),
                     blocks * kQuantBlock, q.scheme);
    std::vector<float> out(n);
    for (uint64_t i = 0; i < n; ++i) {
        out[i] = static_cast<float>(codes[i]) * q.scales[i / kQuantBlock];
    }
    return out;
}

MatF dequantize_matrix(const QuantTensor& q) {
    if (q.shape.size() != 2) {
        throw Error(ErrorKind::validation, "dequantize_matrix: tensor is not 2-d");
    }
    const std::vector<float> flat = dequantize(q);
    MatF m(static_cast<Eigen::Index>(q.shape[0]), static_cast<Eigen::Index>(q.shape[1]));
    std::copy(flat.begin(), flat.end(), m.data());
    return m;
}

QuantErrorStats quant_error(std::span<const float> data, QuantScheme s) {
    QuantTensor q = quantize(data, {static_cast<uint64_t>(data.size())}, s);
    const std::vector<float> back = dequantize(q);
    QuantErrorStats st;
    st.per_block_max.resize(q.blocks(), 0.0);
    double sq = 0.0;
    for (size_t i = 0; i < data.size(); ++i) {
        const double err = std::fabs(static_cast<double>(data[i]) - back[i]);
        st.max_abs = std::max(st.max_abs, err);
        auto& bm = st.per_block_max[i / kQuantBlock];
        bm = std::max(bm, err);
        sq += err * err;
    }
    st.rmse = data.empty() ? 0.0 : std::sqrt(sq / static_cast<double>(data.size()));
    return st;
}

} // namespace tlm
