#pragma once

#include "binio.hpp"
#include "tensor.hpp"

// EVF volume files: a fixed little-endian container for f32 tensors of rank
// 2-5 ("EVF1" magic, u8 rank, u32 extents, u8 dtype code, raw row-major
// payload). A 2x3 tensor is exactly 4+1+8+1+24 = 38 bytes. Writes are atomic
// (temp file + rename), and write -> read -> write reproduces the bytes.
namespace esegeta {

inline constexpr int kEvfMinRank = 2;
inline constexpr int kEvfMaxRank = 5;
// defensive cap on the decoded payload; desk-scale volumes sit far below it
inline constexpr uint64_t kEvfMaxElements = 1ull << 32;

inline std::string encode_evf(const Tensor& t) {
    if (t.ndim() < kEvfMinRank || t.ndim() > kEvfMaxRank)
        throw std::invalid_argument("evf: rank must be 2-5, got tensor of shape " +
                                    shape_to_string(t.shape()));
    std::string out;
    out.reserve(6 + 4 * static_cast<size_t>(t.ndim()) + 4 * static_cast<size_t>(t.numel()));
    out += "EVF1";
    detail::put_u8(out, static_cast<uint8_t>(t.ndim()));
    for (int d : t.shape()) detail::put_u32le(out, static_cast<uint32_t>(d));
    detail::put_u8(out, 0);  // dtype 0 = f32 little-endian
    for (float v : t.values()) detail::put_f32le(out, v);
    return out;
}

inline Tensor decode_evf(const std::string& bytes) {
    detail::ByteReader r(bytes, "evf");
    const std::string magic = r.raw(4);
    if (magic != "EVF1") {
        if (magic.rfind("EVF", 0) == 0)
            throw std::runtime_error("evf: unsupported version '" + magic + "'");
        throw std::runtime_error("evf: bad magic");
    }
    const int ndim = r.u8();
    if (ndim < kEvfMinRank || ndim > kEvfMaxRank)
        throw std::runtime_error("evf: rank " + std::to_string(ndim) + " outside 2-5");
    std::vector<int> shape(static_cast<size_t>(ndim));
    uint64_t numel = 1;
    for (auto& d : shape) {
        const uint32_t ext = r.u32le();
        if (ext == 0) throw std::runtime_error("evf: zero extent in header");
        numel *= ext;
        if (numel > kEvfMaxElements) throw std::runtime_error("evf: dims overflow");
        d = static_cast<int>(ext);
    }
    const int dtype = r.u8();
    if (dtype != 0) throw std::runtime_error("evf: unsupported dtype code " + std::to_string(dtype));
    std::vector<float> values(numel);
    for (auto& v : values) v = r.f32le();
    r.expect_end();
    return Tensor(std::move(shape), std::move(values));
}

inline void write_evf(const Tensor& t, const std::filesystem::path& path) {
    detail::write_file_atomic(path, encode_evf(t));
}

inline Tensor read_evf(const std::filesystem::path& path) {
    return decode_evf(detail::read_file(path));
}

// Extracts one plane of a rank-3 volume as a fresh rank-2 tensor; the two
// surviving axes keep their original order.
inline Tensor slice_3d(const Tensor& volume, int axis, int index) {
    if (volume.ndim() != 3)
        throw std::invalid_argument("slice_3d: expected a rank-3 volume, got " +
                                    shape_to_string(volume.shape()));
    if (axis < 0 || axis > 2)
        throw std::invalid_argument("slice_3d: axis " + std::to_string(axis) + " outside 0-2");
    const auto& s = volume.shape();
    if (index < 0 || index >= s[static_cast<size_t>(axis)])
        throw std::invalid_argument("slice_3d: index " + std::to_string(index) +
                                    " outside extent " + std::to_string(s[static_cast<size_t>(axis)]));

    std::vector<int> out_shape;
    for (int d = 0; d < 3; ++d)
        if (d != axis) out_shape.push_back(s[static_cast<size_t>(d)]);
    std::vector<float> out(static_cast<size_t>(out_shape[0]) * static_cast<size_t>(out_shape[1]));

    const int64_t s1 = s[1], s2 = s[2];
    size_t o = 0;
    for (int i = 0; i < out_shape[0]; ++i)
        for (int j = 0; j < out_shape[1]; ++j) {
            int64_t c0, c1, c2;
            if (axis == 0) {
                c0 = index, c1 = i, c2 = j;
            } else if (axis == 1) {
                c0 = i, c1 = index, c2 = j;
            } else {
                c0 = i, c1 = j, c2 = index;
            }
            out[o++] = volume.values()[(c0 * s1 + c1) * s2 + c2];
        }
    return Tensor(std::move(out_shape), std::move(out));
}

}  // namespace esegeta
