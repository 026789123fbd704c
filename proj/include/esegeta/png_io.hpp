#pragma once

#include <algorithm>
#include <array>

#include "binio.hpp"
#include "tensor.hpp"

// Red-overlay PNG export for 2D slices: the base image becomes a min-max
// normalized grayscale, and the attribution magnitude is blended in as red
// with alpha 0.6 * clip(|a| / P, 0, 1), where P is the percentile_clip-th
// percentile of |attr| (nearest rank). The encoder emits 8-bit RGB with
// filter 0 rows inside stored (uncompressed) DEFLATE blocks, so the bytes
// are a pure function of the pixels — no compressor version can change them.
namespace esegeta {

namespace detail {

inline void put_u32be(std::string& out, uint32_t v) {
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint32_t crc32_png(const std::string& bytes) {
    static const std::array<uint32_t, 256> table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t n = 0; n < 256; ++n) {
            uint32_t c = n;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[n] = c;
        }
        return t;
    }();
    uint32_t c = 0xffffffffu;
    for (char ch : bytes) c = table[(c ^ static_cast<uint8_t>(ch)) & 0xffu] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

inline uint32_t adler32(const std::string& bytes) {
    uint32_t a = 1, b = 0;
    for (char ch : bytes) {
        a = (a + static_cast<uint8_t>(ch)) % 65521u;
        b = (b + a) % 65521u;
    }
    return (b << 16) | a;
}

inline void put_png_chunk(std::string& out, const char type[5], const std::string& data) {
    put_u32be(out, static_cast<uint32_t>(data.size()));
    std::string body = type;
    body += data;
    out += body;
    put_u32be(out, crc32_png(body));
}

// zlib wrapper around stored DEFLATE blocks (BTYPE 00, <= 65535 bytes each)
inline std::string zlib_stored(const std::string& raw) {
    std::string z;
    z.push_back(0x78);
    z.push_back(0x01);
    size_t off = 0;
    do {
        const size_t n = std::min<size_t>(raw.size() - off, 65535);
        const bool last = off + n == raw.size();
        z.push_back(last ? 1 : 0);
        put_u16le(z, static_cast<uint16_t>(n));
        put_u16le(z, static_cast<uint16_t>(~n & 0xffffu));
        z.append(raw, off, n);
        off += n;
    } while (off < raw.size());
    put_u32be(z, adler32(raw));
    return z;
}

}  // namespace detail

// Serializes interleaved RGB8 pixels (row-major, width*height*3 bytes) as a
// deterministic PNG byte string.
inline std::string encode_png_rgb8(int width, int height, const std::vector<uint8_t>& rgb) {
    if (width < 1 || height < 1)
        throw std::invalid_argument("png: image extents must be positive");
    if (rgb.size() != static_cast<size_t>(width) * static_cast<size_t>(height) * 3)
        throw std::invalid_argument("png: pixel buffer size does not match " +
                                    std::to_string(width) + "x" + std::to_string(height));

    std::string raw;
    raw.reserve(static_cast<size_t>(height) * (1 + static_cast<size_t>(width) * 3));
    for (int r = 0; r < height; ++r) {
        raw.push_back('\0');  // filter type 0 (None)
        const size_t row = static_cast<size_t>(r) * static_cast<size_t>(width) * 3;
        raw.append(reinterpret_cast<const char*>(rgb.data()) + row,
                   static_cast<size_t>(width) * 3);
    }

    std::string ihdr;
    detail::put_u32be(ihdr, static_cast<uint32_t>(width));
    detail::put_u32be(ihdr, static_cast<uint32_t>(height));
    ihdr.push_back(8);     // bit depth
    ihdr.push_back(2);     // color type: truecolor RGB
    ihdr.push_back('\0');  // compression method
    ihdr.push_back('\0');  // filter method
    ihdr.push_back('\0');  // no interlace

    std::string png("\x89PNG\r\n\x1a\n", 8);
    detail::put_png_chunk(png, "IHDR", ihdr);
    detail::put_png_chunk(png, "IDAT", detail::zlib_stored(raw));
    detail::put_png_chunk(png, "IEND", "");
    return png;
}

// Nearest-rank percentile (pct in (0, 100]) of the magnitudes of `values`.
inline double magnitude_percentile(std::span<const float> values, double pct) {
    if (!(pct > 0.0) || pct > 100.0)
        throw std::invalid_argument("png: percentile must be in (0, 100]");
    if (values.empty()) throw std::invalid_argument("png: empty value list");
    std::vector<float> mags(values.size());
    for (size_t i = 0; i < values.size(); ++i) mags[i] = std::abs(values[i]);
    std::sort(mags.begin(), mags.end());
    size_t rank = static_cast<size_t>(std::ceil(pct / 100.0 * static_cast<double>(mags.size())));
    rank = std::clamp<size_t>(rank, 1, mags.size());
    return mags[rank - 1];
}

// Composes the overlay pixels: grayscale base with red blended in where the
// attribution magnitude is large. A constant base renders as black, and a
// zero percentile (all-zero attribution) disables the overlay entirely.
inline std::vector<uint8_t> render_overlay_rgb8(const Tensor& base, const Tensor& attr,
                                                double percentile_clip = 99.0) {
    if (base.ndim() != 2 || attr.ndim() != 2)
        throw std::invalid_argument("png: overlay expects rank-2 slices, got base " +
                                    shape_to_string(base.shape()) + " and attribution " +
                                    shape_to_string(attr.shape()));
    if (base.shape() != attr.shape())
        throw std::invalid_argument("png: base shape " + shape_to_string(base.shape()) +
                                    " does not match attribution " + shape_to_string(attr.shape()));

    float lo = base.values()[0], hi = base.values()[0];
    for (float v : base.values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double range = static_cast<double>(hi) - static_cast<double>(lo);
    const double p = magnitude_percentile(attr.values(), percentile_clip);

    std::vector<uint8_t> rgb(static_cast<size_t>(base.numel()) * 3);
    for (int64_t i = 0; i < base.numel(); ++i) {
        const double g = range > 0.0 ? (static_cast<double>(base.values()[i]) - lo) / range : 0.0;
        const double gray = std::clamp(std::round(g * 255.0), 0.0, 255.0);
        double alpha = 0.0;
        if (p > 0.0)
            alpha = 0.6 * std::clamp(std::abs(static_cast<double>(attr.values()[i])) / p, 0.0, 1.0);
        const double red = (1.0 - alpha) * gray + alpha * 255.0;
        const double other = (1.0 - alpha) * gray;
        rgb[static_cast<size_t>(i) * 3 + 0] = static_cast<uint8_t>(std::clamp(std::round(red), 0.0, 255.0));
        rgb[static_cast<size_t>(i) * 3 + 1] = static_cast<uint8_t>(std::clamp(std::round(other), 0.0, 255.0));
        rgb[static_cast<size_t>(i) * 3 + 2] = static_cast<uint8_t>(std::clamp(std::round(other), 0.0, 255.0));
    }
    return rgb;
}

inline std::string encode_overlay_png(const Tensor& base, const Tensor& attr,
                                      double percentile_clip = 99.0) {
    const std::vector<uint8_t> rgb = render_overlay_rgb8(base, attr, percentile_clip);
    return encode_png_rgb8(base.shape()[1], base.shape()[0], rgb);
}

inline void export_overlay_png(const Tensor& base, const Tensor& attr,
                               const std::filesystem::path& path, double percentile_clip = 99.0) {
    detail::write_file_atomic(path, encode_overlay_png(base, attr, percentile_clip));
}

}  // namespace esegeta
