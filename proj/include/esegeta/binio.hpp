#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

// Little-endian byte packing plus whole-file read/write. Writes go through a
// temp file + rename so a failed writer never leaves a partial output behind.
namespace esegeta::detail {

inline void put_u8(std::string& out, uint8_t v) { out.push_back(static_cast<char>(v)); }

inline void put_u16le(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32le(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32le(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32le(out, bits);
}

class ByteReader {
public:
    ByteReader(const std::string& bytes, std::string context)
        : bytes_(bytes), context_(std::move(context)) {}

    uint8_t u8() {
        need(1);
        return static_cast<uint8_t>(bytes_[off_++]);
    }

    uint16_t u16le() {
        need(2);
        const uint16_t v = static_cast<uint16_t>(static_cast<uint8_t>(bytes_[off_]) |
                                                 (static_cast<uint8_t>(bytes_[off_ + 1]) << 8));
        off_ += 2;
        return v;
    }

    uint32_t u32le() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(bytes_[off_ + i])) << (8 * i);
        off_ += 4;
        return v;
    }

    float f32le() {
        const uint32_t bits = u32le();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    std::string raw(size_t n) {
        need(n);
        std::string s = bytes_.substr(off_, n);
        off_ += n;
        return s;
    }

    size_t remaining() const { return bytes_.size() - off_; }

    void expect_end() const {
        if (off_ != bytes_.size())
            throw std::runtime_error(context_ + ": trailing bytes after payload");
    }

private:
    void need(size_t n) const {
        if (off_ + n > bytes_.size()) throw std::runtime_error(context_ + ": truncated file");
    }

    const std::string& bytes_;
    std::string context_;
    size_t off_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open file for reading: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw std::runtime_error("read failed: " + path.string());
    return bytes;
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open file for writing: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            out.close();
            std::filesystem::remove(tmp);
            throw std::runtime_error("write failed: " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw std::runtime_error("rename failed for " + path.string() + ": " + ec.message());
    }
}

inline uint64_t fnv1a_bytes(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace esegeta::detail
