#pragma once

#include <set>

#include "binio.hpp"
#include "model.hpp"

// EWT1 weight files: magic "EWT1" | u32-LE tensor count | per tensor:
// u16-LE name length, UTF-8 name, u8 ndim, ndim x u32-LE dims, raw f32-LE
// data. Tensors are written in the model's stable parameter order, so a
// save -> load -> save round trip is byte-identical.
namespace esegeta {

inline void save_weights(const Model& model, const std::filesystem::path& path) {
    std::string out;
    out += "EWT1";
    const auto params = model.parameters();
    detail::put_u32le(out, static_cast<uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        detail::put_u16le(out, static_cast<uint16_t>(name.size()));
        out += name;
        detail::put_u8(out, static_cast<uint8_t>(t.ndim()));
        for (int d : t.shape()) detail::put_u32le(out, static_cast<uint32_t>(d));
        for (float v : t.values()) detail::put_f32le(out, v);
    }
    detail::write_file_atomic(path, out);
}

inline Model load_weights(const std::filesystem::path& path, const ModelConfig& config) {
    const std::string ctx = "weights " + path.string();
    const std::string bytes = detail::read_file(path);
    detail::ByteReader r(bytes, ctx);
    if (r.raw(4) != "EWT1") throw std::runtime_error(ctx + ": bad magic");
    const uint32_t count = r.u32le();

    Model model = build_model(config);
    std::set<std::string> expected;
    for (const auto& [name, t] : model.parameters()) expected.insert(name);

    std::set<std::string> seen;
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t name_len = r.u16le();
        const std::string name = r.raw(name_len);
        const uint8_t ndim = r.u8();
        if (ndim == 0) throw std::runtime_error(ctx + ": tensor '" + name + "' has zero dims");
        std::vector<int> shape(ndim);
        int64_t numel = 1;
        for (auto& d : shape) {
            d = static_cast<int>(r.u32le());
            numel *= d;
        }
        if (numel <= 0) throw std::runtime_error(ctx + ": tensor '" + name + "' has invalid shape");
        std::vector<float> vals(static_cast<size_t>(numel));
        for (auto& v : vals) v = r.f32le();
        if (!seen.insert(name).second)
            throw std::runtime_error(ctx + ": duplicate tensor '" + name + "'");
        try {
            model.set_parameter(name, Tensor(std::move(shape), std::move(vals)));
        } catch (const std::invalid_argument& e) {
            throw std::runtime_error(ctx + ": tensor '" + name + "': " + e.what());
        }
    }
    r.expect_end();
    for (const auto& name : expected)
        if (!seen.count(name)) throw std::runtime_error(ctx + ": missing tensor '" + name + "'");
    return model;
}

}  // namespace esegeta
