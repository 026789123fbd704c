#pragma once

#include <algorithm>
#include <span>
#include <unordered_map>

#include "binio.hpp"
#include "ops.hpp"
#include "rng.hpp"

namespace esegeta {

enum class LayerKind { Conv, Relu, LeakyRelu, Sigmoid, Softmax, MaxPool, UpsampleNearest, UpsampleLinear, Concat };

// One node of a model DAG. `inputs` name earlier layers ("input" is the
// model input). Parameter tensors are plain leaves (no gradient tracking),
// so shared models are safe for concurrent forwards.
struct Layer {
    std::string name;
    LayerKind kind = LayerKind::Conv;
    std::vector<std::string> inputs;
    Tensor weight;  // Conv only
    Tensor bias;    // Conv only
    int stride = 1;
    int pad = 0;
    int window = 2;  // MaxPool; pooling is non-overlapping (stride == window)
    int factor = 2;  // Upsample*
    float slope = 0.01f;
};

struct LayerTap {
    std::string layer;
    Tensor activation;
};

struct ForwardResult {
    Tensor output;
    std::vector<LayerTap> taps;
};

struct ModelConfig {
    int dims = 2;
    int in_channels = 1;
    int classes = 2;
    int depth = 1;
    int base_channels = 4;
    uint64_t seed = 0;
    bool mss = false;  // auxiliary multi-scale heads at the bottleneck and deep decoder levels

    void validate() const {
        if (dims != 2 && dims != 3) throw std::invalid_argument("model config: unsupported dims " + std::to_string(dims));
        if (depth < 1 || depth > 3) throw std::invalid_argument("model config: depth must be in [1,3]");
        if (base_channels < 4 || base_channels > 32)
            throw std::invalid_argument("model config: base_channels must be in [4,32]");
        if (in_channels < 1) throw std::invalid_argument("model config: in_channels must be >= 1");
        if (classes < 1) throw std::invalid_argument("model config: classes must be >= 1");
    }

    std::string id() const {
        std::string s = "unet" + std::to_string(dims) + "d-d" + std::to_string(depth) + "-b" +
                        std::to_string(base_channels) + "-c" + std::to_string(classes) + "-in" +
                        std::to_string(in_channels) + "-s" + std::to_string(seed);
        if (mss) s += "-mss";
        return s;
    }
};

// UNet-style model: fixed layer DAG, deterministic seeded init, named layers
// for taps and per-layer reinitialization. Immutable after construction.
class Model {
public:
    Model(ModelConfig config, std::vector<Layer> layers, std::string output_layer)
        : config_(std::move(config)), layers_(std::move(layers)), output_layer_(std::move(output_layer)) {
        for (size_t i = 0; i < layers_.size(); ++i) {
            if (layers_[i].name == "input")
                throw std::invalid_argument("model: layer name 'input' is reserved");
            if (!index_.emplace(layers_[i].name, i).second)
                throw std::invalid_argument("model: duplicate layer name '" + layers_[i].name + "'");
        }
        for (size_t i = 0; i < layers_.size(); ++i)
            for (const auto& in : layers_[i].inputs)
                if (in != "input") {
                    auto it = index_.find(in);
                    if (it == index_.end() || it->second >= i)
                        throw std::invalid_argument("model: layer '" + layers_[i].name +
                                                    "' consumes unknown or later layer '" + in + "'");
                }
        if (index_.find(output_layer_) == index_.end())
            throw std::invalid_argument("model: unknown output layer '" + output_layer_ + "'");
    }

    const ModelConfig& config() const { return config_; }
    const std::vector<Layer>& layers() const { return layers_; }
    const std::string& output_layer() const { return output_layer_; }

    bool has_layer(const std::string& name) const {
        return name == "input" || index_.count(name) > 0;
    }

    std::vector<std::string> list_layers() const {
        std::vector<std::string> names;
        names.reserve(layers_.size());
        for (const auto& l : layers_) names.push_back(l.name);
        return names;
    }

    const Layer& layer(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("model: unknown layer name '" + name + "'");
        return layers_[it->second];
    }

    // Parameter entries in a stable order: for each conv layer, weight then bias.
    std::vector<std::pair<std::string, Tensor>> parameters() const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (const auto& l : layers_)
            if (l.kind == LayerKind::Conv) {
                out.emplace_back(l.name + ".weight", l.weight);
                out.emplace_back(l.name + ".bias", l.bias);
            }
        return out;
    }

    uint64_t parameter_checksum() const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [name, t] : parameters()) {
            h = detail::fnv1a_bytes(name.data(), name.size(), h);
            h = detail::fnv1a_bytes(t.values().data(), t.values().size_bytes(), h);
        }
        return h;
    }

    uint64_t parameter_checksum(const std::string& layer_name) const {
        const Layer& l = layer(layer_name);
        if (l.kind != LayerKind::Conv)
            throw std::invalid_argument("model: layer '" + layer_name + "' has no parameters");
        uint64_t h = detail::fnv1a_bytes(l.weight.values().data(), l.weight.values().size_bytes());
        return detail::fnv1a_bytes(l.bias.values().data(), l.bias.values().size_bytes(), h);
    }

    void validate_input(const Tensor& x) const {
        const int want_nd = config_.dims + 2;
        if (x.ndim() != want_nd)
            throw std::invalid_argument("model " + config_.id() + ": input must have " +
                                        std::to_string(want_nd) + " dims [B,C,spatial...], got shape " +
                                        shape_to_string(x.shape()));
        if (x.shape()[1] != config_.in_channels)
            throw std::invalid_argument("model " + config_.id() + ": expects " +
                                        std::to_string(config_.in_channels) + " input channels, got " +
                                        std::to_string(x.shape()[1]));
        const int div = 1 << config_.depth;
        for (int i = 2; i < want_nd; ++i)
            if (x.shape()[i] % div != 0)
                throw std::invalid_argument("model " + config_.id() + ": spatial extents must be divisible by " +
                                            std::to_string(div) + ", got " + shape_to_string(x.shape()));
    }

    Tensor forward(const Tensor& x) const {
        std::vector<LayerTap> taps;
        return forward_with_taps(x, {}, taps);
    }

    ForwardResult forward_with_taps(const Tensor& x, std::span<const std::string> tap_names) const {
        std::vector<LayerTap> taps;
        Tensor out = forward_with_taps(x, tap_names, taps);
        return {out, std::move(taps)};
    }

    Tensor forward_with_taps(const Tensor& x, std::span<const std::string> tap_names,
                             std::vector<LayerTap>& taps) const {
        validate_input(x);
        for (const auto& n : tap_names)
            if (!has_layer(n)) throw std::invalid_argument("model: unknown layer name '" + n + "'");
        std::unordered_map<std::string, Tensor> acts;
        acts.emplace("input", x);
        for (const Layer& l : layers_) acts.emplace(l.name, eval_layer(l, acts));
        taps.clear();
        for (const auto& n : tap_names) taps.push_back({n, acts.at(n)});
        return acts.at(output_layer_);
    }

    // Double-precision forward over the same kernels, for finite-difference
    // probing. Returns the flattened main output.
    std::vector<double> forward_f64(const Tensor& x) const {
        validate_input(x);
        struct DBuf {
            std::vector<int> shape;
            std::vector<double> v;
        };
        std::unordered_map<std::string, DBuf> acts;
        acts.emplace("input", DBuf{x.shape(), std::vector<double>(x.values().begin(), x.values().end())});
        for (const Layer& l : layers_) {
            const DBuf& a = acts.at(l.inputs[0]);
            DBuf out;
            switch (l.kind) {
                case LayerKind::Conv: {
                    const auto& ws = l.weight.shape();
                    std::vector<double> wd(l.weight.values().begin(), l.weight.values().end());
                    std::vector<double> bd(l.bias.values().begin(), l.bias.values().end());
                    if (static_cast<int>(a.shape.size()) == 4) {
                        const int OH = detail::conv_out_extent(a.shape[2], ws[2], l.stride, l.pad);
                        const int OW = detail::conv_out_extent(a.shape[3], ws[3], l.stride, l.pad);
                        out.shape = {a.shape[0], ws[0], OH, OW};
                        out.v.resize(static_cast<size_t>(shape_numel(out.shape)));
                        detail::conv2d_forward<double>(a.v.data(), a.shape[0], a.shape[1], a.shape[2],
                                                       a.shape[3], wd.data(), ws[0], ws[2], ws[3],
                                                       bd.data(), l.stride, l.pad, out.v.data(), OH, OW);
                    } else {
                        const int OD = detail::conv_out_extent(a.shape[2], ws[2], l.stride, l.pad);
                        const int OH = detail::conv_out_extent(a.shape[3], ws[3], l.stride, l.pad);
                        const int OW = detail::conv_out_extent(a.shape[4], ws[4], l.stride, l.pad);
                        out.shape = {a.shape[0], ws[0], OD, OH, OW};
                        out.v.resize(static_cast<size_t>(shape_numel(out.shape)));
                        detail::conv3d_forward<double>(a.v.data(), a.shape[0], a.shape[1], a.shape[2],
                                                       a.shape[3], a.shape[4], wd.data(), ws[0], ws[2],
                                                       ws[3], ws[4], bd.data(), l.stride, l.pad,
                                                       out.v.data(), OD, OH, OW);
                    }
                    break;
                }
                case LayerKind::Relu: {
                    out.shape = a.shape;
                    out.v = a.v;
                    for (auto& v : out.v) v = v > 0.0 ? v : 0.0;
                    break;
                }
                case LayerKind::LeakyRelu: {
                    out.shape = a.shape;
                    out.v = a.v;
                    for (auto& v : out.v) v = v > 0.0 ? v : l.slope * v;
                    break;
                }
                case LayerKind::Sigmoid: {
                    out.shape = a.shape;
                    out.v = a.v;
                    for (auto& v : out.v) v = 1.0 / (1.0 + std::exp(-v));
                    break;
                }
                case LayerKind::Softmax: {
                    out.shape = a.shape;
                    out.v.resize(a.v.size());
                    int64_t plane = 1;
                    for (size_t i = 2; i < a.shape.size(); ++i) plane *= a.shape[i];
                    detail::softmax_forward<double>(a.v.data(), a.shape[0], a.shape[1], plane, out.v.data());
                    break;
                }
                case LayerKind::MaxPool: {
                    const int rank = static_cast<int>(a.shape.size()) - 2;
                    std::vector<int> in_sp(a.shape.begin() + 2, a.shape.end());
                    std::vector<int> out_sp(rank);
                    out.shape = {a.shape[0], a.shape[1]};
                    for (int r = 0; r < rank; ++r) {
                        out_sp[r] = (in_sp[r] - l.window) / l.window + 1;
                        out.shape.push_back(out_sp[r]);
                    }
                    out.v.resize(static_cast<size_t>(shape_numel(out.shape)));
                    detail::maxpool_forward<double>(a.v.data(), a.shape[0] * a.shape[1], in_sp.data(),
                                                    out_sp.data(), rank, l.window, l.window,
                                                    out.v.data(), nullptr);
                    break;
                }
                case LayerKind::UpsampleNearest:
                case LayerKind::UpsampleLinear: {
                    const int rank = static_cast<int>(a.shape.size()) - 2;
                    std::vector<int> in_sp(a.shape.begin() + 2, a.shape.end());
                    out.shape = {a.shape[0], a.shape[1]};
                    for (int r = 0; r < rank; ++r) out.shape.push_back(in_sp[r] * l.factor);
                    out.v.resize(static_cast<size_t>(shape_numel(out.shape)));
                    if (l.kind == LayerKind::UpsampleNearest)
                        detail::upsample_nearest_forward<double>(a.v.data(), a.shape[0] * a.shape[1],
                                                                 in_sp.data(), rank, l.factor, out.v.data());
                    else
                        detail::upsample_linear_forward<double>(a.v.data(), a.shape[0] * a.shape[1],
                                                                in_sp.data(), rank, l.factor, out.v.data());
                    break;
                }
                case LayerKind::Concat: {
                    const DBuf& b = acts.at(l.inputs[1]);
                    out.shape = a.shape;
                    out.shape[1] = a.shape[1] + b.shape[1];
                    out.v.resize(static_cast<size_t>(shape_numel(out.shape)));
                    int64_t plane = 1;
                    for (size_t i = 2; i < a.shape.size(); ++i) plane *= a.shape[i];
                    for (int batch = 0; batch < a.shape[0]; ++batch) {
                        std::copy_n(a.v.data() + static_cast<int64_t>(batch) * a.shape[1] * plane,
                                    a.shape[1] * plane,
                                    out.v.data() + static_cast<int64_t>(batch) * out.shape[1] * plane);
                        std::copy_n(b.v.data() + static_cast<int64_t>(batch) * b.shape[1] * plane,
                                    b.shape[1] * plane,
                                    out.v.data() + static_cast<int64_t>(batch) * out.shape[1] * plane +
                                        a.shape[1] * plane);
                    }
                    break;
                }
            }
            acts.emplace(l.name, std::move(out));
        }
        return std::move(acts.at(output_layer_).v);
    }

    // Copy of this model with the named layers' parameters redrawn from the
    // init distribution (keyed by `seed` and the parameter name). Other
    // layers share storage with the original, which is never mutated.
    Model reinit_layers(std::span<const std::string> names, uint64_t seed) const {
        for (const auto& n : names) (void)layer(n);  // validate
        std::vector<Layer> copy = layers_;
        for (const auto& n : names) {
            Layer& l = copy[index_.at(n)];
            if (l.kind != LayerKind::Conv) continue;  // nothing to redraw
            const auto& ws = l.weight.shape();
            int fan_in = ws[1];
            for (size_t i = 2; i < ws.size(); ++i) fan_in *= ws[i];
            l.weight = draw_uniform(ws, fan_in, seed, l.name + ".weight");
            l.bias = draw_uniform(l.bias.shape(), fan_in, seed, l.name + ".bias");
        }
        return Model(config_, std::move(copy), output_layer_);
    }

    Model reinit_layers(const std::vector<std::string>& names, uint64_t seed) const {
        return reinit_layers(std::span<const std::string>(names), seed);
    }

    static Tensor draw_uniform(std::vector<int> shape, int fan_in, uint64_t seed,
                               const std::string& param_name) {
        const double bound = std::sqrt(1.0 / fan_in);
        Rng rng = named_rng(seed, param_name);
        std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
        for (auto& f : v) f = static_cast<float>(rng.uniform(-bound, bound));
        return Tensor(std::move(shape), std::move(v));
    }

    // Used by load_weights: replaces a named parameter (shape must match).
    void set_parameter(const std::string& pname, Tensor value) {
        const auto dot = pname.rfind('.');
        if (dot == std::string::npos) throw std::runtime_error("weights: unexpected tensor name '" + pname + "'");
        const std::string lname = pname.substr(0, dot);
        const std::string field = pname.substr(dot + 1);
        auto it = index_.find(lname);
        if (it == index_.end() || layers_[it->second].kind != LayerKind::Conv || (field != "weight" && field != "bias"))
            throw std::runtime_error("weights: unexpected tensor name '" + pname + "'");
        Layer& l = layers_[it->second];
        Tensor& slot = field == "weight" ? l.weight : l.bias;
        if (slot.shape() != value.shape())
            throw std::runtime_error("weights: shape mismatch for '" + pname + "': file has " +
                                     shape_to_string(value.shape()) + ", model expects " +
                                     shape_to_string(slot.shape()));
        slot = std::move(value);
    }

private:
    friend Model build_model(const ModelConfig&);

    Tensor eval_layer(const Layer& l, const std::unordered_map<std::string, Tensor>& acts) const {
        const Tensor& a = acts.at(l.inputs[0]);
        switch (l.kind) {
            case LayerKind::Conv:
                return a.ndim() == 4 ? conv2d(a, l.weight, l.bias, l.stride, l.pad)
                                     : conv3d(a, l.weight, l.bias, l.stride, l.pad);
            case LayerKind::Relu: return relu(a);
            case LayerKind::LeakyRelu: return leaky_relu(a, l.slope);
            case LayerKind::Sigmoid: return sigmoid(a);
            case LayerKind::Softmax: return softmax(a);
            case LayerKind::MaxPool: return maxpool(a, l.window, l.window);
            case LayerKind::UpsampleNearest: return upsample_nearest(a, l.factor);
            case LayerKind::UpsampleLinear: return upsample_linear(a, l.factor);
            case LayerKind::Concat: return concat(a, acts.at(l.inputs[1]));
        }
        throw std::logic_error("model: unhandled layer kind");
    }

    ModelConfig config_;
    std::vector<Layer> layers_;
    std::string output_layer_;
    std::unordered_map<std::string, size_t> index_;
};

// Build the tiny UNet: `depth` encoder levels (two 3x3 convs + leaky relu,
// then 2x2 maxpool), a bottleneck, and mirrored decoder levels (2x linear
// upsample, skip concat, two 3x3 convs), finished by a 1x1 output conv
// ("head"). The MSS variant adds 1x1 auxiliary heads on the bottleneck and
// deep decoder levels; they share no parameters with the main trunk, and
// trunk parameters are drawn identically with or without them.
inline Model build_model(const ModelConfig& config) {
    config.validate();
    const int dims = config.dims;
    const int k = 3, pad = 1;
    std::vector<Layer> layers;

    auto conv_shape = [&](int cout, int cin, int kk) {
        std::vector<int> s = {cout, cin};
        for (int i = 0; i < dims; ++i) s.push_back(kk);
        return s;
    };
    auto add_conv = [&](const std::string& name, const std::string& in, int cin, int cout, int kk,
                        int p) {
        Layer l;
        l.name = name;
        l.kind = LayerKind::Conv;
        l.inputs = {in};
        l.stride = 1;
        l.pad = p;
        int fan_in = cin;
        for (int i = 0; i < dims; ++i) fan_in *= kk;
        l.weight = Model::draw_uniform(conv_shape(cout, cin, kk), fan_in, config.seed, name + ".weight");
        l.bias = Model::draw_uniform({cout}, fan_in, config.seed, name + ".bias");
        layers.push_back(std::move(l));
    };
    auto add_act = [&](const std::string& name, const std::string& in) {
        Layer l;
        l.name = name;
        l.kind = LayerKind::LeakyRelu;
        l.inputs = {in};
        l.slope = 0.01f;
        layers.push_back(std::move(l));
    };
    auto add_simple = [&](const std::string& name, LayerKind kind, const std::string& in) {
        Layer l;
        l.name = name;
        l.kind = kind;
        l.inputs = {in};
        layers.push_back(std::move(l));
    };

    const auto ch = [&](int level) { return config.base_channels << level; };

    std::string prev = "input";
    int prev_ch = config.in_channels;
    for (int i = 0; i < config.depth; ++i) {
        const std::string e = "enc" + std::to_string(i);
        add_conv(e + ".conv0", prev, prev_ch, ch(i), k, pad);
        add_act(e + ".act0", e + ".conv0");
        add_conv(e + ".conv1", e + ".act0", ch(i), ch(i), k, pad);
        add_act(e + ".act1", e + ".conv1");
        add_simple("down" + std::to_string(i), LayerKind::MaxPool, e + ".act1");
        prev = "down" + std::to_string(i);
        prev_ch = ch(i);
    }

    add_conv("bottleneck.conv0", prev, prev_ch, ch(config.depth), k, pad);
    add_act("bottleneck.act0", "bottleneck.conv0");
    add_conv("bottleneck.conv1", "bottleneck.act0", ch(config.depth), ch(config.depth), k, pad);
    add_act("bottleneck.act1", "bottleneck.conv1");

    std::string deep = "bottleneck.act1";
    for (int i = config.depth - 1; i >= 0; --i) {
        const std::string d = "dec" + std::to_string(i);
        const std::string up = "up" + std::to_string(i);
        add_simple(up, LayerKind::UpsampleLinear, deep);
        Layer cat;
        cat.name = d + ".cat";
        cat.kind = LayerKind::Concat;
        cat.inputs = {"enc" + std::to_string(i) + ".act1", up};
        layers.push_back(std::move(cat));
        add_conv(d + ".conv0", d + ".cat", ch(i) + ch(i + 1), ch(i), k, pad);
        add_act(d + ".act0", d + ".conv0");
        add_conv(d + ".conv1", d + ".act0", ch(i), ch(i), k, pad);
        add_act(d + ".act1", d + ".conv1");
        deep = d + ".act1";
    }

    add_conv("head", "dec0.act1", config.base_channels, config.classes, 1, 0);

    if (config.mss) {
        add_conv("mss" + std::to_string(config.depth) + ".head", "bottleneck.act1", ch(config.depth),
                 config.classes, 1, 0);
        for (int i = config.depth - 1; i >= 1; --i)
            add_conv("mss" + std::to_string(i) + ".head", "dec" + std::to_string(i) + ".act1", ch(i),
                     config.classes, 1, 0);
    }

    return Model(config, std::move(layers), "head");
}

}  // namespace esegeta
