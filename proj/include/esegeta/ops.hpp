#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "kernels.hpp"
#include "tensor.hpp"

// Graph-recording tensor ops. Every op validates shapes, runs the float
// forward kernel, and appends a tape record when any input participates in
// gradient tracking. Weights created with requires_grad=false are recorded
// as op inputs (their values are needed for backward) but never receive
// gradients, which keeps shared model weights safe for concurrent readers.
namespace esegeta {

namespace detail {

inline bool tracks(const Tensor& t) { return t.defined() && t.impl()->requires_grad; }

inline std::shared_ptr<Graph> merged_graph(std::initializer_list<const Tensor*> ins) {
    std::shared_ptr<Graph> base;
    for (const Tensor* t : ins) {
        if (!t->defined()) continue;
        auto g = resolve_graph(t->graph());
        if (!g || g == base) continue;
        if (!base) {
            base = std::move(g);
            continue;
        }
        // splice the smaller tape onto the end of the larger one; donor ops
        // never consume base outputs (the tapes were disjoint until now), so
        // appending keeps creation order topological
        auto donor = std::move(g);
        if (donor->ops.size() > base->ops.size()) std::swap(base, donor);
        const int offset = static_cast<int>(base->ops.size());
        for (auto& rec : donor->ops) {
            rec.output->producer += offset;
            base->ops.push_back(std::move(rec));
        }
        donor->ops.clear();
        donor->forward_to = base;
    }
    return base;
}

inline Tensor record_op(OpKind kind, std::initializer_list<const Tensor*> ins,
                        std::vector<int> out_shape, std::vector<float> out_values,
                        std::vector<int> iparams, std::vector<float> fparams,
                        std::vector<int> iaux) {
    bool any_tracks = false;
    for (const Tensor* t : ins) any_tracks |= tracks(*t);

    auto out = std::make_shared<TensorData>();
    out->shape = std::move(out_shape);
    out->values = std::move(out_values);

    if (!any_tracks) return Tensor::attach(std::move(out), nullptr);

    auto g = merged_graph(ins);
    if (!g) g = std::make_shared<Graph>();
    out->requires_grad = true;
    out->producer = static_cast<int>(g->ops.size());
    OpRecord rec;
    rec.kind = kind;
    for (const Tensor* t : ins) rec.inputs.push_back(t->impl());
    rec.output = out;
    rec.iparams = std::move(iparams);
    rec.fparams = std::move(fparams);
    rec.iaux = std::move(iaux);
    g->ops.push_back(std::move(rec));
    return Tensor::attach(std::move(out), std::move(g));
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace detail

// -------------------------------------------------------------- conv 2/3d ---
// x: [B, C, H, W] (2d) or [B, C, D, H, W] (3d); w: [O, C, k...]; optional
// bias [O] (pass an undefined Tensor for no bias).

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias = {}, int stride = 1,
                     int pad = 0) {
    detail::require(x.ndim() == 4, "conv2d: input must be [B,C,H,W], got " + shape_to_string(x.shape()));
    detail::require(w.ndim() == 4, "conv2d: weight must be [O,C,kh,kw], got " + shape_to_string(w.shape()));
    detail::require(stride >= 1, "conv2d: stride must be >= 1");
    detail::require(pad >= 0, "conv2d: pad must be >= 0");
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    detail::require(ws[1] == xs[1], "conv2d: weight expects " + std::to_string(ws[1]) +
                                        " input channels, input has " + std::to_string(xs[1]));
    if (bias.defined())
        detail::require(bias.ndim() == 1 && bias.shape()[0] == ws[0],
                        "conv2d: bias must be [O] with O=" + std::to_string(ws[0]));
    const int OH = detail::conv_out_extent(xs[2], ws[2], stride, pad);
    const int OW = detail::conv_out_extent(xs[3], ws[3], stride, pad);
    detail::require(OH >= 1 && OW >= 1, "conv2d: kernel " + shape_to_string(ws) +
                                            " does not fit input " + shape_to_string(xs));
    std::vector<float> y(static_cast<size_t>(xs[0]) * ws[0] * OH * OW);
    detail::conv2d_forward<float>(x.values().data(), xs[0], xs[1], xs[2], xs[3], w.values().data(),
                                  ws[0], ws[2], ws[3], bias.defined() ? bias.values().data() : nullptr,
                                  stride, pad, y.data(), OH, OW);
    if (bias.defined())
        return detail::record_op(OpKind::Conv2d, {&x, &w, &bias}, {xs[0], ws[0], OH, OW}, std::move(y),
                                 {stride, pad}, {}, {});
    return detail::record_op(OpKind::Conv2d, {&x, &w}, {xs[0], ws[0], OH, OW}, std::move(y),
                             {stride, pad}, {}, {});
}

inline Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias = {}, int stride = 1,
                     int pad = 0) {
    detail::require(x.ndim() == 5, "conv3d: input must be [B,C,D,H,W], got " + shape_to_string(x.shape()));
    detail::require(w.ndim() == 5, "conv3d: weight must be [O,C,kd,kh,kw], got " + shape_to_string(w.shape()));
    detail::require(stride >= 1, "conv3d: stride must be >= 1");
    detail::require(pad >= 0, "conv3d: pad must be >= 0");
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    detail::require(ws[1] == xs[1], "conv3d: weight expects " + std::to_string(ws[1]) +
                                        " input channels, input has " + std::to_string(xs[1]));
    if (bias.defined())
        detail::require(bias.ndim() == 1 && bias.shape()[0] == ws[0],
                        "conv3d: bias must be [O] with O=" + std::to_string(ws[0]));
    const int OD = detail::conv_out_extent(xs[2], ws[2], stride, pad);
    const int OH = detail::conv_out_extent(xs[3], ws[3], stride, pad);
    const int OW = detail::conv_out_extent(xs[4], ws[4], stride, pad);
    detail::require(OD >= 1 && OH >= 1 && OW >= 1, "conv3d: kernel " + shape_to_string(ws) +
                                                       " does not fit input " + shape_to_string(xs));
    std::vector<float> y(static_cast<size_t>(xs[0]) * ws[0] * OD * OH * OW);
    detail::conv3d_forward<float>(x.values().data(), xs[0], xs[1], xs[2], xs[3], xs[4],
                                  w.values().data(), ws[0], ws[2], ws[3], ws[4],
                                  bias.defined() ? bias.values().data() : nullptr, stride, pad, y.data(),
                                  OD, OH, OW);
    if (bias.defined())
        return detail::record_op(OpKind::Conv3d, {&x, &w, &bias}, {xs[0], ws[0], OD, OH, OW},
                                 std::move(y), {stride, pad}, {}, {});
    return detail::record_op(OpKind::Conv3d, {&x, &w}, {xs[0], ws[0], OD, OH, OW}, std::move(y),
                             {stride, pad}, {}, {});
}

// ---------------------------------------------------------------- maxpool ---
// Spatial rank follows the input: [B,C,H,W] pools 2d, [B,C,D,H,W] pools 3d.

inline Tensor maxpool(const Tensor& x, int window, int stride) {
    detail::require(x.ndim() == 4 || x.ndim() == 5,
                    "maxpool: input must be [B,C,...] with 2 or 3 spatial dims, got " +
                        shape_to_string(x.shape()));
    detail::require(window >= 1 && stride >= 1, "maxpool: window and stride must be >= 1");
    const auto& xs = x.shape();
    const int rank = x.ndim() - 2;
    std::vector<int> in_sp(xs.begin() + 2, xs.end());
    std::vector<int> out_sp(rank);
    std::vector<int> out_shape = {xs[0], xs[1]};
    int64_t out_elems = static_cast<int64_t>(xs[0]) * xs[1];
    for (int r = 0; r < rank; ++r) {
        detail::require(in_sp[r] >= window, "maxpool: window " + std::to_string(window) +
                                                " exceeds extent " + std::to_string(in_sp[r]));
        out_sp[r] = (in_sp[r] - window) / stride + 1;
        out_shape.push_back(out_sp[r]);
        out_elems *= out_sp[r];
    }
    std::vector<float> y(static_cast<size_t>(out_elems));
    std::vector<int> argmax(static_cast<size_t>(out_elems));
    detail::maxpool_forward<float>(x.values().data(), xs[0] * xs[1], in_sp.data(), out_sp.data(), rank,
                                   window, stride, y.data(), argmax.data());
    return detail::record_op(OpKind::MaxPool, {&x}, std::move(out_shape), std::move(y),
                             {window, stride}, {}, std::move(argmax));
}

// --------------------------------------------------------------- upsample ---

inline Tensor upsample_nearest(const Tensor& x, int factor) {
    detail::require(x.ndim() == 4 || x.ndim() == 5,
                    "upsample_nearest: input must be [B,C,...] with 2 or 3 spatial dims");
    detail::require(factor >= 1, "upsample_nearest: factor must be >= 1");
    const auto& xs = x.shape();
    const int rank = x.ndim() - 2;
    std::vector<int> in_sp(xs.begin() + 2, xs.end());
    std::vector<int> out_shape = {xs[0], xs[1]};
    int64_t out_elems = static_cast<int64_t>(xs[0]) * xs[1];
    for (int r = 0; r < rank; ++r) {
        out_shape.push_back(in_sp[r] * factor);
        out_elems *= static_cast<int64_t>(in_sp[r]) * factor;
    }
    std::vector<float> y(static_cast<size_t>(out_elems));
    detail::upsample_nearest_forward<float>(x.values().data(), xs[0] * xs[1], in_sp.data(), rank, factor,
                                            y.data());
    return detail::record_op(OpKind::UpsampleNearest, {&x}, std::move(out_shape), std::move(y),
                             {factor}, {}, {});
}

inline Tensor upsample_linear(const Tensor& x, int factor) {
    detail::require(x.ndim() == 4 || x.ndim() == 5,
                    "upsample_linear: input must be [B,C,...] with 2 or 3 spatial dims");
    detail::require(factor >= 1, "upsample_linear: factor must be >= 1");
    const auto& xs = x.shape();
    const int rank = x.ndim() - 2;
    std::vector<int> in_sp(xs.begin() + 2, xs.end());
    std::vector<int> out_shape = {xs[0], xs[1]};
    int64_t out_elems = static_cast<int64_t>(xs[0]) * xs[1];
    for (int r = 0; r < rank; ++r) {
        out_shape.push_back(in_sp[r] * factor);
        out_elems *= static_cast<int64_t>(in_sp[r]) * factor;
    }
    std::vector<float> y(static_cast<size_t>(out_elems));
    detail::upsample_linear_forward<float>(x.values().data(), xs[0] * xs[1], in_sp.data(), rank, factor,
                                           y.data());
    return detail::record_op(OpKind::UpsampleLinear, {&x}, std::move(out_shape), std::move(y),
                             {factor}, {}, {});
}

// ------------------------------------------------------------ activations ---

inline Tensor relu(const Tensor& x) {
    std::vector<float> y(x.values().begin(), x.values().end());
    for (float& v : y) v = v > 0.0f ? v : 0.0f;
    return detail::record_op(OpKind::Relu, {&x}, x.shape(), std::move(y), {}, {}, {});
}

inline Tensor leaky_relu(const Tensor& x, float slope = 0.01f) {
    std::vector<float> y(x.values().begin(), x.values().end());
    for (float& v : y) v = v > 0.0f ? v : slope * v;
    return detail::record_op(OpKind::LeakyRelu, {&x}, x.shape(), std::move(y), {}, {slope}, {});
}

inline Tensor sigmoid(const Tensor& x) {
    std::vector<float> y(x.values().begin(), x.values().end());
    for (float& v : y) v = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
    return detail::record_op(OpKind::Sigmoid, {&x}, x.shape(), std::move(y), {}, {}, {});
}

// Softmax over the channel dimension of [B, C, spatial...].
inline Tensor softmax(const Tensor& x) {
    detail::require(x.ndim() >= 2, "softmax: input must be [B,C,...], got " + shape_to_string(x.shape()));
    const auto& xs = x.shape();
    int64_t plane = 1;
    for (size_t i = 2; i < xs.size(); ++i) plane *= xs[i];
    std::vector<float> y(static_cast<size_t>(x.numel()));
    detail::softmax_forward<float>(x.values().data(), xs[0], xs[1], plane, y.data());
    return detail::record_op(OpKind::Softmax, {&x}, x.shape(), std::move(y), {}, {}, {});
}

// ------------------------------------------------------------ elementwise ---
// add/mul accept equal shapes or a single-element tensor on either side.

namespace detail {

inline void require_broadcastable(const Tensor& a, const Tensor& b, const char* op) {
    if (a.numel() == 1 || b.numel() == 1) return;
    require(a.shape() == b.shape(), std::string(op) + ": shapes " + shape_to_string(a.shape()) +
                                        " and " + shape_to_string(b.shape()) +
                                        " differ (only scalar broadcast is supported)");
}

}  // namespace detail

// a + alpha * b
inline Tensor add(const Tensor& a, const Tensor& b, float alpha = 1.0f) {
    detail::require_broadcastable(a, b, "add");
    const bool a_scalar = a.numel() == 1 && b.numel() > 1;
    const auto& big = a_scalar ? b : a;
    std::vector<float> y(static_cast<size_t>(big.numel()));
    const auto av = a.values(), bv = b.values();
    for (int64_t i = 0; i < big.numel(); ++i) {
        const float va = av[a.numel() == 1 ? 0 : i];
        const float vb = bv[b.numel() == 1 ? 0 : i];
        y[static_cast<size_t>(i)] = va + alpha * vb;
    }
    return detail::record_op(OpKind::Add, {&a, &b}, big.shape(), std::move(y), {}, {alpha}, {});
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, b, -1.0f); }

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_broadcastable(a, b, "mul");
    const bool a_scalar = a.numel() == 1 && b.numel() > 1;
    const auto& big = a_scalar ? b : a;
    std::vector<float> y(static_cast<size_t>(big.numel()));
    const auto av = a.values(), bv = b.values();
    for (int64_t i = 0; i < big.numel(); ++i) {
        const float va = av[a.numel() == 1 ? 0 : i];
        const float vb = bv[b.numel() == 1 ? 0 : i];
        y[static_cast<size_t>(i)] = va * vb;
    }
    return detail::record_op(OpKind::Mul, {&a, &b}, big.shape(), std::move(y), {}, {}, {});
}

// Concatenate along the channel dimension (dim 1).
inline Tensor concat(const Tensor& a, const Tensor& b) {
    detail::require(a.ndim() == b.ndim() && a.ndim() >= 2,
                    "concat: inputs must share rank >= 2, got " + shape_to_string(a.shape()) + " and " +
                        shape_to_string(b.shape()));
    const auto& as = a.shape();
    const auto& bs = b.shape();
    for (int i = 0; i < a.ndim(); ++i)
        if (i != 1)
            detail::require(as[i] == bs[i], "concat: non-channel extents differ: " +
                                                shape_to_string(as) + " vs " + shape_to_string(bs));
    std::vector<int> out_shape = as;
    out_shape[1] = as[1] + bs[1];
    int64_t plane = 1;
    for (size_t i = 2; i < as.size(); ++i) plane *= as[i];
    std::vector<float> y(static_cast<size_t>(shape_numel(out_shape)));
    const auto av = a.values(), bv = b.values();
    for (int batch = 0; batch < as[0]; ++batch) {
        const int64_t dst0 = static_cast<int64_t>(batch) * out_shape[1] * plane;
        std::copy_n(av.data() + static_cast<int64_t>(batch) * as[1] * plane, as[1] * plane,
                    y.data() + dst0);
        std::copy_n(bv.data() + static_cast<int64_t>(batch) * bs[1] * plane, bs[1] * plane,
                    y.data() + dst0 + as[1] * plane);
    }
    return detail::record_op(OpKind::Concat, {&a, &b}, std::move(out_shape), std::move(y), {as[1]}, {},
                             {});
}

// x [B,F] * w [O,F]^T + bias [O]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
    detail::require(x.ndim() == 2, "linear: input must be [B,F], got " + shape_to_string(x.shape()));
    detail::require(w.ndim() == 2, "linear: weight must be [O,F], got " + shape_to_string(w.shape()));
    detail::require(x.shape()[1] == w.shape()[1],
                    "linear: input features " + std::to_string(x.shape()[1]) + " != weight features " +
                        std::to_string(w.shape()[1]));
    if (bias.defined())
        detail::require(bias.ndim() == 1 && bias.shape()[0] == w.shape()[0],
                        "linear: bias must be [O] with O=" + std::to_string(w.shape()[0]));
    const int B = x.shape()[0], F = x.shape()[1], O = w.shape()[0];
    std::vector<float> y(static_cast<size_t>(B) * O);
    detail::linear_forward<float>(x.values().data(), B, F, w.values().data(), O,
                                  bias.defined() ? bias.values().data() : nullptr, y.data());
    if (bias.defined())
        return detail::record_op(OpKind::Linear, {&x, &w, &bias}, {B, O}, std::move(y), {}, {}, {});
    return detail::record_op(OpKind::Linear, {&x, &w}, {B, O}, std::move(y), {}, {}, {});
}

// -------------------------------------------------------------- reductions ---

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.values()) acc += v;
    return detail::record_op(OpKind::Sum, {&x}, {1}, {static_cast<float>(acc)}, {}, {}, {});
}

inline Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.values()) acc += v;
    return detail::record_op(OpKind::Mean, {&x}, {1}, {static_cast<float>(acc / x.numel())}, {}, {}, {});
}

inline Tensor reshape(const Tensor& x, std::vector<int> shape) {
    detail::require(shape_numel(shape) == x.numel(),
                    "reshape: cannot view " + shape_to_string(x.shape()) + " as " + shape_to_string(shape));
    std::vector<float> y(x.values().begin(), x.values().end());
    return detail::record_op(OpKind::Reshape, {&x}, std::move(shape), std::move(y), {}, {}, {});
}

}  // namespace esegeta
