#pragma once

#include <functional>
#include <unordered_set>

#include "ops.hpp"

namespace esegeta {

// How gradient crosses relu/leaky_relu records during backward.
//   Standard: exact chain rule.
//   Guided:   additionally zeroes entries whose incoming gradient is negative
//             (only positive evidence flows to the input).
//   Deconv:   ignores the forward mask entirely and re-applies the activation
//             to the incoming gradient.
enum class BackwardPolicy { Standard, Guided, Deconv };

namespace detail {

inline void fold_grad(const std::shared_ptr<TensorData>& td, const std::vector<double>& acc) {
    if (td->grad.empty()) td->grad.assign(td->values.size(), 0.0f);
    for (size_t i = 0; i < acc.size(); ++i)
        td->grad[i] = static_cast<float>(static_cast<double>(td->grad[i]) + acc[i]);
}

inline void backward_record(const OpRecord& rec, BackwardPolicy policy) {
    const std::vector<float>& g = rec.output->grad;
    const auto wants = [&](size_t i) { return rec.inputs[i]->requires_grad; };
    const auto values = [&](size_t i) -> const std::vector<float>& { return rec.inputs[i]->values; };

    switch (rec.kind) {
        case OpKind::Conv2d: {
            const auto& xs = rec.inputs[0]->shape;
            const auto& ws = rec.inputs[1]->shape;
            const auto& os = rec.output->shape;
            const bool has_bias = rec.inputs.size() == 3;
            std::vector<double> gx, gw, gb;
            if (wants(0)) gx.assign(values(0).size(), 0.0);
            if (wants(1)) gw.assign(values(1).size(), 0.0);
            if (has_bias && wants(2)) gb.assign(values(2).size(), 0.0);
            conv2d_backward(g.data(), values(0).data(), values(1).data(), xs[0], xs[1], xs[2], xs[3],
                            ws[0], ws[2], ws[3], rec.iparams[0], rec.iparams[1], os[2], os[3],
                            gx.empty() ? nullptr : gx.data(), gw.empty() ? nullptr : gw.data(),
                            gb.empty() ? nullptr : gb.data());
            if (!gx.empty()) fold_grad(rec.inputs[0], gx);
            if (!gw.empty()) fold_grad(rec.inputs[1], gw);
            if (!gb.empty()) fold_grad(rec.inputs[2], gb);
            break;
        }
        case OpKind::Conv3d: {
            const auto& xs = rec.inputs[0]->shape;
            const auto& ws = rec.inputs[1]->shape;
            const auto& os = rec.output->shape;
            const bool has_bias = rec.inputs.size() == 3;
            std::vector<double> gx, gw, gb;
            if (wants(0)) gx.assign(values(0).size(), 0.0);
            if (wants(1)) gw.assign(values(1).size(), 0.0);
            if (has_bias && wants(2)) gb.assign(values(2).size(), 0.0);
            conv3d_backward(g.data(), values(0).data(), values(1).data(), xs[0], xs[1], xs[2], xs[3],
                            xs[4], ws[0], ws[2], ws[3], ws[4], rec.iparams[0], rec.iparams[1], os[2],
                            os[3], os[4], gx.empty() ? nullptr : gx.data(),
                            gw.empty() ? nullptr : gw.data(), gb.empty() ? nullptr : gb.data());
            if (!gx.empty()) fold_grad(rec.inputs[0], gx);
            if (!gw.empty()) fold_grad(rec.inputs[1], gw);
            if (!gb.empty()) fold_grad(rec.inputs[2], gb);
            break;
        }
        case OpKind::MaxPool: {
            if (!wants(0)) break;
            std::vector<double> gx(values(0).size(), 0.0);
            for (size_t of = 0; of < g.size(); ++of)
                gx[static_cast<size_t>(rec.iaux[of])] += g[of];
            fold_grad(rec.inputs[0], gx);
            break;
        }
        case OpKind::UpsampleNearest: {
            if (!wants(0)) break;
            const auto& xs = rec.inputs[0]->shape;
            const auto& os = rec.output->shape;
            const int rank = static_cast<int>(xs.size()) - 2;
            const int factor = rec.iparams[0];
            int64_t in_plane = 1, out_plane = 1;
            for (int r = 0; r < rank; ++r) {
                in_plane *= xs[2 + r];
                out_plane *= os[2 + r];
            }
            std::vector<double> gx(values(0).size(), 0.0);
            std::vector<int> oc(rank);
            for (int bc = 0; bc < xs[0] * xs[1]; ++bc)
                for (int64_t of = 0; of < out_plane; ++of) {
                    int64_t rem = of;
                    for (int r = rank - 1; r >= 0; --r) {
                        oc[r] = static_cast<int>(rem % os[2 + r]);
                        rem /= os[2 + r];
                    }
                    int64_t flat = 0;
                    for (int r = 0; r < rank; ++r) flat = flat * xs[2 + r] + oc[r] / factor;
                    gx[static_cast<size_t>(bc * in_plane + flat)] += g[static_cast<size_t>(bc * out_plane + of)];
                }
            fold_grad(rec.inputs[0], gx);
            break;
        }
        case OpKind::UpsampleLinear: {
            if (!wants(0)) break;
            const auto& xs = rec.inputs[0]->shape;
            const int rank = static_cast<int>(xs.size()) - 2;
            const int factor = rec.iparams[0];
            int64_t in_plane = 1, out_plane = 1;
            for (int r = 0; r < rank; ++r) {
                in_plane *= xs[2 + r];
                out_plane *= static_cast<int64_t>(xs[2 + r]) * factor;
            }
            std::vector<double> gx(values(0).size(), 0.0);
            std::vector<int> in_sp(xs.begin() + 2, xs.end());
            for (int bc = 0; bc < xs[0] * xs[1]; ++bc) {
                const float* gp = g.data() + bc * out_plane;
                double* gxp = gx.data() + bc * in_plane;
                upsample_linear_visit(in_sp.data(), rank, factor,
                                      [&](int64_t of, int64_t inf, double wgt) { gxp[inf] += wgt * gp[of]; });
            }
            fold_grad(rec.inputs[0], gx);
            break;
        }
        case OpKind::Relu: {
            if (!wants(0)) break;
            const auto& x = values(0);
            std::vector<double> gx(x.size(), 0.0);
            for (size_t i = 0; i < x.size(); ++i) {
                switch (policy) {
                    case BackwardPolicy::Standard: gx[i] = x[i] > 0.0f ? g[i] : 0.0; break;
                    case BackwardPolicy::Guided: gx[i] = (x[i] > 0.0f && g[i] > 0.0f) ? g[i] : 0.0; break;
                    case BackwardPolicy::Deconv: gx[i] = g[i] > 0.0f ? g[i] : 0.0; break;
                }
            }
            fold_grad(rec.inputs[0], gx);
            break;
        }
        case OpKind::LeakyRelu: {
            if (!wants(0)) break;
            const auto& x = values(0);
            const double slope = rec.fparams[0];
            std::vector<double> gx(x.size(), 0.0);
            for (size_t i = 0; i < x.size(); ++i) {
                const double local = x[i] > 0.0f ? 1.0 : slope;
                switch (policy) {
                    case BackwardPolicy::Standard: gx[i] = g[i] * local; break;
                    case BackwardPolicy::Guided: gx[i] = g[i] > 0.0f ? g[i] * local : 0.0; break;
                    case BackwardPolicy::Deconv: gx[i] = g[i] > 0.0f ? g[i] : slope * g[i]; break;
                }
            }
            fold_grad(rec.inputs[0], gx);
            break;
        }
        case OpKind::Sigmoid: {
            if (!wants(0)) break;
            const auto& y = rec.output->values;
            std::vector<double> gx(y.size(), 0.0);
            for (size_t i = 0; i < y.size(); ++i) {
                const double s = y[i];
                gx[i] = g[i] * s * (1.0 - s);
            }
            fold_grad(rec.inputs[0], gx);
            break;
        }
        case OpKind::Softmax: {
            if (!wants(0)) break;
            const auto& y = rec.output->values;
            const auto& os = rec.output->shape;
            const int B = os[0], C = os[1];
            int64_t plane = 1;
            for (size_t i = 2; i < os.size(); ++i) plane *= os[i];
            std::vector<double> gx(y.size(), 0.0);
            for (int b = 0; b < B; ++b)
                for (int64_t p = 0; p < plane; ++p) {
                    double dot = 0.0;
                    for (int c = 0; c < C; ++c) {
                        const int64_t i = (static_cast<int64_t>(b) * C + c) * plane + p;
                        dot += static_cast<double>(g[i]) * y[i];
                    }
                    for (int c = 0; c < C; ++c) {
                        const int64_t i = (static_cast<int64_t>(b) * C + c) * plane + p;
                        gx[i] = y[i] * (g[i] - dot);
                    }
                }
            fold_grad(rec.inputs[0], gx);
            break;
        }
        case OpKind::Add: {
            const double alpha = rec.fparams[0];
            for (int side = 0; side < 2; ++side) {
                if (!wants(side)) continue;
                const double scale = side == 0 ? 1.0 : alpha;
                std::vector<double> gi(values(side).size(), 0.0);
                if (gi.size() == 1 && g.size() > 1) {
                    for (float gv : g) gi[0] += scale * gv;
                } else {
                    for (size_t i = 0; i < g.size(); ++i) gi[i] = scale * g[i];
                }
                fold_grad(rec.inputs[side], gi);
            }
            break;
        }
        case OpKind::Mul: {
            for (int side = 0; side < 2; ++side) {
                if (!wants(side)) continue;
                const auto& other = values(1 - side);
                std::vector<double> gi(values(side).size(), 0.0);
                if (gi.size() == 1 && g.size() > 1) {
                    for (size_t i = 0; i < g.size(); ++i)
                        gi[0] += static_cast<double>(g[i]) * other[other.size() == 1 ? 0 : i];
                } else {
                    for (size_t i = 0; i < g.size(); ++i)
                        gi[i] = static_cast<double>(g[i]) * other[other.size() == 1 ? 0 : i];
                }
                fold_grad(rec.inputs[side], gi);
            }
            break;
        }
        case OpKind::Concat: {
            const auto& os = rec.output->shape;
            const int ca = rec.iparams[0];
            const int cout = os[1];
            int64_t plane = 1;
            for (size_t i = 2; i < os.size(); ++i) plane *= os[i];
            for (int side = 0; side < 2; ++side) {
                if (!wants(side)) continue;
                const int cs = side == 0 ? ca : cout - ca;
                const int coff = side == 0 ? 0 : ca;
                std::vector<double> gi(values(side).size(), 0.0);
                for (int b = 0; b < os[0]; ++b)
                    for (int c = 0; c < cs; ++c)
                        for (int64_t p = 0; p < plane; ++p)
                            gi[(static_cast<int64_t>(b) * cs + c) * plane + p] =
                                g[(static_cast<int64_t>(b) * cout + coff + c) * plane + p];
                fold_grad(rec.inputs[side], gi);
            }
            break;
        }
        case OpKind::Linear: {
            const int B = rec.inputs[0]->shape[0];
            const int F = rec.inputs[0]->shape[1];
            const int O = rec.inputs[1]->shape[0];
            const auto& x = values(0);
            const auto& w = values(1);
            if (wants(0)) {
                std::vector<double> gx(x.size(), 0.0);
                for (int b = 0; b < B; ++b)
                    for (int o = 0; o < O; ++o) {
                        const double gv = g[static_cast<size_t>(b) * O + o];
                        if (gv == 0.0) continue;
                        for (int f = 0; f < F; ++f)
                            gx[static_cast<size_t>(b) * F + f] += gv * w[static_cast<size_t>(o) * F + f];
                    }
                fold_grad(rec.inputs[0], gx);
            }
            if (wants(1)) {
                std::vector<double> gw(w.size(), 0.0);
                for (int b = 0; b < B; ++b)
                    for (int o = 0; o < O; ++o) {
                        const double gv = g[static_cast<size_t>(b) * O + o];
                        if (gv == 0.0) continue;
                        for (int f = 0; f < F; ++f)
                            gw[static_cast<size_t>(o) * F + f] += gv * x[static_cast<size_t>(b) * F + f];
                    }
                fold_grad(rec.inputs[1], gw);
            }
            if (rec.inputs.size() == 3 && wants(2)) {
                std::vector<double> gb(static_cast<size_t>(O), 0.0);
                for (int b = 0; b < B; ++b)
                    for (int o = 0; o < O; ++o) gb[o] += g[static_cast<size_t>(b) * O + o];
                fold_grad(rec.inputs[2], gb);
            }
            break;
        }
        case OpKind::Sum: {
            if (!wants(0)) break;
            std::vector<double> gx(values(0).size(), static_cast<double>(g[0]));
            fold_grad(rec.inputs[0], gx);
            break;
        }
        case OpKind::Mean: {
            if (!wants(0)) break;
            const double n = static_cast<double>(values(0).size());
            std::vector<double> gx(values(0).size(), static_cast<double>(g[0]) / n);
            fold_grad(rec.inputs[0], gx);
            break;
        }
        case OpKind::Reshape: {
            if (!wants(0)) break;
            std::vector<double> gx(g.begin(), g.end());
            fold_grad(rec.inputs[0], gx);
            break;
        }
    }
}

}  // namespace detail

// Reverse pass over the recorded tape. Gradients of earlier passes on the
// same graph are cleared first, so repeated calls are deterministic. Only
// tensors flagged requires_grad receive gradients; plain leaves (e.g. shared
// model weights) are left untouched.
inline void backward_with_seed(const Tensor& out, const Tensor& seed,
                               BackwardPolicy policy = BackwardPolicy::Standard) {
    const auto g = detail::resolve_graph(out.graph());
    const int producer = out.impl() ? out.impl()->producer : -1;
    if (!g || producer < 0)
        throw std::invalid_argument("backward: tensor was not produced by a recorded op");
    if (producer >= static_cast<int>(g->ops.size()) ||
        g->ops[static_cast<size_t>(producer)].output != out.impl())
        throw std::invalid_argument("backward: tensor's tape was merged; backward from the downstream output");
    if (seed.defined() && seed.numel() != out.numel())
        throw std::invalid_argument("backward: seed shape " + shape_to_string(seed.shape()) +
                                    " does not match output shape " + shape_to_string(out.shape()));
    if (!seed.defined() && out.numel() != 1)
        throw std::invalid_argument("backward: output is not scalar; pass an explicit seed");

    std::unordered_set<detail::TensorData*> seen;
    for (const auto& rec : g->ops) {
        for (const auto& in : rec.inputs)
            if (in->requires_grad && seen.insert(in.get()).second) in->grad.assign(in->values.size(), 0.0f);
        if (seen.insert(rec.output.get()).second) rec.output->grad.assign(rec.output->values.size(), 0.0f);
    }

    if (seed.defined()) {
        out.impl()->grad.assign(seed.values().begin(), seed.values().end());
    } else {
        out.impl()->grad.assign(1, 1.0f);
    }

    for (auto it = g->ops.rbegin(); it != g->ops.rend(); ++it) {
        const auto& og = it->output->grad;
        bool any = false;
        for (float v : og)
            if (v != 0.0f) {
                any = true;
                break;
            }
        if (any) detail::backward_record(*it, policy);
    }
}

inline void backward(const Tensor& out, BackwardPolicy policy = BackwardPolicy::Standard) {
    backward_with_seed(out, Tensor{}, policy);
}

// Compares analytic input gradients against central finite differences and
// returns the maximum relative error max(|analytic - numeric| / max(1e-8,
// |numeric|)). `probe` evaluates the same scalar function without gradients
// (a higher-precision path may be supplied).
inline double grad_check(const std::function<Tensor(const Tensor&)>& fn,
                         const std::function<double(const Tensor&)>& probe, const Tensor& x,
                         double epsilon) {
    if (epsilon <= 0.0) throw std::invalid_argument("grad_check: epsilon must be positive");
    Tensor xg = x.with_requires_grad();
    Tensor out = fn(xg);
    if (out.numel() != 1) throw std::invalid_argument("grad_check: function output must be scalar");
    backward(out);
    Tensor analytic = xg.grad();

    std::vector<float> base(x.values().begin(), x.values().end());
    double worst = 0.0;
    for (size_t i = 0; i < base.size(); ++i) {
        std::vector<float> vp = base, vm = base;
        vp[i] = static_cast<float>(base[i] + epsilon);
        vm[i] = static_cast<float>(base[i] - epsilon);
        // divide by the step actually realized in storage, not the nominal
        // one, so probe-point quantization does not bias the estimate
        const double h = static_cast<double>(vp[i]) - static_cast<double>(vm[i]);
        const double fp = probe(Tensor(x.shape(), std::move(vp)));
        const double fm = probe(Tensor(x.shape(), std::move(vm)));
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("grad_check: non-finite probe value");
        const double numeric = (fp - fm) / h;
        const double rel = std::abs(analytic.values()[i] - numeric) / std::max(1e-8, std::abs(numeric));
        worst = std::max(worst, rel);
    }
    return worst;
}

inline double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& x,
                         double epsilon) {
    return grad_check(fn, [&fn](const Tensor& t) { return static_cast<double>(fn(t).item()); }, x,
                      epsilon);
}

}  // namespace esegeta
