#pragma once

#include <chrono>
#include <numeric>

#include "autodiff.hpp"
#include "target.hpp"

// Model-level attribution methods. Every method takes a ScoreTarget (the
// wrapper scalar for the chosen class, mask already frozen from the clean
// input), the input tensor, and method parameters, and produces a map with
// the input's exact shape. Monte-Carlo loops draw from counter-based RNG
// streams keyed on (seed, sample index) and accumulate in double in fixed
// index order, so results are bit-reproducible under any parallel schedule.
namespace esegeta {

struct AttributionMap {
    Tensor values;           // same shape as the method input
    std::string method_id;
    double elapsed_ms = 0.0;
    std::string params;      // key=value echo of the parameters actually used
    int target_class = -1;   // filled by callers that know the wrapper class
};

// Perturbation parameters for occlusion- and mask-style methods.
struct PerturbSpec {
    std::vector<int> window;   // per spatial dim (occlusion)
    std::vector<int> stride;   // per spatial dim (occlusion)
    Baseline baseline;         // replacement content
    int mask_grid = 7;         // low-resolution cells per spatial dim (RISE)
    int samples = 1000;        // Monte-Carlo sample count (RISE)
    float keep_prob = 0.5f;    // Bernoulli keep probability (RISE)
    uint64_t seed = 0;
};

// Partition of the spatial extent into an axis-aligned grid of patches.
// Patch boundaries along dim d split extent E into counts[d] contiguous
// runs [i*E/c, (i+1)*E/c).
struct PatchGrid {
    std::vector<int> counts;  // patches per spatial dim

    int patch_count() const {
        int n = 1;
        for (int c : counts) n *= c;
        return n;
    }

    // Patch index for every spatial position, row-major over spatial dims.
    std::vector<int> assignment(const std::vector<int>& spatial) const {
        if (counts.size() != spatial.size())
            throw std::invalid_argument("patch grid: rank " + std::to_string(counts.size()) +
                                        " does not match spatial rank " + std::to_string(spatial.size()));
        for (size_t d = 0; d < counts.size(); ++d) {
            if (counts[d] < 1) throw std::invalid_argument("patch grid: counts must be >= 1");
            if (counts[d] > spatial[d])
                throw std::invalid_argument("patch grid: " + std::to_string(counts[d]) +
                                            " patches exceed extent " + std::to_string(spatial[d]));
        }
        int64_t plane = 1;
        for (int e : spatial) plane *= e;
        std::vector<int> out(static_cast<size_t>(plane));
        std::vector<int> coord(spatial.size(), 0);
        for (int64_t p = 0; p < plane; ++p) {
            int64_t rem = p;
            for (int d = static_cast<int>(spatial.size()) - 1; d >= 0; --d) {
                coord[d] = static_cast<int>(rem % spatial[d]);
                rem /= spatial[d];
            }
            int idx = 0;
            for (size_t d = 0; d < spatial.size(); ++d) {
                // run i covers [i*E/c, (i+1)*E/c); closed form of the boundary search
                const int run = static_cast<int>(
                    ((static_cast<int64_t>(coord[d]) + 1) * counts[d] - 1) / spatial[d]);
                idx = idx * counts[d] + run;
            }
            out[static_cast<size_t>(p)] = idx;
        }
        return out;
    }
};

namespace detail {

inline std::vector<int> spatial_of(const std::vector<int>& shape) {
    if (shape.size() < 3)
        throw std::invalid_argument("attribution: input must be [B,C,spatial...], got " +
                                    shape_to_string(shape));
    return std::vector<int>(shape.begin() + 2, shape.end());
}

inline void ensure_finite(const Tensor& t, const std::string& method_id) {
    for (float v : t.values())
        if (!std::isfinite(v))
            throw std::runtime_error(method_id + ": produced a non-finite attribution value");
}

inline double elapsed_ms_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline std::string ints_csv(const std::vector<int>& v) {
    std::string s;
    for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

// d(score)/d(input) under the given backward policy.
inline Tensor input_gradient(const ScoreTarget& target, const Tensor& x, BackwardPolicy policy,
                             const std::string& method_id) {
    Tensor xg = x.with_requires_grad();
    Tensor s = target.score(xg);
    if (s.numel() != 1) throw std::runtime_error(method_id + ": target returned a non-scalar score");
    backward(s, policy);
    Tensor g = xg.grad();
    ensure_finite(g, method_id);
    return g;
}

// b + alpha * (x - b), computed in double, stored f32.
inline Tensor lerp_input(const Tensor& b, const Tensor& x, double alpha) {
    std::vector<float> v(static_cast<size_t>(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i)
        v[static_cast<size_t>(i)] = static_cast<float>(
            static_cast<double>(b.values()[i]) +
            alpha * (static_cast<double>(x.values()[i]) - static_cast<double>(b.values()[i])));
    return Tensor(x.shape(), std::move(v));
}

// Arbitrary-size spatial resize of [B,C,spatial...] values with half-pixel
// centers; linear interpolation clamps at the border (matching the graph
// upsample op), nearest picks the cell the pixel center falls into.
inline std::vector<float> resize_spatial(std::span<const float> in, const std::vector<int>& shape,
                                         const std::vector<int>& out_sp, bool linear) {
    const std::vector<int> in_sp = spatial_of(shape);
    if (in_sp.size() != out_sp.size())
        throw std::invalid_argument("resize: rank mismatch");
    const int rank = static_cast<int>(in_sp.size());
    int64_t in_plane = 1, out_plane = 1;
    for (int r = 0; r < rank; ++r) {
        in_plane *= in_sp[r];
        out_plane *= out_sp[r];
    }
    const int bc = shape[0] * shape[1];
    std::vector<float> out(static_cast<size_t>(bc) * out_plane);
    std::vector<int> oc(rank), lo(rank);
    std::vector<double> frac(rank);
    for (int64_t of = 0; of < out_plane; ++of) {
        int64_t rem = of;
        for (int r = rank - 1; r >= 0; --r) {
            oc[r] = static_cast<int>(rem % out_sp[r]);
            rem /= out_sp[r];
        }
        if (linear) {
            for (int r = 0; r < rank; ++r) {
                const double src =
                    (oc[r] + 0.5) * static_cast<double>(in_sp[r]) / static_cast<double>(out_sp[r]) - 0.5;
                const double clamped = std::min(std::max(src, 0.0), static_cast<double>(in_sp[r] - 1));
                lo[r] = static_cast<int>(clamped);
                if (lo[r] > in_sp[r] - 2) lo[r] = std::max(0, in_sp[r] - 2);
                frac[r] = in_sp[r] == 1 ? 0.0 : clamped - lo[r];
            }
            for (int p = 0; p < bc; ++p) {
                double acc = 0.0;
                for (int corner = 0; corner < (1 << rank); ++corner) {
                    double w = 1.0;
                    int64_t flat = 0;
                    for (int r = 0; r < rank; ++r) {
                        const int hi = (corner >> r) & 1;
                        w *= hi ? frac[r] : 1.0 - frac[r];
                        const int idx = std::min(lo[r] + hi, in_sp[r] - 1);
                        flat = flat * in_sp[r] + idx;
                    }
                    if (w != 0.0) acc += w * in[static_cast<size_t>(p * in_plane + flat)];
                }
                out[static_cast<size_t>(p * out_plane + of)] = static_cast<float>(acc);
            }
        } else {
            int64_t flat = 0;
            for (int r = 0; r < rank; ++r) {
                int idx = static_cast<int>((oc[r] + 0.5) * static_cast<double>(in_sp[r]) /
                                           static_cast<double>(out_sp[r]));
                idx = std::min(std::max(idx, 0), in_sp[r] - 1);
                flat = flat * in_sp[r] + idx;
            }
            for (int p = 0; p < bc; ++p)
                out[static_cast<size_t>(p * out_plane + of)] = in[static_cast<size_t>(p * in_plane + flat)];
        }
    }
    return out;
}

// Cholesky solve of a symmetric positive-definite system (row-major n x n).
inline std::vector<double> solve_spd(std::vector<double> a, std::vector<double> rhs, int n) {
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a[static_cast<size_t>(i) * n + j];
            for (int k = 0; k < j; ++k)
                s -= a[static_cast<size_t>(i) * n + k] * a[static_cast<size_t>(j) * n + k];
            if (i == j) {
                if (s <= 0.0) throw std::runtime_error("regression: singular weighted system");
                a[static_cast<size_t>(i) * n + j] = std::sqrt(s);
            } else {
                a[static_cast<size_t>(i) * n + j] = s / a[static_cast<size_t>(j) * n + j];
            }
        }
    }
    for (int i = 0; i < n; ++i) {
        double s = rhs[static_cast<size_t>(i)];
        for (int k = 0; k < i; ++k) s -= a[static_cast<size_t>(i) * n + k] * rhs[static_cast<size_t>(k)];
        rhs[static_cast<size_t>(i)] = s / a[static_cast<size_t>(i) * n + i];
    }
    for (int i = n - 1; i >= 0; --i) {
        double s = rhs[static_cast<size_t>(i)];
        for (int k = i + 1; k < n; ++k)
            s -= a[static_cast<size_t>(k) * n + i] * rhs[static_cast<size_t>(k)];
        rhs[static_cast<size_t>(i)] = s / a[static_cast<size_t>(i) * n + i];
    }
    return rhs;
}

// Paints one value per patch/group onto every covered input element.
inline Tensor paint_groups(const std::vector<int>& shape, const std::vector<int>& group_of_element,
                           const std::vector<double>& value_of_group) {
    std::vector<float> v(group_of_element.size());
    for (size_t i = 0; i < v.size(); ++i)
        v[i] = static_cast<float>(value_of_group[static_cast<size_t>(group_of_element[i])]);
    return Tensor(shape, std::move(v));
}

// Full-input-shape element -> group map from a spatial patch grid (batch and
// channel dims share the spatial patch).
inline std::vector<int> grid_groups(const std::vector<int>& shape, const PatchGrid& grid) {
    const std::vector<int> sp = spatial_of(shape);
    const std::vector<int> spatial_groups = grid.assignment(sp);
    const int bc = shape[0] * shape[1];
    std::vector<int> out(static_cast<size_t>(bc) * spatial_groups.size());
    for (int p = 0; p < bc; ++p)
        std::copy(spatial_groups.begin(), spatial_groups.end(),
                  out.begin() + static_cast<int64_t>(p) * static_cast<int64_t>(spatial_groups.size()));
    return out;
}

}  // namespace detail

// Spatial grid grouping as an input-shaped tensor of group ids, for the
// grouped perturbation methods.
inline Tensor make_group_grid(const std::vector<int>& input_shape, const PatchGrid& grid) {
    const std::vector<int> ids = detail::grid_groups(input_shape, grid);
    std::vector<float> v(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) v[i] = static_cast<float>(ids[i]);
    return Tensor(input_shape, std::move(v));
}

// ------------------------------------------------------- gradient family ---

// d(score)/d(input); absolute value when signed_map is false.
inline AttributionMap saliency(const ScoreTarget& target, const Tensor& x, bool signed_map = true) {
    const auto t0 = std::chrono::steady_clock::now();
    Tensor g = detail::input_gradient(target, x, BackwardPolicy::Standard, "saliency");
    if (!signed_map) {
        std::vector<float> v(g.values().begin(), g.values().end());
        for (auto& e : v) e = std::abs(e);
        g = Tensor(x.shape(), std::move(v));
    }
    return {g, "saliency", detail::elapsed_ms_since(t0),
            signed_map ? "signed=true" : "signed=false"};
}

inline AttributionMap input_x_gradient(const ScoreTarget& target, const Tensor& x) {
    const auto t0 = std::chrono::steady_clock::now();
    Tensor g = detail::input_gradient(target, x, BackwardPolicy::Standard, "input_x_gradient");
    std::vector<float> v(static_cast<size_t>(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i)
        v[static_cast<size_t>(i)] = x.values()[i] * g.values()[i];
    return {Tensor(x.shape(), std::move(v)), "input_x_gradient", detail::elapsed_ms_since(t0)};
}

inline AttributionMap guided_backprop(const ScoreTarget& target, const Tensor& x) {
    const auto t0 = std::chrono::steady_clock::now();
    Tensor g = detail::input_gradient(target, x, BackwardPolicy::Guided, "guided_backprop");
    return {g, "guided_backprop", detail::elapsed_ms_since(t0)};
}

inline AttributionMap deconvolution(const ScoreTarget& target, const Tensor& x) {
    const auto t0 = std::chrono::steady_clock::now();
    Tensor g = detail::input_gradient(target, x, BackwardPolicy::Deconv, "deconvolution");
    return {g, "deconvolution", detail::elapsed_ms_since(t0)};
}

// ----------------------------------------------------------- path family ---

// Midpoint-Riemann path integral: (x - x') * mean_k grad(x' + a_k (x - x')),
// a_k = (k - 0.5) / m.
inline AttributionMap integrated_gradients(const ScoreTarget& target, const Tensor& x,
                                           const Baseline& baseline, int steps = 50,
                                           const CancelToken& cancel = {}) {
    if (steps < 1) throw std::invalid_argument("integrated_gradients: steps must be >= 1");
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor b = baseline.materialize(x.shape());
    std::vector<double> acc(static_cast<size_t>(x.numel()), 0.0);
    for (int k = 1; k <= steps; ++k) {
        cancel.check("integrated_gradients");
        const double alpha = (k - 0.5) / static_cast<double>(steps);
        Tensor g = detail::input_gradient(target, detail::lerp_input(b, x, alpha),
                                          BackwardPolicy::Standard, "integrated_gradients");
        for (int64_t i = 0; i < x.numel(); ++i) acc[static_cast<size_t>(i)] += g.values()[i];
    }
    std::vector<float> v(static_cast<size_t>(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i)
        v[static_cast<size_t>(i)] = static_cast<float>(
            (static_cast<double>(x.values()[i]) - static_cast<double>(b.values()[i])) *
            acc[static_cast<size_t>(i)] / steps);
    return {Tensor(x.shape(), std::move(v)), "integrated_gradients", detail::elapsed_ms_since(t0),
            "steps=" + std::to_string(steps)};
}

enum class SmoothInner { Saliency, InputXGradient, GuidedBackprop };

inline SmoothInner smooth_inner_from_string(const std::string& s) {
    if (s == "saliency") return SmoothInner::Saliency;
    if (s == "input_x_gradient") return SmoothInner::InputXGradient;
    if (s == "guided_backprop") return SmoothInner::GuidedBackprop;
    throw std::invalid_argument("smoothgrad: unsupported inner method '" + s + "'");
}

// Mean of the inner method's maps over n noisy copies x + N(0, sigma^2).
inline AttributionMap smoothgrad(const ScoreTarget& target, const Tensor& x, SmoothInner inner,
                                 int n, float sigma, uint64_t seed, const CancelToken& cancel = {}) {
    if (n < 1) throw std::invalid_argument("smoothgrad: sample count must be >= 1");
    if (sigma < 0.0f) throw std::invalid_argument("smoothgrad: sigma must be >= 0");
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<double> acc(static_cast<size_t>(x.numel()), 0.0);
    for (int j = 0; j < n; ++j) {
        cancel.check("smoothgrad");
        Rng rng = stream_rng(seed, static_cast<uint64_t>(j));
        std::vector<float> noisy(static_cast<size_t>(x.numel()));
        for (int64_t i = 0; i < x.numel(); ++i)
            noisy[static_cast<size_t>(i)] =
                static_cast<float>(static_cast<double>(x.values()[i]) + rng.normal() * sigma);
        const Tensor xn(x.shape(), std::move(noisy));
        AttributionMap m;
        switch (inner) {
            case SmoothInner::Saliency: m = saliency(target, xn); break;
            case SmoothInner::InputXGradient: m = input_x_gradient(target, xn); break;
            case SmoothInner::GuidedBackprop: m = guided_backprop(target, xn); break;
        }
        for (int64_t i = 0; i < x.numel(); ++i) acc[static_cast<size_t>(i)] += m.values.values()[i];
    }
    std::vector<float> v(static_cast<size_t>(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i)
        v[static_cast<size_t>(i)] = static_cast<float>(acc[static_cast<size_t>(i)] / n);
    return {Tensor(x.shape(), std::move(v)), "smoothgrad", detail::elapsed_ms_since(t0),
            "n=" + std::to_string(n) + ";sigma=" + std::to_string(sigma) + ";seed=" +
                std::to_string(seed)};
}

// Average of (x - b) * grad at b + u (x - b) + N(0, sigma^2), u ~ U(0,1),
// b drawn from the baseline distribution per sample.
inline AttributionMap gradient_shap(const ScoreTarget& target, const Tensor& x,
                                    const Baseline& baseline, int n, float sigma, uint64_t seed,
                                    const CancelToken& cancel = {}) {
    if (n < 1) throw std::invalid_argument("gradient_shap: sample count must be >= 1");
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<double> acc(static_cast<size_t>(x.numel()), 0.0);
    for (int j = 0; j < n; ++j) {
        cancel.check("gradient_shap");
        Rng rng = stream_rng(seed, static_cast<uint64_t>(j));
        const Tensor b = baseline.materialize(x.shape(), static_cast<uint64_t>(j));
        const double u = rng.uniform();
        std::vector<float> pt(static_cast<size_t>(x.numel()));
        for (int64_t i = 0; i < x.numel(); ++i) {
            const double base = b.values()[i];
            const double noise = sigma > 0.0f ? rng.normal() * sigma : 0.0;
            pt[static_cast<size_t>(i)] = static_cast<float>(
                base + u * (static_cast<double>(x.values()[i]) - base) + noise);
        }
        Tensor g = detail::input_gradient(target, Tensor(x.shape(), std::move(pt)),
                                          BackwardPolicy::Standard, "gradient_shap");
        for (int64_t i = 0; i < x.numel(); ++i)
            acc[static_cast<size_t>(i)] +=
                (static_cast<double>(x.values()[i]) - static_cast<double>(b.values()[i])) *
                g.values()[i];
    }
    std::vector<float> v(static_cast<size_t>(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i)
        v[static_cast<size_t>(i)] = static_cast<float>(acc[static_cast<size_t>(i)] / n);
    return {Tensor(x.shape(), std::move(v)), "gradient_shap", detail::elapsed_ms_since(t0),
            "n=" + std::to_string(n) + ";sigma=" + std::to_string(sigma) + ";seed=" +
                std::to_string(seed)};
}

// --------------------------------------------------------------- deeplift ---

// Rescale-rule contributions. Linear ops propagate multipliers through their
// weights exactly like gradients; ReLU-family nodes use delta-out/delta-in
// when the input delta is meaningful, else the local gradient. The final map
// multiplier * (x - x') satisfies summation-to-delta by construction.
inline AttributionMap deeplift_rescale(const ScoreTarget& target, const Tensor& x,
                                       const Baseline& baseline) {
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor b = baseline.materialize(x.shape());

    Tensor xg = x.with_requires_grad();
    Tensor sx = target.score(xg);
    Tensor bg = b.with_requires_grad();
    Tensor sb = target.score(bg);

    const auto gx = detail::resolve_graph(sx.graph());
    const auto gb = detail::resolve_graph(sb.graph());
    if (!gx || !gb) throw std::runtime_error("deeplift: target recorded no ops");
    if (gx->ops.size() != gb->ops.size())
        throw std::runtime_error("deeplift: input and baseline recorded different graphs");

    const auto tracked = [](const std::shared_ptr<detail::TensorData>& td) {
        return td->requires_grad;
    };
    for (const auto& rec : gx->ops) {
        switch (rec.kind) {
            case OpKind::Conv2d:
            case OpKind::Conv3d:
            case OpKind::Linear:
            case OpKind::Add:
            case OpKind::Concat:
            case OpKind::Relu:
            case OpKind::LeakyRelu:
            case OpKind::Sum:
            case OpKind::Mean:
            case OpKind::Reshape:
                break;
            case OpKind::Mul:
                if (tracked(rec.inputs[0]) && tracked(rec.inputs[1]))
                    throw std::invalid_argument(
                        "deeplift: multiplication of two input-dependent paths is not supported");
                break;
            default:
                throw std::invalid_argument("deeplift: unsupported op '" +
                                            std::string(op_name(rec.kind)) + "' in the model graph");
        }
    }

    // multiplier pass: reuse the standard backward for linear ops, replace
    // the activation rule with the rescale coefficient
    for (const auto& rec : gx->ops) {
        for (const auto& in : rec.inputs)
            if (in->requires_grad) in->grad.assign(in->values.size(), 0.0f);
        rec.output->grad.assign(rec.output->values.size(), 0.0f);
    }
    sx.impl()->grad.assign(1, 1.0f);

    for (size_t ri = gx->ops.size(); ri-- > 0;) {
        const auto& rec = gx->ops[ri];
        const auto& ref = gb->ops[ri];
        if (rec.kind != ref.kind)
            throw std::runtime_error("deeplift: input and baseline graphs diverge at op " +
                                     std::to_string(ri));
        bool any = false;
        for (float v : rec.output->grad)
            if (v != 0.0f) {
                any = true;
                break;
            }
        if (!any) continue;

        if (rec.kind == OpKind::Relu || rec.kind == OpKind::LeakyRelu) {
            const auto& xin = rec.inputs[0]->values;
            const auto& xout = rec.output->values;
            const auto& bin = ref.inputs[0]->values;
            const auto& bout = ref.output->values;
            const auto& mo = rec.output->grad;
            const double slope = rec.kind == OpKind::LeakyRelu ? rec.fparams[0] : 0.0;
            std::vector<double> mi(xin.size(), 0.0);
            for (size_t i = 0; i < xin.size(); ++i) {
                const double din = static_cast<double>(xin[i]) - static_cast<double>(bin[i]);
                double c;
                if (std::abs(din) > 1e-7) {
                    c = (static_cast<double>(xout[i]) - static_cast<double>(bout[i])) / din;
                } else {
                    c = xin[i] > 0.0f ? 1.0 : slope;
                }
                mi[i] = static_cast<double>(mo[i]) * c;
            }
            detail::fold_grad(rec.inputs[0], mi);
        } else {
            detail::backward_record(rec, BackwardPolicy::Standard);
        }
    }

    std::vector<float> v(static_cast<size_t>(x.numel()));
    const auto& mult = xg.impl()->grad;
    for (int64_t i = 0; i < x.numel(); ++i)
        v[static_cast<size_t>(i)] = static_cast<float>(
            static_cast<double>(mult[static_cast<size_t>(i)]) *
            (static_cast<double>(x.values()[i]) - static_cast<double>(b.values()[i])));
    Tensor map(x.shape(), std::move(v));
    detail::ensure_finite(map, "deeplift");
    return {map, "deeplift", detail::elapsed_ms_since(t0)};
}

// ------------------------------------------------------------- CAM family ---

// Channel weights = spatial mean of d(score)/dA; map = ReLU(sum_k w_k A_k)
// resized to the input's spatial extent and broadcast over input channels.
inline AttributionMap gradcam(const ScoreTarget& target, const Tensor& x, const std::string& layer,
                              bool linear_upsample = true) {
    const auto t0 = std::chrono::steady_clock::now();
    Tensor xg = x.with_requires_grad();
    auto [score, act] = target.tapped(xg, layer);
    if (act.ndim() < 3)
        throw std::invalid_argument("gradcam: layer '" + layer + "' has no spatial dims (shape " +
                                    shape_to_string(act.shape()) + ")");
    backward(score);
    if (!act.has_grad()) throw std::runtime_error("gradcam: layer '" + layer + "' received no gradient");
    const Tensor ag = act.grad();

    const auto& as = act.shape();
    const int B = as[0], K = as[1];
    int64_t plane = 1;
    for (size_t i = 2; i < as.size(); ++i) plane *= as[i];

    std::vector<float> cam(static_cast<size_t>(B) * plane, 0.0f);
    for (int bi = 0; bi < B; ++bi) {
        for (int64_t p = 0; p < plane; ++p) {
            double s = 0.0;
            for (int k = 0; k < K; ++k) {
                const int64_t base = (static_cast<int64_t>(bi) * K + k) * plane;
                double w = 0.0;
                for (int64_t q = 0; q < plane; ++q) w += ag.values()[base + q];
                w /= static_cast<double>(plane);
                s += w * static_cast<double>(act.values()[base + p]);
            }
            cam[static_cast<size_t>(bi * plane + p)] = static_cast<float>(std::max(s, 0.0));
        }
    }

    std::vector<int> cam_shape = {B, 1};
    for (size_t i = 2; i < as.size(); ++i) cam_shape.push_back(as[i]);
    const std::vector<int> in_sp = detail::spatial_of(x.shape());
    const std::vector<float> up =
        detail::resize_spatial(std::span<const float>(cam), cam_shape, in_sp, linear_upsample);

    int64_t in_plane = 1;
    for (int e : in_sp) in_plane *= e;
    const int C = x.shape()[1];
    std::vector<float> v(static_cast<size_t>(x.numel()));
    for (int bi = 0; bi < B; ++bi)
        for (int c = 0; c < C; ++c)
            for (int64_t p = 0; p < in_plane; ++p)
                v[(static_cast<int64_t>(bi) * C + c) * in_plane + p] =
                    up[static_cast<size_t>(bi * in_plane + p)];
    Tensor map(x.shape(), std::move(v));
    detail::ensure_finite(map, "gradcam");
    return {map, "gradcam", detail::elapsed_ms_since(t0),
            "layer=" + layer + (linear_upsample ? ";interpolation=linear" : ";interpolation=nearest")};
}

inline AttributionMap guided_gradcam(const ScoreTarget& target, const Tensor& x,
                                     const std::string& layer) {
    const auto t0 = std::chrono::steady_clock::now();
    const AttributionMap gb = guided_backprop(target, x);
    const AttributionMap gc = gradcam(target, x, layer);
    std::vector<float> v(static_cast<size_t>(x.numel()));
    for (int64_t i = 0; i < x.numel(); ++i)
        v[static_cast<size_t>(i)] = gb.values.values()[i] * gc.values.values()[i];
    return {Tensor(x.shape(), std::move(v)), "guided_gradcam", detail::elapsed_ms_since(t0),
            "layer=" + layer};
}

// Per activation channel k: mask = min-max-normalized upsampled A_k;
// alpha_k = score(x * mask) - score(baseline); map = ReLU(sum alpha_k up(A_k)).
// Channels whose upsampled map is constant are skipped with weight 0.
inline AttributionMap scorecam(const ScoreTarget& target, const Tensor& x, const std::string& layer,
                               const Baseline& baseline, const CancelToken& cancel = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    auto [score, act] = target.tapped(x.detach(), layer);
    (void)score;
    if (act.ndim() < 3)
        throw std::invalid_argument("scorecam: layer '" + layer + "' has no spatial dims");

    const auto& as = act.shape();
    const int B = as[0], K = as[1];
    const std::vector<int> in_sp = detail::spatial_of(x.shape());
    int64_t in_plane = 1;
    for (int e : in_sp) in_plane *= e;
    const int C = x.shape()[1];

    const double base_score = target.value(baseline.materialize(x.shape()));

    std::vector<double> weighted(static_cast<size_t>(B) * in_plane, 0.0);
    int used = 0;
    for (int k = 0; k < K; ++k) {
        cancel.check("scorecam");
        // channel k as a [B,1,spatial] slice
        int64_t plane = 1;
        for (size_t i = 2; i < as.size(); ++i) plane *= as[i];
        std::vector<float> chan(static_cast<size_t>(B) * plane);
        for (int bi = 0; bi < B; ++bi)
            for (int64_t p = 0; p < plane; ++p)
                chan[static_cast<size_t>(bi * plane + p)] =
                    act.values()[(static_cast<int64_t>(bi) * K + k) * plane + p];
        std::vector<int> chan_shape = {B, 1};
        for (size_t i = 2; i < as.size(); ++i) chan_shape.push_back(as[i]);
        const std::vector<float> up =
            detail::resize_spatial(std::span<const float>(chan), chan_shape, in_sp, true);

        float lo = up[0], hi = up[0];
        for (float vv : up) {
            lo = std::min(lo, vv);
            hi = std::max(hi, vv);
        }
        if (lo == hi) continue;  // degenerate map: weight 0
        ++used;

        std::vector<float> masked(static_cast<size_t>(x.numel()));
        const double inv = 1.0 / (static_cast<double>(hi) - lo);
        for (int bi = 0; bi < B; ++bi)
            for (int c = 0; c < C; ++c)
                for (int64_t p = 0; p < in_plane; ++p) {
                    const double m = (up[static_cast<size_t>(bi * in_plane + p)] - lo) * inv;
                    masked[(static_cast<int64_t>(bi) * C + c) * in_plane + p] =
                        static_cast<float>(x.values()[(static_cast<int64_t>(bi) * C + c) * in_plane + p] * m);
                }
        const double alpha = target.value(Tensor(x.shape(), std::move(masked))) - base_score;
        for (size_t i = 0; i < weighted.size(); ++i)
            weighted[i] += alpha * static_cast<double>(up[i]);
    }
    if (used == 0) throw std::runtime_error("scorecam: all channel maps are degenerate at layer '" + layer + "'");

    std::vector<float> v(static_cast<size_t>(x.numel()));
    for (int bi = 0; bi < B; ++bi)
        for (int c = 0; c < C; ++c)
            for (int64_t p = 0; p < in_plane; ++p)
                v[(static_cast<int64_t>(bi) * C + c) * in_plane + p] = static_cast<float>(
                    std::max(weighted[static_cast<size_t>(bi * in_plane + p)], 0.0));
    Tensor map(x.shape(), std::move(v));
    detail::ensure_finite(map, "scorecam");
    return {map, "scorecam", detail::elapsed_ms_since(t0), "layer=" + layer};
}

// ---------------------------------------------------- perturbation family ---

namespace detail {

// Sliding-window start positions: 0, stride, 2*stride, ... with a final
// clamped placement so the tail is always covered.
inline std::vector<int> window_positions(int extent, int window, int stride) {
    std::vector<int> pos;
    for (int p = 0; p + window <= extent; p += stride) pos.push_back(p);
    if (pos.empty() || pos.back() != extent - window) pos.push_back(extent - window);
    return pos;
}

}  // namespace detail

// score(x) - score(x with the window replaced by baseline), accumulated per
// element over all window placements and divided by its coverage count.
inline AttributionMap occlusion(const ScoreTarget& target, const Tensor& x, const PerturbSpec& spec,
                                const CancelToken& cancel = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<int> sp = detail::spatial_of(x.shape());
    const int rank = static_cast<int>(sp.size());
    std::vector<int> window = spec.window, stride = spec.stride;
    if (window.empty()) window.assign(static_cast<size_t>(rank), 4);
    if (stride.empty()) stride.assign(static_cast<size_t>(rank), 2);
    if (static_cast<int>(window.size()) != rank || static_cast<int>(stride.size()) != rank)
        throw std::invalid_argument("occlusion: window/stride rank does not match input spatial rank");
    for (int r = 0; r < rank; ++r) {
        if (window[r] < 1 || window[r] > sp[r])
            throw std::invalid_argument("occlusion: window extent " + std::to_string(window[r]) +
                                        " invalid for spatial extent " + std::to_string(sp[r]));
        if (stride[r] < 1) throw std::invalid_argument("occlusion: stride must be >= 1");
    }

    const Tensor b = spec.baseline.materialize(x.shape());
    const double score0 = target.value(x);

    std::vector<std::vector<int>> positions(static_cast<size_t>(rank));
    for (int r = 0; r < rank; ++r)
        positions[static_cast<size_t>(r)] = detail::window_positions(sp[r], window[r], stride[r]);

    int64_t plane = 1;
    for (int e : sp) plane *= e;
    const int bc = x.shape()[0] * x.shape()[1];
    std::vector<double> acc(static_cast<size_t>(x.numel()), 0.0);
    std::vector<int64_t> coverage(static_cast<size_t>(plane), 0);

    std::vector<int> cursor(static_cast<size_t>(rank), 0);
    bool done = false;
    while (!done) {
        cancel.check("occlusion");
        // spatial offsets inside the current window
        std::vector<int64_t> window_flat;
        std::vector<int> wc(static_cast<size_t>(rank), 0);
        bool wdone = false;
        while (!wdone) {
            int64_t flat = 0;
            for (int r = 0; r < rank; ++r)
                flat = flat * sp[r] + positions[static_cast<size_t>(r)][static_cast<size_t>(cursor[r])] + wc[r];
            window_flat.push_back(flat);
            int r = rank - 1;
            while (r >= 0 && ++wc[r] == window[r]) wc[r--] = 0;
            wdone = r < 0;
        }

        std::vector<float> pert(x.values().begin(), x.values().end());
        for (int p = 0; p < bc; ++p)
            for (int64_t f : window_flat)
                pert[static_cast<size_t>(p * plane + f)] = b.values()[p * plane + f];
        const double delta = score0 - target.value(Tensor(x.shape(), std::move(pert)));

        for (int64_t f : window_flat) {
            ++coverage[static_cast<size_t>(f)];
            for (int p = 0; p < bc; ++p) acc[static_cast<size_t>(p * plane + f)] += delta;
        }

        int r = rank - 1;
        while (r >= 0 && ++cursor[r] == static_cast<int>(positions[static_cast<size_t>(r)].size()))
            cursor[r--] = 0;
        done = r < 0;
    }

    std::vector<float> v(static_cast<size_t>(x.numel()));
    for (int p = 0; p < bc; ++p)
        for (int64_t f = 0; f < plane; ++f)
            v[static_cast<size_t>(p * plane + f)] = static_cast<float>(
                acc[static_cast<size_t>(p * plane + f)] / static_cast<double>(coverage[static_cast<size_t>(f)]));
    return {Tensor(x.shape(), std::move(v)), "occlusion", detail::elapsed_ms_since(t0),
            "window=" + detail::ints_csv(window) + ";stride=" + detail::ints_csv(stride)};
}

// Per group g: every element of g receives score(x) - score(x with group g
// replaced by the baseline).
inline AttributionMap feature_ablation(const ScoreTarget& target, const Tensor& x,
                                       const Tensor& groups, const Baseline& baseline,
                                       const CancelToken& cancel = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    if (!groups.defined() || groups.shape() != x.shape())
        throw std::invalid_argument("feature_ablation: group mask shape must equal input shape");
    std::vector<int> gid(static_cast<size_t>(x.numel()));
    int max_id = -1;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const int id = static_cast<int>(std::lround(groups.values()[i]));
        if (id < 0) throw std::invalid_argument("feature_ablation: group ids must be >= 0");
        gid[static_cast<size_t>(i)] = id;
        max_id = std::max(max_id, id);
    }
    if (max_id < 0) throw std::invalid_argument("feature_ablation: empty group mask");

    std::vector<std::vector<int64_t>> members(static_cast<size_t>(max_id) + 1);
    for (int64_t i = 0; i < x.numel(); ++i) members[static_cast<size_t>(gid[static_cast<size_t>(i)])].push_back(i);

    const Tensor b = baseline.materialize(x.shape());
    const double score0 = target.value(x);
    std::vector<double> delta(members.size(), 0.0);
    for (size_t g = 0; g < members.size(); ++g) {
        if (members[g].empty()) continue;
        cancel.check("feature_ablation");
        std::vector<float> pert(x.values().begin(), x.values().end());
        for (int64_t i : members[g]) pert[static_cast<size_t>(i)] = b.values()[i];
        delta[g] = score0 - target.value(Tensor(x.shape(), std::move(pert)));
    }
    return {detail::paint_groups(x.shape(), gid, delta), "feature_ablation",
            detail::elapsed_ms_since(t0)};
}

// Per feature position, values are rotated across the batch by a seeded
// nonzero offset (so no element keeps its own value); each element's
// attribution at that position is score(original) - score(permuted).
inline std::vector<AttributionMap> feature_permutation(const ScoreTarget& target,
                                                       const std::vector<Tensor>& batch,
                                                       uint64_t seed,
                                                       const CancelToken& cancel = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    const int B = static_cast<int>(batch.size());
    if (B < 2) throw std::invalid_argument("feature_permutation: batch must contain at least 2 inputs");
    for (const Tensor& t : batch)
        if (t.shape() != batch[0].shape())
            throw std::invalid_argument("feature_permutation: batch inputs must share one shape");

    const int64_t numel = batch[0].numel();
    std::vector<double> score0(static_cast<size_t>(B));
    for (int j = 0; j < B; ++j) score0[static_cast<size_t>(j)] = target.value(batch[j]);

    std::vector<std::vector<double>> acc(static_cast<size_t>(B),
                                         std::vector<double>(static_cast<size_t>(numel), 0.0));
    for (int64_t f = 0; f < numel; ++f) {
        cancel.check("feature_permutation");
        Rng rng = stream_rng(seed, static_cast<uint64_t>(f));
        const int rot = 1 + rng.below(B - 1);
        for (int j = 0; j < B; ++j) {
            const int src = (j + rot) % B;
            std::vector<float> pert(batch[j].values().begin(), batch[j].values().end());
            pert[static_cast<size_t>(f)] = batch[src].values()[f];
            acc[static_cast<size_t>(j)][static_cast<size_t>(f)] =
                score0[static_cast<size_t>(j)] - target.value(Tensor(batch[j].shape(), std::move(pert)));
        }
    }

    std::vector<AttributionMap> out;
    out.reserve(static_cast<size_t>(B));
    const double ms = detail::elapsed_ms_since(t0);
    for (int j = 0; j < B; ++j) {
        std::vector<float> v(static_cast<size_t>(numel));
        for (int64_t i = 0; i < numel; ++i)
            v[static_cast<size_t>(i)] = static_cast<float>(acc[static_cast<size_t>(j)][static_cast<size_t>(i)]);
        out.push_back({Tensor(batch[0].shape(), std::move(v)), "feature_permutation", ms,
                       "seed=" + std::to_string(seed)});
    }
    return out;
}

// Unbiased permutation-sampling estimator of Shapley values: walk features
// from the baseline to x in sampled permutation order, crediting marginal
// score changes. `groups` (input-shaped ids) coarsens the feature set; when
// undefined every element is its own feature. `exhaustive` enumerates all
// permutations instead of sampling (feature count <= 8).
inline AttributionMap shapley_value_sampling(const ScoreTarget& target, const Tensor& x,
                                             const Baseline& baseline, int permutations,
                                             uint64_t seed, bool exhaustive = false,
                                             const Tensor& groups = {},
                                             const CancelToken& cancel = {}) {
    if (permutations < 1 && !exhaustive)
        throw std::invalid_argument("shapley_value_sampling: permutations must be >= 1");
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<int> gid(static_cast<size_t>(x.numel()));
    if (groups.defined()) {
        if (groups.shape() != x.shape())
            throw std::invalid_argument("shapley_value_sampling: group mask shape must equal input shape");
        for (int64_t i = 0; i < x.numel(); ++i)
            gid[static_cast<size_t>(i)] = static_cast<int>(std::lround(groups.values()[i]));
    } else {
        std::iota(gid.begin(), gid.end(), 0);
    }
    const int F = 1 + *std::max_element(gid.begin(), gid.end());
    std::vector<std::vector<int64_t>> members(static_cast<size_t>(F));
    for (int64_t i = 0; i < x.numel(); ++i) members[static_cast<size_t>(gid[static_cast<size_t>(i)])].push_back(i);

    const Tensor b = baseline.materialize(x.shape());
    std::vector<double> credit(static_cast<size_t>(F), 0.0);

    const auto walk_permutation = [&](const std::vector<int>& order) {
        std::vector<float> cur(b.values().begin(), b.values().end());
        double prev = target.value(Tensor(x.shape(), std::vector<float>(cur)));
        for (int feat : order) {
            cancel.check("shapley_value_sampling");
            for (int64_t i : members[static_cast<size_t>(feat)])
                cur[static_cast<size_t>(i)] = x.values()[i];
            const double v = target.value(Tensor(x.shape(), std::vector<float>(cur)));
            credit[static_cast<size_t>(feat)] += v - prev;
            prev = v;
        }
    };

    int total = 0;
    if (exhaustive) {
        if (F > 8)
            throw std::invalid_argument("shapley_value_sampling: exhaustive enumeration supports at most 8 features");
        std::vector<int> order(static_cast<size_t>(F));
        std::iota(order.begin(), order.end(), 0);
        do {
            walk_permutation(order);
            ++total;
        } while (std::next_permutation(order.begin(), order.end()));
    } else {
        for (int j = 0; j < permutations; ++j) {
            Rng rng = stream_rng(seed, static_cast<uint64_t>(j));
            std::vector<int> order(static_cast<size_t>(F));
            std::iota(order.begin(), order.end(), 0);
            for (int i = F - 1; i > 0; --i) {
                const int k = rng.below(i + 1);
                std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(k)]);
            }
            walk_permutation(order);
            ++total;
        }
    }

    for (double& c : credit) c /= total;
    return {detail::paint_groups(x.shape(), gid, credit), "shapley_value_sampling",
            detail::elapsed_ms_since(t0),
            "permutations=" + std::to_string(total) + ";seed=" + std::to_string(seed) +
                (exhaustive ? ";exhaustive=true" : "")};
}

// The N multiplicative masks used by `rise`, exposed so callers can reason
// about mask support. Mask j: Bernoulli(keep_prob) cells on a (grid+1)^rank
// lattice, linearly upsampled by the cell size and cropped at a seeded
// sub-cell offset.
inline std::vector<Tensor> rise_masks(const std::vector<int>& input_shape, const PerturbSpec& spec) {
    const std::vector<int> sp = detail::spatial_of(input_shape);
    const int rank = static_cast<int>(sp.size());
    if (spec.mask_grid < 1) throw std::invalid_argument("rise: mask grid must be >= 1");
    if (!(spec.keep_prob > 0.0f && spec.keep_prob < 1.0f))
        throw std::invalid_argument("rise: keep probability must lie in (0,1)");
    if (spec.samples < 1) throw std::invalid_argument("rise: sample count must be >= 1");
    for (int e : sp)
        if (spec.mask_grid > e)
            throw std::invalid_argument("rise: mask grid exceeds a spatial extent");

    std::vector<int> cell(static_cast<size_t>(rank)), low(static_cast<size_t>(rank)),
        up_sp(static_cast<size_t>(rank));
    int64_t low_n = 1;
    for (int r = 0; r < rank; ++r) {
        cell[static_cast<size_t>(r)] = (sp[r] + spec.mask_grid - 1) / spec.mask_grid;
        low[static_cast<size_t>(r)] = spec.mask_grid + 1;
        up_sp[static_cast<size_t>(r)] = (spec.mask_grid + 1) * cell[static_cast<size_t>(r)];
        low_n *= low[static_cast<size_t>(r)];
    }

    int64_t plane = 1;
    for (int e : sp) plane *= e;

    std::vector<Tensor> masks;
    masks.reserve(static_cast<size_t>(spec.samples));
    for (int j = 0; j < spec.samples; ++j) {
        Rng rng = stream_rng(spec.seed, static_cast<uint64_t>(j));
        std::vector<float> cells(static_cast<size_t>(low_n));
        for (auto& c : cells) c = rng.uniform() < spec.keep_prob ? 1.0f : 0.0f;
        std::vector<int> offset(static_cast<size_t>(rank));
        for (int r = 0; r < rank; ++r)
            offset[static_cast<size_t>(r)] = rng.below(cell[static_cast<size_t>(r)]);

        std::vector<int> cells_shape = {1, 1};
        for (int r = 0; r < rank; ++r) cells_shape.push_back(low[static_cast<size_t>(r)]);
        const std::vector<float> up =
            detail::resize_spatial(std::span<const float>(cells), cells_shape, up_sp, true);

        // crop [offset, offset + extent) per dim
        std::vector<float> m(static_cast<size_t>(plane));
        std::vector<int> coord(static_cast<size_t>(rank), 0);
        for (int64_t p = 0; p < plane; ++p) {
            int64_t rem = p;
            for (int r = rank - 1; r >= 0; --r) {
                coord[static_cast<size_t>(r)] = static_cast<int>(rem % sp[r]);
                rem /= sp[r];
            }
            int64_t flat = 0;
            for (int r = 0; r < rank; ++r)
                flat = flat * up_sp[static_cast<size_t>(r)] + coord[static_cast<size_t>(r)] +
                       offset[static_cast<size_t>(r)];
            m[static_cast<size_t>(p)] = up[static_cast<size_t>(flat)];
        }
        std::vector<int> mask_shape = {1, 1};
        for (int e : sp) mask_shape.push_back(e);
        masks.emplace_back(mask_shape, std::move(m));
    }
    return masks;
}

// map = sum_j score(x * M_j) * M_j / (N * p); masks broadcast over batch and
// channel dims.
inline AttributionMap rise(const ScoreTarget& target, const Tensor& x, const PerturbSpec& spec,
                           const CancelToken& cancel = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<Tensor> masks = rise_masks(x.shape(), spec);
    const std::vector<int> sp = detail::spatial_of(x.shape());
    int64_t plane = 1;
    for (int e : sp) plane *= e;
    const int bc = x.shape()[0] * x.shape()[1];

    std::vector<double> acc(static_cast<size_t>(plane), 0.0);
    for (const Tensor& m : masks) {
        cancel.check("rise");
        std::vector<float> masked(static_cast<size_t>(x.numel()));
        for (int p = 0; p < bc; ++p)
            for (int64_t f = 0; f < plane; ++f)
                masked[static_cast<size_t>(p * plane + f)] =
                    x.values()[p * plane + f] * m.values()[f];
        const double s = target.value(Tensor(x.shape(), std::move(masked)));
        for (int64_t f = 0; f < plane; ++f)
            acc[static_cast<size_t>(f)] += s * static_cast<double>(m.values()[f]);
    }

    const double norm = static_cast<double>(masks.size()) * static_cast<double>(spec.keep_prob);
    std::vector<float> v(static_cast<size_t>(x.numel()));
    for (int p = 0; p < bc; ++p)
        for (int64_t f = 0; f < plane; ++f)
            v[static_cast<size_t>(p * plane + f)] = static_cast<float>(acc[static_cast<size_t>(f)] / norm);
    Tensor map(x.shape(), std::move(v));
    detail::ensure_finite(map, "rise");
    return {map, "rise", detail::elapsed_ms_since(t0),
            "samples=" + std::to_string(spec.samples) + ";grid=" + std::to_string(spec.mask_grid) +
                ";keep_prob=" + std::to_string(spec.keep_prob) + ";seed=" + std::to_string(spec.seed)};
}

// ------------------------------------------------------- surrogate family ---

namespace detail {

struct SurrogateSamples {
    std::vector<std::vector<uint8_t>> z;  // patch on/off per sample
    std::vector<double> y;                // target score per sample
    std::vector<double> w;                // regression weight per sample
};

inline Tensor patch_perturbed(const Tensor& x, const Tensor& b, const std::vector<int>& groups,
                              const std::vector<uint8_t>& z) {
    std::vector<float> v(x.values().begin(), x.values().end());
    for (int64_t i = 0; i < x.numel(); ++i)
        if (!z[static_cast<size_t>(groups[static_cast<size_t>(i)])]) v[static_cast<size_t>(i)] = b.values()[i];
    return Tensor(x.shape(), std::move(v));
}

}  // namespace detail

// Weighted ridge regression of the score on binary patch indicators, sample
// weights pi = exp(-d^2 / width^2) with d the cosine distance to the
// all-ones indicator; per-patch coefficient painted onto its pixels.
inline AttributionMap lime(const ScoreTarget& target, const Tensor& x, const PatchGrid& grid,
                           int n_samples, float kernel_width, float ridge_lambda,
                           const Baseline& baseline, uint64_t seed,
                           const CancelToken& cancel = {}) {
    const int M = grid.patch_count();
    if (n_samples < M)
        throw std::invalid_argument("lime: need at least as many samples as patches (" +
                                    std::to_string(M) + ")");
    if (!(ridge_lambda > 0.0f)) throw std::invalid_argument("lime: ridge lambda must be > 0");
    if (!(kernel_width > 0.0f)) throw std::invalid_argument("lime: kernel width must be > 0");
    const auto t0 = std::chrono::steady_clock::now();

    const std::vector<int> groups = detail::grid_groups(x.shape(), grid);
    const Tensor b = baseline.materialize(x.shape());

    // weighted normal equations over [intercept, z_1..z_M]
    const int n = M + 1;
    std::vector<double> ata(static_cast<size_t>(n) * n, 0.0);
    std::vector<double> atb(static_cast<size_t>(n), 0.0);
    std::vector<double> row(static_cast<size_t>(n));
    for (int j = 0; j < n_samples; ++j) {
        cancel.check("lime");
        Rng rng = stream_rng(seed, static_cast<uint64_t>(j));
        std::vector<uint8_t> z(static_cast<size_t>(M));
        int on = 0;
        for (auto& bit : z) {
            bit = rng.uniform() < 0.5 ? 1 : 0;
            on += bit;
        }
        const double y = target.value(detail::patch_perturbed(x, b, groups, z));
        const double cos_sim = on == 0 ? 0.0 : on / (std::sqrt(static_cast<double>(on)) *
                                                     std::sqrt(static_cast<double>(M)));
        const double d = 1.0 - cos_sim;
        const double pi = std::exp(-(d * d) / (static_cast<double>(kernel_width) * kernel_width));

        row[0] = 1.0;
        for (int i = 0; i < M; ++i) row[static_cast<size_t>(i) + 1] = z[static_cast<size_t>(i)];
        for (int r = 0; r < n; ++r) {
            for (int c = 0; c <= r; ++c) ata[static_cast<size_t>(r) * n + c] += pi * row[static_cast<size_t>(r)] * row[static_cast<size_t>(c)];
            atb[static_cast<size_t>(r)] += pi * row[static_cast<size_t>(r)] * y;
        }
    }
    for (int r = 0; r < n; ++r)
        for (int c = r + 1; c < n; ++c) ata[static_cast<size_t>(r) * n + c] = ata[static_cast<size_t>(c) * n + r];
    for (int i = 1; i < n; ++i) ata[static_cast<size_t>(i) * n + i] += ridge_lambda;  // intercept unpenalized

    std::vector<double> beta;
    try {
        beta = detail::solve_spd(std::move(ata), std::move(atb), n);
    } catch (const std::runtime_error&) {
        throw std::runtime_error("lime: weighted regression is singular; increase samples or lambda");
    }

    std::vector<double> coef(beta.begin() + 1, beta.end());
    return {detail::paint_groups(x.shape(), groups, coef), "lime", detail::elapsed_ms_since(t0),
            "samples=" + std::to_string(n_samples) + ";kernel_width=" + std::to_string(kernel_width) +
                ";lambda=" + std::to_string(ridge_lambda) + ";seed=" + std::to_string(seed)};
}

// Weighted regression under the Shapley kernel with the efficiency
// constraint (sum phi = score(x) - score(baseline)) enforced by
// substitution. Enumerates every proper nonempty subset when `exhaustive`
// or when n_samples covers them all; otherwise samples subset sizes from
// the kernel's per-size mass and subsets uniformly within a size.
inline AttributionMap kernel_shap(const ScoreTarget& target, const Tensor& x, const PatchGrid& grid,
                                  int n_samples, float ridge_lambda, const Baseline& baseline,
                                  uint64_t seed, bool exhaustive = false,
                                  const CancelToken& cancel = {}) {
    const int M = grid.patch_count();
    if (M < 2) throw std::invalid_argument("kernel_shap: need at least 2 patches");
    if (ridge_lambda < 0.0f) throw std::invalid_argument("kernel_shap: ridge lambda must be >= 0");
    const auto t0 = std::chrono::steady_clock::now();

    const std::vector<int> groups = detail::grid_groups(x.shape(), grid);
    const Tensor b = baseline.materialize(x.shape());
    const double v0 = target.value(b);
    const double vx = target.value(x);
    const double delta = vx - v0;

    const bool enumerate_all = exhaustive || (M <= 16 && n_samples >= (1 << M) - 2);
    detail::SurrogateSamples s;
    if (enumerate_all) {
        if (M > 16) throw std::invalid_argument("kernel_shap: exhaustive enumeration supports at most 16 patches");
        // subset kernel weight (M-1) / (C(M,s) * s * (M-s))
        std::vector<double> choose(static_cast<size_t>(M) + 1, 1.0);
        for (int i = 1; i <= M; ++i)
            choose[static_cast<size_t>(i)] = choose[static_cast<size_t>(i) - 1] * (M - i + 1) / i;
        for (uint32_t bits = 1; bits + 1 < (1u << M); ++bits) {
            cancel.check("kernel_shap");
            std::vector<uint8_t> z(static_cast<size_t>(M));
            int on = 0;
            for (int i = 0; i < M; ++i) {
                z[static_cast<size_t>(i)] = (bits >> i) & 1u;
                on += z[static_cast<size_t>(i)];
            }
            s.z.push_back(z);
            s.y.push_back(target.value(detail::patch_perturbed(x, b, groups, z)));
            s.w.push_back((M - 1.0) /
                          (choose[static_cast<size_t>(on)] * on * (M - on)));
        }
    } else {
        if (n_samples < M) throw std::invalid_argument("kernel_shap: need at least as many samples as patches");
        // per-size kernel mass (M-1)/(s(M-s)), importance-sampled so every
        // drawn sample carries equal regression weight
        std::vector<double> size_mass(static_cast<size_t>(M), 0.0);
        double total_mass = 0.0;
        for (int sz = 1; sz < M; ++sz) {
            size_mass[static_cast<size_t>(sz)] = (M - 1.0) / (static_cast<double>(sz) * (M - sz));
            total_mass += size_mass[static_cast<size_t>(sz)];
        }
        for (int j = 0; j < n_samples; ++j) {
            cancel.check("kernel_shap");
            Rng rng = stream_rng(seed, static_cast<uint64_t>(j));
            double u = rng.uniform() * total_mass;
            int sz = 1;
            while (sz < M - 1 && u > size_mass[static_cast<size_t>(sz)]) {
                u -= size_mass[static_cast<size_t>(sz)];
                ++sz;
            }
            std::vector<int> perm(static_cast<size_t>(M));
            std::iota(perm.begin(), perm.end(), 0);
            for (int i = M - 1; i > 0; --i) {
                const int k = rng.below(i + 1);
                std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(k)]);
            }
            std::vector<uint8_t> z(static_cast<size_t>(M), 0);
            for (int i = 0; i < sz; ++i) z[static_cast<size_t>(perm[static_cast<size_t>(i)])] = 1;
            s.z.push_back(z);
            s.y.push_back(target.value(detail::patch_perturbed(x, b, groups, z)));
            s.w.push_back(1.0);
        }
    }

    // eliminate phi_M via the efficiency constraint, regress the rest
    const int n = M - 1;
    std::vector<double> ata(static_cast<size_t>(n) * n, 0.0);
    std::vector<double> atb(static_cast<size_t>(n), 0.0);
    for (size_t j = 0; j < s.z.size(); ++j) {
        const double zm = s.z[j][static_cast<size_t>(M - 1)];
        const double yj = s.y[j] - v0 - zm * delta;
        std::vector<double> row(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) row[static_cast<size_t>(i)] = s.z[j][static_cast<size_t>(i)] - zm;
        for (int r = 0; r < n; ++r) {
            for (int c = 0; c <= r; ++c)
                ata[static_cast<size_t>(r) * n + c] += s.w[j] * row[static_cast<size_t>(r)] * row[static_cast<size_t>(c)];
            atb[static_cast<size_t>(r)] += s.w[j] * row[static_cast<size_t>(r)] * yj;
        }
    }
    for (int r = 0; r < n; ++r)
        for (int c = r + 1; c < n; ++c) ata[static_cast<size_t>(r) * n + c] = ata[static_cast<size_t>(c) * n + r];
    const double jitter = ridge_lambda > 0.0f ? static_cast<double>(ridge_lambda) : 1e-12;
    for (int i = 0; i < n; ++i) ata[static_cast<size_t>(i) * n + i] += jitter;

    std::vector<double> phi_head;
    try {
        phi_head = detail::solve_spd(std::move(ata), std::move(atb), n);
    } catch (const std::runtime_error&) {
        throw std::runtime_error("kernel_shap: weighted regression is singular; increase samples or lambda");
    }

    std::vector<double> phi(static_cast<size_t>(M));
    double head_sum = 0.0;
    for (int i = 0; i < n; ++i) {
        phi[static_cast<size_t>(i)] = phi_head[static_cast<size_t>(i)];
        head_sum += phi_head[static_cast<size_t>(i)];
    }
    phi[static_cast<size_t>(M - 1)] = delta - head_sum;

    return {detail::paint_groups(x.shape(), groups, phi), "kernel_shap", detail::elapsed_ms_since(t0),
            "samples=" + std::to_string(n_samples) + ";lambda=" + std::to_string(ridge_lambda) +
                ";seed=" + std::to_string(seed) + (exhaustive ? ";exhaustive=true" : "")};
}

}  // namespace esegeta
