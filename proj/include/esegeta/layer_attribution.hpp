#pragma once

#include <array>
#include <unordered_map>

#include "attribution.hpp"
#include "model.hpp"
#include "wrapper.hpp"

// Layer-level attribution: maps live on a tapped layer's activations instead
// of the input, plus two input-optimization methods that synthesize inputs
// from a layer objective. Path methods follow the same midpoint-Riemann
// discipline as the input-level family, so an identity tap reduces them to
// their input-level counterparts.
namespace esegeta {

struct LayerAttributionMap {
    Tensor values;  // the tapped layer's activation shape
    std::string layer;
    std::string method_id;
    double elapsed_ms = 0.0;
    std::string params;  // key=value echo of the parameters actually used
};

// Endpoint of an input-optimization run. `objective` holds the value at the
// starting point followed by the value after every accepted step, so it is
// monotone by construction of the backtracking rule.
struct OptimizationResult {
    Tensor input;  // the optimized input (input shape)
    std::vector<double> objective;
    std::string layer;
    std::string method_id;
    double elapsed_ms = 0.0;
    std::string params;
};

// Maps an input to one tapped activation; gradients flow when the input is
// tracked. Closed-form taps slot in for tests, models via make_layer_fn.
using LayerFn = std::function<Tensor(const Tensor&)>;

inline LayerFn make_layer_fn(const Model& model, const std::string& layer) {
    if (!model.has_layer(layer))
        throw std::invalid_argument("model: unknown layer name '" + layer + "'");
    return [m = &model, layer](const Tensor& x) {
        std::vector<LayerTap> taps;
        const std::array<std::string, 1> names = {layer};
        m->forward_with_taps(x, std::span<const std::string>(names), taps);
        return taps[0].activation;
    };
}

namespace detail {

// Tapped activation and d(score)/d(activation) at the given input point. The
// input is tracked so the tapped node sits on the tape and receives a grad.
inline std::pair<Tensor, Tensor> layer_gradient(const ScoreTarget& target, const Tensor& x,
                                                const std::string& layer,
                                                const std::string& method_id) {
    auto [score, act] = target.tapped(x.with_requires_grad(), layer);
    if (score.numel() != 1)
        throw std::runtime_error(method_id + ": target returned a non-scalar score");
    backward(score);
    if (!act.has_grad())
        throw std::runtime_error(method_id + ": layer '" + layer + "' received no gradient");
    Tensor g = act.grad();
    ensure_finite(g, method_id);
    return {act, g};
}

// Activation alone, captured without building a tape.
inline Tensor plain_activation(const ScoreTarget& target, const Tensor& x,
                               const std::string& layer) {
    return target.tapped(x.detach(), layer).second;
}

}  // namespace detail

// --------------------------------------------------------- activation maps ---

// The raw captured activation of `layer` at x.
inline LayerAttributionMap layer_activation(const ScoreTarget& target, const Tensor& x,
                                            const std::string& layer) {
    const auto t0 = std::chrono::steady_clock::now();
    Tensor act = detail::plain_activation(target, x, layer).detach();
    detail::ensure_finite(act, "layer_activation");
    return {act, layer, "layer_activation", detail::elapsed_ms_since(t0), "layer=" + layer};
}

// A ⊙ d(score)/dA at the tapped layer.
inline LayerAttributionMap layer_gradient_x_activation(const ScoreTarget& target, const Tensor& x,
                                                       const std::string& layer) {
    const auto t0 = std::chrono::steady_clock::now();
    auto [act, g] = detail::layer_gradient(target, x, layer, "layer_gradient_x_activation");
    std::vector<float> v(static_cast<size_t>(act.numel()));
    for (int64_t i = 0; i < act.numel(); ++i)
        v[static_cast<size_t>(i)] = act.values()[i] * g.values()[i];
    return {Tensor(act.shape(), std::move(v)), layer, "layer_gradient_x_activation",
            detail::elapsed_ms_since(t0), "layer=" + layer};
}

// ------------------------------------------------------------- path family ---

// Discrete chain-rule decomposition of the path integral through a layer:
// per unit j, sum over segments of grad_j(segment midpoint) * (A_j at the
// right endpoint - A_j at the left endpoint). Midpoint gradients make an
// identity tap reduce to integrated_gradients' Riemann sum, and the per-unit
// sums telescope to score(x) - score(baseline) (completeness).
inline LayerAttributionMap layer_conductance(const ScoreTarget& target, const Tensor& x,
                                             const Baseline& baseline, const std::string& layer,
                                             int steps = 50, const CancelToken& cancel = {}) {
    if (steps < 1) throw std::invalid_argument("layer_conductance: steps must be >= 1");
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor b = baseline.materialize(x.shape());
    Tensor a_prev = detail::plain_activation(target, detail::lerp_input(b, x, 0.0), layer);
    std::vector<double> acc(static_cast<size_t>(a_prev.numel()), 0.0);
    for (int k = 1; k <= steps; ++k) {
        cancel.check("layer_conductance");
        const double mid = (k - 0.5) / static_cast<double>(steps);
        auto [act, g] =
            detail::layer_gradient(target, detail::lerp_input(b, x, mid), layer, "layer_conductance");
        (void)act;
        Tensor a_next = detail::plain_activation(
            target, detail::lerp_input(b, x, k / static_cast<double>(steps)), layer);
        for (int64_t i = 0; i < a_prev.numel(); ++i)
            acc[static_cast<size_t>(i)] +=
                static_cast<double>(g.values()[i]) * (static_cast<double>(a_next.values()[i]) -
                                                      static_cast<double>(a_prev.values()[i]));
        a_prev = std::move(a_next);
    }
    std::vector<float> v(acc.size());
    for (size_t i = 0; i < acc.size(); ++i) v[i] = static_cast<float>(acc[i]);
    Tensor map(a_prev.shape(), std::move(v));
    detail::ensure_finite(map, "layer_conductance");
    return {map, layer, "layer_conductance", detail::elapsed_ms_since(t0),
            "layer=" + layer + ";steps=" + std::to_string(steps)};
}

// Midpoint-Riemann average over the baseline-to-x path of d(score)/dA, with
// no activation-delta factor.
inline LayerAttributionMap internal_influence(const ScoreTarget& target, const Tensor& x,
                                              const Baseline& baseline, const std::string& layer,
                                              int steps = 50, const CancelToken& cancel = {}) {
    if (steps < 1) throw std::invalid_argument("internal_influence: steps must be >= 1");
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor b = baseline.materialize(x.shape());
    std::vector<double> acc;
    std::vector<int> shape;
    for (int k = 1; k <= steps; ++k) {
        cancel.check("internal_influence");
        const double mid = (k - 0.5) / static_cast<double>(steps);
        auto [act, g] =
            detail::layer_gradient(target, detail::lerp_input(b, x, mid), layer, "internal_influence");
        (void)act;
        if (acc.empty()) {
            acc.assign(static_cast<size_t>(g.numel()), 0.0);
            shape = g.shape();
        }
        for (int64_t i = 0; i < g.numel(); ++i)
            acc[static_cast<size_t>(i)] += static_cast<double>(g.values()[i]);
    }
    std::vector<float> v(acc.size());
    for (size_t i = 0; i < acc.size(); ++i) v[i] = static_cast<float>(acc[i] / steps);
    Tensor map(shape, std::move(v));
    detail::ensure_finite(map, "internal_influence");
    return {map, layer, "internal_influence", detail::elapsed_ms_since(t0),
            "layer=" + layer + ";steps=" + std::to_string(steps)};
}

// Average over samples of (A(x) - A(b)) ⊙ d(score)/dA at b + u (x - b) + noise,
// u ~ U(0,1), b drawn from the baseline distribution per sample. Sampling
// order matches gradient_shap, so an identity tap reproduces it seed-for-seed.
inline LayerAttributionMap layer_gradient_shap(const ScoreTarget& target, const Tensor& x,
                                               const Baseline& baseline, const std::string& layer,
                                               int n, float sigma, uint64_t seed,
                                               const CancelToken& cancel = {}) {
    if (n < 1) throw std::invalid_argument("layer_gradient_shap: sample count must be >= 1");
    if (sigma < 0.0f) throw std::invalid_argument("layer_gradient_shap: sigma must be >= 0");
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor ax = detail::plain_activation(target, x, layer);
    std::vector<double> acc(static_cast<size_t>(ax.numel()), 0.0);
    for (int j = 0; j < n; ++j) {
        cancel.check("layer_gradient_shap");
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
        auto [act, g] = detail::layer_gradient(target, Tensor(x.shape(), std::move(pt)), layer,
                                               "layer_gradient_shap");
        (void)act;
        const Tensor ab = detail::plain_activation(target, b, layer);
        for (int64_t i = 0; i < ax.numel(); ++i)
            acc[static_cast<size_t>(i)] +=
                (static_cast<double>(ax.values()[i]) - static_cast<double>(ab.values()[i])) *
                g.values()[i];
    }
    std::vector<float> v(acc.size());
    for (size_t i = 0; i < acc.size(); ++i) v[i] = static_cast<float>(acc[i] / n);
    Tensor map(ax.shape(), std::move(v));
    detail::ensure_finite(map, "layer_gradient_shap");
    return {map, layer, "layer_gradient_shap", detail::elapsed_ms_since(t0),
            "layer=" + layer + ";n=" + std::to_string(n) + ";sigma=" + std::to_string(sigma) +
                ";seed=" + std::to_string(seed)};
}

// ----------------------------------------------------- excitation backprop ---

namespace detail {

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv: return "conv";
        case LayerKind::Relu: return "relu";
        case LayerKind::LeakyRelu: return "leaky_relu";
        case LayerKind::Sigmoid: return "sigmoid";
        case LayerKind::Softmax: return "softmax";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::UpsampleNearest: return "upsample_nearest";
        case LayerKind::UpsampleLinear: return "upsample_linear";
        case LayerKind::Concat: return "concat";
    }
    return "unknown";
}

}  // namespace detail

// Winner-take-all probability propagation from the wrapper-selected output
// down to `layer`. The unit probability injected over the selected class mask
// is redistributed in reverse layer order: conv nodes share a child's
// probability among its receptive-field parents proportional to
// relu(weight) * relu(parent value), normalized per child (negative weights
// and negative evidence are dropped so shares stay non-negative and the
// child sums cannot cancel; a zero denominator falls back to a uniform share
// over the same parents, so no mass is ever lost);
// maxpool sends everything to the winning parent, linear upsampling splits
// uniformly over the contributing parents, and activations/concat pass mass
// through position-wise. Total probability is conserved at every step. Needs
// weight-level access, so it takes the model and wrapper directly rather
// than a ScoreTarget.
inline LayerAttributionMap excitation_backprop(const Model& model, const WrapperSpec& spec,
                                               const Tensor& x, const std::string& layer) {
    const auto t0 = std::chrono::steady_clock::now();
    if (!model.has_layer(layer))
        throw std::invalid_argument("model: unknown layer name '" + layer + "'");
    for (const Layer& l : model.layers()) {
        switch (l.kind) {
            case LayerKind::Conv:
            case LayerKind::Relu:
            case LayerKind::LeakyRelu:
            case LayerKind::MaxPool:
            case LayerKind::UpsampleNearest:
            case LayerKind::UpsampleLinear:
            case LayerKind::Concat:
                break;
            default:
                throw std::invalid_argument(
                    "excitation_backprop: unsupported op '" +
                    std::string(detail::layer_kind_name(l.kind)) + "' in the model graph");
        }
    }

    std::vector<std::string> names = model.list_layers();
    names.push_back("input");
    std::vector<LayerTap> taps;
    model.forward_with_taps(x.detach(), names, taps);
    std::unordered_map<std::string, Tensor> acts;
    for (auto& t : taps) acts.emplace(t.layer, t.activation);

    const Tensor& out = acts.at(model.output_layer());
    const WrapperResult wrapped = apply_wrapper(out, spec);
    double total = 0.0;
    for (float v : wrapped.class_mask.values()) total += v;
    if (total == 0.0)
        throw std::runtime_error("excitation_backprop: the selected class mask is empty");

    std::unordered_map<std::string, std::vector<double>> prob;
    {
        std::vector<double>& p0 = prob[model.output_layer()];
        p0.resize(static_cast<size_t>(out.numel()));
        for (int64_t i = 0; i < out.numel(); ++i)
            p0[static_cast<size_t>(i)] = wrapped.class_mask.values()[i] / total;
    }

    const auto parent_buf = [&](const std::string& name) -> std::vector<double>& {
        std::vector<double>& v = prob[name];
        if (v.empty()) v.assign(static_cast<size_t>(acts.at(name).numel()), 0.0);
        return v;
    };

    const auto& layers = model.layers();
    for (size_t li = layers.size(); li-- > 0;) {
        const Layer& l = layers[li];
        if (l.name == layer) break;  // every consumer above has already deposited here
        auto it = prob.find(l.name);
        if (it == prob.end()) continue;  // no mass reached this branch
        const std::vector<double>& child = it->second;
        const Tensor& cact = acts.at(l.name);
        const Tensor& pact = acts.at(l.inputs[0]);

        switch (l.kind) {
            case LayerKind::Relu:
            case LayerKind::LeakyRelu: {
                std::vector<double>& parent = parent_buf(l.inputs[0]);
                for (size_t i = 0; i < child.size(); ++i) parent[i] += child[i];
                break;
            }
            case LayerKind::Concat: {
                const Tensor& bact = acts.at(l.inputs[1]);
                std::vector<double>& pa = parent_buf(l.inputs[0]);
                std::vector<double>& pb = parent_buf(l.inputs[1]);
                const auto& cs = cact.shape();
                int64_t plane = 1;
                for (size_t i = 2; i < cs.size(); ++i) plane *= cs[i];
                const int B = cs[0], Ca = pact.shape()[1], Cb = bact.shape()[1];
                for (int bi = 0; bi < B; ++bi)
                    for (int c = 0; c < Ca + Cb; ++c)
                        for (int64_t p = 0; p < plane; ++p) {
                            const double m =
                                child[static_cast<size_t>((static_cast<int64_t>(bi) * (Ca + Cb) + c) *
                                                              plane +
                                                          p)];
                            if (m == 0.0) continue;
                            if (c < Ca)
                                pa[static_cast<size_t>((static_cast<int64_t>(bi) * Ca + c) * plane + p)] +=
                                    m;
                            else
                                pb[static_cast<size_t>(
                                    (static_cast<int64_t>(bi) * Cb + (c - Ca)) * plane + p)] += m;
                        }
                break;
            }
            case LayerKind::MaxPool: {
                std::vector<double>& parent = parent_buf(l.inputs[0]);
                const std::vector<int> in_sp = detail::spatial_of(pact.shape());
                const std::vector<int> out_sp = detail::spatial_of(cact.shape());
                const int BC = pact.shape()[0] * pact.shape()[1];
                std::vector<float> pooled(static_cast<size_t>(cact.numel()));
                std::vector<int> argmax(static_cast<size_t>(cact.numel()));
                detail::maxpool_forward<float>(pact.values().data(), BC, in_sp.data(), out_sp.data(),
                                               static_cast<int>(in_sp.size()), l.window, l.window,
                                               pooled.data(), argmax.data());
                for (size_t i = 0; i < child.size(); ++i)
                    if (child[i] != 0.0) parent[static_cast<size_t>(argmax[i])] += child[i];
                break;
            }
            case LayerKind::UpsampleNearest: {
                std::vector<double>& parent = parent_buf(l.inputs[0]);
                const std::vector<int> in_sp = detail::spatial_of(pact.shape());
                const std::vector<int> out_sp = detail::spatial_of(cact.shape());
                const int rank = static_cast<int>(in_sp.size());
                int64_t in_plane = 1, out_plane = 1;
                for (int r = 0; r < rank; ++r) {
                    in_plane *= in_sp[r];
                    out_plane *= out_sp[r];
                }
                const int BC = pact.shape()[0] * pact.shape()[1];
                std::vector<int> oc(static_cast<size_t>(rank));
                for (int bc = 0; bc < BC; ++bc)
                    for (int64_t of = 0; of < out_plane; ++of) {
                        const double m = child[static_cast<size_t>(bc * out_plane + of)];
                        if (m == 0.0) continue;
                        int64_t rem = of;
                        for (int r = rank - 1; r >= 0; --r) {
                            oc[static_cast<size_t>(r)] = static_cast<int>(rem % out_sp[r]);
                            rem /= out_sp[r];
                        }
                        int64_t flat = 0;
                        for (int r = 0; r < rank; ++r)
                            flat = flat * in_sp[r] + oc[static_cast<size_t>(r)] / l.factor;
                        parent[static_cast<size_t>(bc * in_plane + flat)] += m;
                    }
                break;
            }
            case LayerKind::UpsampleLinear: {
                std::vector<double>& parent = parent_buf(l.inputs[0]);
                const std::vector<int> in_sp = detail::spatial_of(pact.shape());
                const std::vector<int> out_sp = detail::spatial_of(cact.shape());
                int64_t in_plane = 1, out_plane = 1;
                for (size_t r = 0; r < in_sp.size(); ++r) {
                    in_plane *= in_sp[r];
                    out_plane *= out_sp[r];
                }
                std::vector<std::vector<int64_t>> parents(static_cast<size_t>(out_plane));
                detail::upsample_linear_visit(
                    in_sp.data(), static_cast<int>(in_sp.size()), l.factor,
                    [&](int64_t of, int64_t inf, double) {
                        auto& v = parents[static_cast<size_t>(of)];
                        if (std::find(v.begin(), v.end(), inf) == v.end()) v.push_back(inf);
                    });
                const int BC = pact.shape()[0] * pact.shape()[1];
                for (int bc = 0; bc < BC; ++bc)
                    for (int64_t of = 0; of < out_plane; ++of) {
                        const double m = child[static_cast<size_t>(bc * out_plane + of)];
                        if (m == 0.0) continue;
                        const auto& ps = parents[static_cast<size_t>(of)];
                        const double share = m / static_cast<double>(ps.size());
                        for (int64_t inf : ps) parent[static_cast<size_t>(bc * in_plane + inf)] += share;
                    }
                break;
            }
            case LayerKind::Conv: {
                std::vector<double>& parent = parent_buf(l.inputs[0]);
                const auto& ws = l.weight.shape();
                const int rank = static_cast<int>(ws.size()) - 2;
                const std::vector<int> in_sp = detail::spatial_of(pact.shape());
                const std::vector<int> out_sp = detail::spatial_of(cact.shape());
                const int B = pact.shape()[0], IC = pact.shape()[1], OC = ws[0];
                int64_t in_plane = 1, out_plane = 1, kvol = 1;
                for (int r = 0; r < rank; ++r) {
                    in_plane *= in_sp[r];
                    out_plane *= out_sp[r];
                    kvol *= ws[static_cast<size_t>(2 + r)];
                }
                std::vector<int> ocoord(static_cast<size_t>(rank)), kc(static_cast<size_t>(rank));
                std::vector<int64_t> pflat;
                std::vector<double> contrib;
                for (int bi = 0; bi < B; ++bi)
                    for (int oc = 0; oc < OC; ++oc)
                        for (int64_t of = 0; of < out_plane; ++of) {
                            const double m = child[static_cast<size_t>(
                                (static_cast<int64_t>(bi) * OC + oc) * out_plane + of)];
                            if (m == 0.0) continue;
                            int64_t rem = of;
                            for (int r = rank - 1; r >= 0; --r) {
                                ocoord[static_cast<size_t>(r)] = static_cast<int>(rem % out_sp[r]);
                                rem /= out_sp[r];
                            }
                            pflat.clear();
                            contrib.clear();
                            double denom = 0.0;
                            for (int ic = 0; ic < IC; ++ic)
                                for (int64_t kf = 0; kf < kvol; ++kf) {
                                    int64_t krem = kf;
                                    for (int r = rank - 1; r >= 0; --r) {
                                        kc[static_cast<size_t>(r)] =
                                            static_cast<int>(krem % ws[static_cast<size_t>(2 + r)]);
                                        krem /= ws[static_cast<size_t>(2 + r)];
                                    }
                                    int64_t flat = 0;
                                    bool ok = true;
                                    for (int r = 0; r < rank; ++r) {
                                        const int pos = ocoord[static_cast<size_t>(r)] * l.stride -
                                                        l.pad + kc[static_cast<size_t>(r)];
                                        if (pos < 0 || pos >= in_sp[r]) {
                                            ok = false;
                                            break;
                                        }
                                        flat = flat * in_sp[r] + pos;
                                    }
                                    if (!ok) continue;
                                    const float w = l.weight.values()[(static_cast<int64_t>(oc) * IC +
                                                                       ic) *
                                                                          kvol +
                                                                      kf];
                                    const int64_t pidx =
                                        (static_cast<int64_t>(bi) * IC + ic) * in_plane + flat;
                                    const double c =
                                        static_cast<double>(std::max(w, 0.0f)) *
                                        static_cast<double>(std::max(pact.values()[pidx], 0.0f));
                                    pflat.push_back(pidx);
                                    contrib.push_back(c);
                                    denom += c;
                                }
                            if (pflat.empty()) continue;
                            if (denom != 0.0) {
                                for (size_t i = 0; i < pflat.size(); ++i)
                                    parent[static_cast<size_t>(pflat[i])] += m * contrib[i] / denom;
                            } else {
                                const double share = m / static_cast<double>(pflat.size());
                                for (int64_t pidx : pflat)
                                    parent[static_cast<size_t>(pidx)] += share;
                            }
                        }
                break;
            }
            default:
                break;  // unreachable: kinds validated above
        }
    }

    const Tensor& lact = acts.at(layer);
    std::vector<float> v(static_cast<size_t>(lact.numel()), 0.0f);
    auto itp = prob.find(layer);
    if (itp != prob.end())
        for (size_t i = 0; i < itp->second.size(); ++i) v[i] = static_cast<float>(itp->second[i]);
    Tensor map(lact.shape(), std::move(v));
    detail::ensure_finite(map, "excitation_backprop");
    return {map, layer, "excitation_backprop", detail::elapsed_ms_since(t0),
            "layer=" + layer + ";class=" + std::to_string(spec.class_index) +
                ";strategy=" + wrapper_strategy_name(spec.strategy)};
}

// ------------------------------------------------------ input optimization ---

namespace detail {

// One backtracking pass: from `cur`, move along +-grad halving the step until
// the objective improves (<= for descent, >= for ascent, equality accepted so
// flat objectives terminate cleanly). Returns false when 20 halvings fail.
inline bool backtrack_step(Tensor& cur, double& cur_value, const Tensor& grad, double step,
                           bool ascend, const std::function<double(const Tensor&)>& evaluate) {
    double s = step;
    for (int h = 0; h <= 20; ++h, s *= 0.5) {
        std::vector<float> cand(static_cast<size_t>(cur.numel()));
        for (int64_t i = 0; i < cur.numel(); ++i)
            cand[static_cast<size_t>(i)] = static_cast<float>(
                static_cast<double>(cur.values()[i]) +
                (ascend ? s : -s) * static_cast<double>(grad.values()[i]));
        Tensor ct(cur.shape(), std::move(cand));
        const double cv = evaluate(ct);
        if (std::isfinite(cv) && (ascend ? cv >= cur_value : cv <= cur_value)) {
            cur = std::move(ct);
            cur_value = cv;
            return true;
        }
    }
    return false;
}

}  // namespace detail

// Gradient descent from seeded noise on ||phi(x) - target||^2 + lambda ||x||^2.
// The loss is monotonically non-increasing: each iteration backtracks (halve
// the step, at most 20 times) until the loss does not increase, and the run
// stops early once no step helps. A non-finite loss or gradient reports the
// iteration where it appeared.
inline OptimizationResult inverted_representation(const LayerFn& phi,
                                                  const std::vector<int>& input_shape,
                                                  const Tensor& target_acts, int iters, double step,
                                                  double lambda, uint64_t seed,
                                                  const CancelToken& cancel = {}) {
    if (iters < 1) throw std::invalid_argument("inverted_representation: iters must be >= 1");
    if (step <= 0.0) throw std::invalid_argument("inverted_representation: step must be > 0");
    if (lambda < 0.0) throw std::invalid_argument("inverted_representation: lambda must be >= 0");
    const auto t0 = std::chrono::steady_clock::now();
    const Tensor target = target_acts.detach();
    const float lam = static_cast<float>(lambda);

    const auto loss_tensor = [&](const Tensor& in) {
        Tensor act = phi(in);
        if (act.shape() != target.shape())
            throw std::invalid_argument("inverted_representation: target activation shape " +
                                        shape_to_string(target.shape()) +
                                        " does not match the layer's " +
                                        shape_to_string(act.shape()));
        Tensor diff = add(act, target, -1.0f);
        Tensor loss = sum(mul(diff, diff));
        if (lam > 0.0f) loss = add(loss, sum(mul(in, in)), lam);
        return loss;
    };
    const std::function<double(const Tensor&)> evaluate = [&](const Tensor& in) {
        return static_cast<double>(loss_tensor(in.detach()).item());
    };

    Rng rng = named_rng(seed, "inverted_representation");
    std::vector<float> init(static_cast<size_t>(shape_numel(input_shape)));
    for (auto& f : init) f = static_cast<float>(0.1 * rng.normal());
    Tensor cur(input_shape, std::move(init));

    double cur_loss = evaluate(cur);
    if (!std::isfinite(cur_loss))
        throw std::runtime_error("inverted_representation: non-finite loss at iteration 0");
    std::vector<double> objective = {cur_loss};

    for (int it = 1; it <= iters; ++it) {
        cancel.check("inverted_representation");
        Tensor xg = cur.with_requires_grad();
        Tensor loss = loss_tensor(xg);
        backward(loss);
        Tensor g = xg.grad();
        for (float gv : g.values())
            if (!std::isfinite(gv))
                throw std::runtime_error("inverted_representation: non-finite gradient at iteration " +
                                         std::to_string(it));
        if (!detail::backtrack_step(cur, cur_loss, g, step, /*ascend=*/false, evaluate)) break;
        objective.push_back(cur_loss);
    }

    return {cur,
            std::move(objective),
            "",
            "inverted_representation",
            detail::elapsed_ms_since(t0),
            "iters=" + std::to_string(iters) + ";step=" + std::to_string(step) +
                ";lambda=" + std::to_string(lambda) + ";seed=" + std::to_string(seed)};
}

inline OptimizationResult inverted_representation(const Model& model, const std::string& layer,
                                                  const std::vector<int>& input_shape,
                                                  const Tensor& target_acts, int iters, double step,
                                                  double lambda, uint64_t seed,
                                                  const CancelToken& cancel = {}) {
    OptimizationResult r = inverted_representation(make_layer_fn(model, layer), input_shape,
                                                   target_acts, iters, step, lambda, seed, cancel);
    r.layer = layer;
    return r;
}

// Gradient ascent from x0 on the mean of squared activations of the tapped
// layer; the objective is non-decreasing under the same backtracking rule.
// The ascent itself is deterministic; `seed` is accepted for interface
// symmetry with the other stochastic methods and echoed in the parameters.
inline OptimizationResult deepdream(const LayerFn& phi, const Tensor& x0, int iters, double step,
                                    uint64_t seed, const CancelToken& cancel = {}) {
    if (iters < 1) throw std::invalid_argument("deepdream: iters must be >= 1");
    if (step <= 0.0) throw std::invalid_argument("deepdream: step must be > 0");
    const auto t0 = std::chrono::steady_clock::now();

    const auto objective_tensor = [&](const Tensor& in) {
        Tensor act = phi(in);
        return mean(mul(act, act));
    };
    const std::function<double(const Tensor&)> evaluate = [&](const Tensor& in) {
        return static_cast<double>(objective_tensor(in.detach()).item());
    };

    Tensor cur = x0.detach();
    double cur_obj = evaluate(cur);
    if (!std::isfinite(cur_obj))
        throw std::runtime_error("deepdream: non-finite objective at iteration 0");
    std::vector<double> objective = {cur_obj};

    for (int it = 1; it <= iters; ++it) {
        cancel.check("deepdream");
        Tensor xg = cur.with_requires_grad();
        Tensor obj = objective_tensor(xg);
        backward(obj);
        Tensor g = xg.grad();
        for (float gv : g.values())
            if (!std::isfinite(gv))
                throw std::runtime_error("deepdream: non-finite gradient at iteration " +
                                         std::to_string(it));
        if (!detail::backtrack_step(cur, cur_obj, g, step, /*ascend=*/true, evaluate)) break;
        objective.push_back(cur_obj);
    }

    return {cur,
            std::move(objective),
            "",
            "deepdream",
            detail::elapsed_ms_since(t0),
            "iters=" + std::to_string(iters) + ";step=" + std::to_string(step) +
                ";seed=" + std::to_string(seed)};
}

inline OptimizationResult deepdream(const Model& model, const std::string& layer, const Tensor& x0,
                                    int iters, double step, uint64_t seed,
                                    const CancelToken& cancel = {}) {
    OptimizationResult r = deepdream(make_layer_fn(model, layer), x0, iters, step, seed, cancel);
    r.layer = layer;
    return r;
}

}  // namespace esegeta
