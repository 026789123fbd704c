#pragma once

#include <algorithm>
#include <functional>

#include "attribution.hpp"
#include "model.hpp"

// Quantitative evaluation of attribution maps (infidelity, max-sensitivity)
// and the cascading-randomization sanity procedure. Perturbation
// distributions are Gaussian (infidelity) and elementwise uniform
// (sensitivity); both are seeded and accumulate in double in fixed order, so
// every metric is deterministic under a fixed seed.
namespace esegeta {

namespace detail {

// 1-based ranks with average ranks on ties, via a stable sort by value.
inline std::vector<double> average_ranks(std::span<const float> v) {
    const size_t n = v.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t i, size_t j) { return v[i] < v[j]; });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

inline double l2_norm(std::span<const float> v) {
    double s = 0.0;
    for (float e : v) s += static_cast<double>(e) * e;
    return std::sqrt(s);
}

inline double value_range(const Tensor& t) {
    float lo = t.values()[0], hi = t.values()[0];
    for (float v : t.values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    return static_cast<double>(hi) - static_cast<double>(lo);
}

}  // namespace detail

// Spearman rank correlation with average ranks on ties. Identical inputs
// return exactly 1; tie-free inputs use the exact rank-difference formula, so
// a reversed ranking returns exactly -1.
inline double spearman_rho(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size())
        throw std::invalid_argument("spearman: length mismatch (" + std::to_string(a.size()) +
                                    " vs " + std::to_string(b.size()) + ")");
    if (a.size() < 2) throw std::invalid_argument("spearman: need at least two values");
    const std::vector<double> ra = detail::average_ranks(a);
    const std::vector<double> rb = detail::average_ranks(b);
    const size_t n = ra.size();

    if (ra == rb) return 1.0;

    bool ties = false;
    for (size_t i = 0; i + 1 < n && !ties; ++i) {
        // average ranks are non-integral only when a tie occurred
        if (ra[i] != std::floor(ra[i]) || rb[i] != std::floor(rb[i])) ties = true;
    }
    std::vector<char> seen_a(n, 0), seen_b(n, 0);
    if (!ties) {
        for (size_t i = 0; i < n; ++i) {
            seen_a[static_cast<size_t>(ra[i]) - 1] = 1;
            seen_b[static_cast<size_t>(rb[i]) - 1] = 1;
        }
        for (size_t i = 0; i < n && !ties; ++i)
            if (!seen_a[i] || !seen_b[i]) ties = true;  // duplicate integral ranks
    }

    if (!ties) {
        double d2 = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double d = ra[i] - rb[i];
            d2 += d * d;
        }
        const double nn = static_cast<double>(n);
        return 1.0 - 6.0 * d2 / (nn * (nn * nn - 1.0));
    }

    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0)
        throw std::invalid_argument("spearman: constant input has no rank ordering");
    return cov / std::sqrt(va * vb);
}

// Mean over n seeded Gaussian perturbations I ~ N(0, sigma^2) of
// (sum(I * attribution) - (score(x) - score(x - I)))^2. sigma == 0 requests
// the default 0.1 * (max - min of x). The wrapper mask inside `target` stays
// frozen, so only the score reacts to the perturbation.
inline double infidelity(const ScoreTarget& target, const Tensor& x, const Tensor& attribution,
                         int n = 1000, double sigma = 0.0, uint64_t seed = 0) {
    if (attribution.shape() != x.shape())
        throw std::invalid_argument("infidelity: attribution shape " +
                                    shape_to_string(attribution.shape()) +
                                    " does not match input " + shape_to_string(x.shape()));
    if (n < 1) throw std::invalid_argument("infidelity: sample count must be >= 1");
    double sig = sigma;
    if (sig == 0.0) sig = 0.1 * detail::value_range(x);
    if (!(sig > 0.0)) throw std::invalid_argument("infidelity: sigma must be > 0");

    const double fx = target.value(x);
    if (!std::isfinite(fx)) throw std::runtime_error("infidelity: non-finite score");

    double acc = 0.0;
    for (int j = 0; j < n; ++j) {
        Rng rng = stream_rng(seed, static_cast<uint64_t>(j));
        std::vector<float> noise(static_cast<size_t>(x.numel()));
        for (auto& e : noise) e = static_cast<float>(rng.normal() * sig);
        double dot = 0.0;
        std::vector<float> perturbed(static_cast<size_t>(x.numel()));
        for (int64_t i = 0; i < x.numel(); ++i) {
            dot += static_cast<double>(noise[static_cast<size_t>(i)]) *
                   static_cast<double>(attribution.values()[i]);
            perturbed[static_cast<size_t>(i)] = static_cast<float>(
                static_cast<double>(x.values()[i]) - noise[static_cast<size_t>(i)]);
        }
        const double fs = target.value(Tensor(x.shape(), std::move(perturbed)));
        if (!std::isfinite(fs)) throw std::runtime_error("infidelity: non-finite score");
        const double diff = dot - (fx - fs);
        acc += diff * diff;
    }
    return acc / n;
}

// Max over n seeded perturbations delta (elementwise Uniform(-r, r)) of
// ||method(x + delta) - method(x)||_2 / max(1e-12, ||method(x)||_2). A
// negative radius requests the default 0.02 * (max - min of x); radius 0 is
// legal and yields exactly 0. The method closure must hold its own seed fixed
// so only the input varies; any failure inside it propagates.
inline double max_sensitivity(const std::function<Tensor(const Tensor&)>& method, const Tensor& x,
                              int n = 10, double radius = -1.0, uint64_t seed = 0) {
    if (n < 1) throw std::invalid_argument("max_sensitivity: sample count must be >= 1");
    double r = radius;
    if (r < 0.0) r = 0.02 * detail::value_range(x);

    const Tensor base = method(x);
    const double base_norm = detail::l2_norm(base.values());

    double worst = 0.0;
    for (int j = 0; j < n; ++j) {
        Rng rng = stream_rng(seed, static_cast<uint64_t>(j));
        std::vector<float> probe(static_cast<size_t>(x.numel()));
        for (int64_t i = 0; i < x.numel(); ++i)
            probe[static_cast<size_t>(i)] =
                static_cast<float>(static_cast<double>(x.values()[i]) + rng.uniform(-r, r));
        const Tensor m = method(Tensor(x.shape(), std::move(probe)));
        if (m.shape() != base.shape())
            throw std::runtime_error("max_sensitivity: method returned maps of different shapes");
        double dist = 0.0;
        for (int64_t i = 0; i < m.numel(); ++i) {
            const double d = static_cast<double>(m.values()[i]) - static_cast<double>(base.values()[i]);
            dist += d * d;
        }
        worst = std::max(worst, std::sqrt(dist) / std::max(1e-12, base_norm));
    }
    return worst;
}

// ------------------------------------------------- cascading randomization ---

// One named group of layers randomized together; stages are listed top
// (closest to the output) to bottom.
struct RandomizationStage {
    std::string name;
    std::vector<std::string> layers;
};

struct RandomizationResult {
    std::string stage;  // "none" for the unrandomized reference
    double rho = 1.0;   // Spearman correlation of |map| against the reference
    Tensor map;
};

// Three-group default: output head(s), decoder (including the bottleneck),
// and the encoder stem, in top-to-bottom order.
inline std::vector<RandomizationStage> default_randomization_stages(const Model& model) {
    RandomizationStage head{"head", {}}, decoder{"decoder", {}}, encoder{"encoder", {}};
    for (const Layer& l : model.layers()) {
        if (l.kind != LayerKind::Conv) continue;
        if (l.name == "head" || l.name.rfind("mss", 0) == 0)
            head.layers.push_back(l.name);
        else if (l.name.rfind("dec", 0) == 0 || l.name.rfind("bottleneck", 0) == 0)
            decoder.layers.push_back(l.name);
        else
            encoder.layers.push_back(l.name);
    }
    return {std::move(head), std::move(decoder), std::move(encoder)};
}

// For k = 0..K: randomize the union of the first k stages (cumulative, drawn
// from the original model each time with the same seed so earlier stages keep
// their redrawn values), recompute the attribution, and correlate |map_k|
// with |map_0| by Spearman rank. The method closure receives each randomized
// model and must hold everything else (wrapper, parameters, method seed)
// fixed.
inline std::vector<RandomizationResult> cascading_randomization(
    const Model& model, const std::function<Tensor(const Model&, const Tensor&)>& method,
    const Tensor& x, const std::vector<RandomizationStage>& stages, uint64_t seed) {
    for (const auto& s : stages)
        for (const auto& name : s.layers) (void)model.layer(name);  // reject unknown names

    std::vector<RandomizationResult> out;
    Tensor m0 = method(model, x);
    std::vector<float> abs0(m0.values().begin(), m0.values().end());
    for (auto& v : abs0) v = std::abs(v);
    out.push_back({"none", 1.0, m0});

    std::vector<std::string> cumulative;
    for (const auto& s : stages) {
        cumulative.insert(cumulative.end(), s.layers.begin(), s.layers.end());
        const Model randomized = model.reinit_layers(cumulative, seed);
        Tensor mk = method(randomized, x);
        if (mk.shape() != m0.shape())
            throw std::runtime_error("cascading: method returned maps of different shapes");
        std::vector<float> absk(mk.values().begin(), mk.values().end());
        for (auto& v : absk) v = std::abs(v);
        out.push_back({s.name, spearman_rho(absk, abs0), std::move(mk)});
    }
    return out;
}

inline std::vector<RandomizationResult> cascading_randomization(
    const Model& model, const std::function<Tensor(const Model&, const Tensor&)>& method,
    const Tensor& x, uint64_t seed) {
    return cascading_randomization(model, method, x, default_randomization_stages(model), seed);
}

// ------------------------------------------------------------ eval report ---

struct StageCorrelation {
    std::string stage;
    double rho = 1.0;
};

// Aggregated quantitative results for one (model, method) pair, with the
// perturbation settings echoed so scores are only compared like-for-like.
struct EvalReport {
    std::string method_id;
    std::string model_id;
    double infidelity = 0.0;
    double sensitivity = 0.0;
    std::vector<StageCorrelation> randomization;  // leading entry "none", rho 1
    int infidelity_samples = 0;
    int sensitivity_samples = 0;
    double sigma = 0.0;
    double radius = 0.0;
    uint64_t seed = 0;
};

}  // namespace esegeta
