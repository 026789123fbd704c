// End-to-end acceptance gate: one self-contained check per release criterion,
// printed as a single PASS/FAIL line each. Exits non-zero if any check fails.
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "esegeta/pipeline.hpp"
#include "model_helpers.hpp"

using namespace esegeta;

namespace {

ModelConfig zoo_cfg(int dims, int depth, uint64_t seed, int classes = 2) {
    ModelConfig c;
    c.dims = dims;
    c.in_channels = 1;
    c.classes = classes;
    c.depth = depth;
    c.base_channels = 4;
    c.seed = seed;
    return c;
}

Tensor rand_tensor(std::vector<int> shape, uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    Rng rng = stream_rng(seed, 0);
    std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& f : v) f = static_cast<float>(rng.uniform(lo, hi));
    return Tensor(std::move(shape), std::move(v));
}

WrapperSpec nonempty_spec(const Model& m, const Tensor& x) {
    WrapperSpec spec;
    spec.class_index = 1;
    if (apply_wrapper(m.forward(x.detach()), spec).out_counts[1] == 0.0) spec.class_index = 0;
    return spec;
}

ScoreTarget linear_target(const Tensor& w) {
    ScoreTarget t;
    t.score = [w](const Tensor& x) { return sum(mul(x, w)); };
    t.score_f64 = [w](const Tensor& x) {
        double s = 0.0;
        for (int64_t i = 0; i < x.numel(); ++i)
            s += static_cast<double>(w.values()[i]) * static_cast<double>(x.values()[i]);
        return s;
    };
    return t;
}

double map_sum(const Tensor& t) {
    double s = 0.0;
    for (float v : t.values()) s += v;
    return s;
}

double max_abs_diff(const Tensor& got, const Tensor& want) {
    double worst = 0.0;
    for (int64_t i = 0; i < got.numel(); ++i)
        worst = std::max(worst,
                         std::abs(static_cast<double>(got.values()[i]) - want.values()[i]));
    return worst;
}

// Non-additive function of four values with interactions, so Shapley credit
// assignment is non-trivial.
double quad4(const Tensor& t) {
    const auto v = t.values();
    return static_cast<double>(v[0]) * v[1] + 2.0 * v[2] + static_cast<double>(v[3]) * v[3] +
           0.5 * v[0];
}

// Exact Shapley values by subset enumeration with factorial weights.
std::vector<double> brute_shapley(const std::function<double(const Tensor&)>& probe,
                                  const Tensor& x, const Tensor& b) {
    const int F = static_cast<int>(x.numel());
    const auto v = [&](uint32_t bits) {
        std::vector<float> vals(x.values().begin(), x.values().end());
        for (int i = 0; i < F; ++i)
            if (!((bits >> i) & 1u)) vals[static_cast<size_t>(i)] = b.values()[i];
        return probe(Tensor(x.shape(), std::move(vals)));
    };
    std::vector<double> fact(static_cast<size_t>(F) + 1, 1.0);
    for (int i = 1; i <= F; ++i) fact[static_cast<size_t>(i)] = fact[static_cast<size_t>(i) - 1] * i;
    std::vector<double> phi(static_cast<size_t>(F), 0.0);
    for (uint32_t bits = 0; bits < (1u << F); ++bits) {
        const int s = std::popcount(bits);
        const double vs = v(bits);
        for (int i = 0; i < F; ++i) {
            if ((bits >> i) & 1u) continue;
            const double w = fact[static_cast<size_t>(s)] * fact[static_cast<size_t>(F - s - 1)] /
                             fact[static_cast<size_t>(F)];
            phi[static_cast<size_t>(i)] += w * (v(bits | (1u << i)) - vs);
        }
    }
    return phi;
}

Tensor wave_volume(const std::vector<int>& spatial) {
    int64_t n = 1;
    for (int e : spatial) n *= e;
    std::vector<float> v(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        v[static_cast<size_t>(i)] = std::sin(0.37f * static_cast<float>(i));
    return Tensor(spatial, std::move(v));
}

std::filesystem::path fresh_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("esegeta_acceptance_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// ---------------------------------------------------------------- criteria ---

// 1. On every zoo variant the autodiff gradient of a class-weighted score
//    matches central finite differences over all input elements. Seed pairs
//    are pre-screened so no probe crosses an activation kink.
bool c1_gradient_oracle(std::string& detail) {
    struct Pin {
        int dims, depth;
        uint64_t cfg_seed, in_seed;
        float amp;
        std::vector<int> shape;
    };
    const std::vector<Pin> pins = {
        {2, 1, 6, 1013, 100.0f, {1, 1, 2, 2}},       {2, 2, 195, 1051, 100.0f, {1, 1, 4, 4}},
        {2, 3, 218, 1019, 1000.0f, {1, 1, 8, 8}},    {3, 1, 161, 1066, 100.0f, {1, 1, 2, 2, 2}},
        {3, 2, 232, 1044, 1000.0f, {1, 1, 4, 4, 4}}, {3, 3, 303, 1114, 10000.0f, {1, 1, 8, 8, 8}},
    };
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    for (const auto& p : pins) {
        const Model m = build_model(zoo_cfg(p.dims, p.depth, p.cfg_seed));
        const Tensor x = rand_tensor(p.shape, p.in_seed, -p.amp, p.amp);
        if (testutil::min_kink_margin(m, x) <= 5e-3) {
            detail = "kink margin too small for finite differences";
            return false;
        }
        std::vector<int> oshape = p.shape;
        oshape[1] = 2;
        const Tensor cw = rand_tensor(oshape, 14, 0.5f, 1.5f);
        const auto fn = [&](const Tensor& t) { return sum(mul(m.forward(t), cw)); };
        const auto probe = [&](const Tensor& t) -> double {
            const std::vector<double> y = m.forward_f64(t);
            double s = 0.0;
            for (size_t i = 0; i < y.size(); ++i) s += y[i] * cw.values()[i];
            return s;
        };
        worst = std::max(worst, grad_check(fn, probe, x, 1e-3));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char buf[128];
    std::snprintf(buf, sizeof buf, "worst rel %.2e over 6 models, %.1f s", worst, secs);
    detail = buf;
    return worst < 1e-3 && secs < 60.0;
}

// 2. On score(x) = <w, x> with x = 1 and a zero baseline, the whole method
//    family reduces to w (elementwise) within 1e-6.
bool c2_linear_concordance(std::string& detail) {
    const Tensor w = rand_tensor({1, 1, 2, 4}, 101);
    const Tensor x = Tensor::full({1, 1, 2, 4}, 1.0f);
    const ScoreTarget t = linear_target(w);
    const Baseline zero = Baseline::zeros();

    PerturbSpec pixel;
    pixel.window = {1, 1};
    pixel.stride = {1, 1};

    double worst = 0.0;
    worst = std::max(worst, max_abs_diff(saliency(t, x).values, w));
    worst = std::max(worst, max_abs_diff(integrated_gradients(t, x, zero, 7).values, w));
    worst = std::max(worst, max_abs_diff(occlusion(t, x, pixel).values, w));
    worst = std::max(worst, max_abs_diff(shapley_value_sampling(t, x, zero, 8, 3).values, w));
    worst = std::max(worst, max_abs_diff(deeplift_rescale(t, x, zero).values, w));
    worst = std::max(worst, max_abs_diff(gradient_shap(t, x, zero, 5, 0.0f, 5).values, w));

    char buf[96];
    std::snprintf(buf, sizeof buf, "6 methods vs closed form, worst abs %.2e", worst);
    detail = buf;
    return worst < 1e-6;
}

// 3. Integrated-gradients attributions sum to the score difference between
//    the input and the baseline (relative 1e-2 at 128 steps).
bool c3_ig_completeness(std::string& detail) {
    const Model m = build_model(zoo_cfg(2, 1, 6));
    const Tensor x = rand_tensor({1, 1, 4, 4}, 77);
    const ScoreTarget t = make_model_target(m, nonempty_spec(m, x), x);
    const Baseline zero = Baseline::zeros();

    const AttributionMap map = integrated_gradients(t, x, zero, 128);
    const double delta = t.value(x) - t.value(zero.materialize(x.shape()));
    const double rel = std::abs(map_sum(map.values) - delta) / std::abs(delta);
    char buf[64];
    std::snprintf(buf, sizeof buf, "rel err %.2e at 128 steps", rel);
    detail = buf;
    return delta != 0.0 && rel < 1e-2;
}

// 4. DeepLift (rescale rule) attributions sum to the exact score difference
//    on a conv+relu net, for both a zero and a gaussian baseline.
bool c4_deeplift_delta(std::string& detail) {
    const Tensor w1 = rand_tensor({3, 2, 3, 3}, 201, -0.5f, 0.5f);
    const Tensor b1 = rand_tensor({3}, 202, -0.2f, 0.2f);
    const Tensor w2 = rand_tensor({1, 3, 1, 1}, 203, -0.5f, 0.5f);
    ScoreTarget t;
    t.score = [&](const Tensor& in) { return sum(conv2d(relu(conv2d(in, w1, b1, 1, 1)), w2)); };
    const Tensor x = rand_tensor({1, 2, 4, 4}, 204);

    double worst = 0.0;
    for (const Baseline& b : {Baseline::zeros(), Baseline::gaussian(0.5f, 7)}) {
        const AttributionMap m = deeplift_rescale(t, x, b);
        const double delta = static_cast<double>(t.score(x).item()) -
                             static_cast<double>(t.score(b.materialize(x.shape())).item());
        if (delta == 0.0) return false;
        worst = std::max(worst, std::abs(map_sum(m.values) - delta) / std::abs(delta));
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "rel err %.2e over 2 baselines", worst);
    detail = buf;
    return worst < 1e-3;
}

// 5. On a 4-feature toy score, the exhaustive permutation walk and exhaustive
//    kernel regression both reproduce brute-force subset Shapley values, and
//    the walk's total telescopes to v(x) - v(baseline).
bool c5_shapley_exactness(std::string& detail) {
    const Tensor x({1, 1, 2, 2}, {0.5f, 1.0f, 1.5f, 2.0f});
    const Baseline base = Baseline::constant(0.1f);
    const Tensor b = base.materialize(x.shape());
    ScoreTarget t;
    t.score_f64 = quad4;

    const std::vector<double> want = brute_shapley(quad4, x, b);
    const AttributionMap walk = shapley_value_sampling(t, x, base, 0, 0, /*exhaustive=*/true);
    const AttributionMap kern =
        kernel_shap(t, x, PatchGrid{{2, 2}}, 0, 0.0f, base, 0, /*exhaustive=*/true);

    double worst = 0.0;
    for (int i = 0; i < 4; ++i) {
        worst = std::max(worst, std::abs(walk.values.values()[i] - want[static_cast<size_t>(i)]));
        worst = std::max(worst, std::abs(kern.values.values()[i] - want[static_cast<size_t>(i)]));
    }
    const double efficiency = std::abs(map_sum(walk.values) - (quad4(x) - quad4(b)));
    char buf[96];
    std::snprintf(buf, sizeof buf, "walk+kernel worst abs %.2e, efficiency gap %.2e", worst,
                  efficiency);
    detail = buf;
    return worst < 1e-6 && efficiency < 1e-6;
}

// 6. Layer conductance through a full graph cut (enc0.act1) sums to the score
//    difference between the input and the zero baseline (relative 2e-2, 128
//    steps).
bool c6_conductance_completeness(std::string& detail) {
    const Model m = build_model(zoo_cfg(2, 1, 6));
    const Tensor x = rand_tensor({1, 1, 8, 8}, 1013, -100.0f, 100.0f);
    const ScoreTarget t = make_model_target(m, nonempty_spec(m, x), x);

    const LayerAttributionMap cond = layer_conductance(t, x, Baseline::zeros(), "enc0.act1", 128);
    const Tensor zero(x.shape(), std::vector<float>(static_cast<size_t>(x.numel()), 0.0f));
    const double delta = t.value(x) - t.value(zero);
    const double rel = std::abs(map_sum(cond.values) - delta) / std::abs(delta);
    char buf[64];
    std::snprintf(buf, sizeof buf, "rel err %.2e at 128 steps", rel);
    detail = buf;
    return std::abs(delta) > 1e-6 && rel < 2e-2;
}

// 7. Infidelity closed forms on a linear score: the gradient attribution at
//    x = 0 scores exactly zero; the zero attribution converges to the
//    analytic value sigma^2 * ||w||^2.
bool c7_infidelity_closed_forms(std::string& detail) {
    const Tensor w = rand_tensor({1, 1, 2, 3}, 7);
    const Tensor x({1, 1, 2, 3}, std::vector<float>(6, 0.0f));
    const ScoreTarget t = linear_target(w);

    const double exact = infidelity(t, x, w, 200, 0.25, 3);

    const Tensor zero_map(x.shape(), std::vector<float>(6, 0.0f));
    const double measured = infidelity(t, x, zero_map, 5000, 0.25, 11);
    double w2 = 0.0;
    for (float v : w.values()) w2 += static_cast<double>(v) * v;
    const double analytic = 0.25 * 0.25 * w2;
    const double rel = std::abs(measured - analytic) / analytic;

    char buf[96];
    std::snprintf(buf, sizeof buf, "gradient map %.1e (exact 0), variance rel err %.2e", exact, rel);
    detail = buf;
    return exact == 0.0 && rel < 0.1;
}

// 8. Max-sensitivity of saliency on a linear score is exactly zero: the
//    gradient is the same constant w at every probe.
bool c8_sensitivity_zero(std::string& detail) {
    const Tensor w = rand_tensor({1, 1, 2, 3}, 7);
    const Tensor x = rand_tensor({1, 1, 2, 3}, 13);
    const ScoreTarget t = linear_target(w);
    const double s =
        max_sensitivity([&](const Tensor& in) { return saliency(t, in).values; }, x, 10);
    char buf[48];
    std::snprintf(buf, sizeof buf, "value %.1e", s);
    detail = buf;
    return s == 0.0;
}

// 9. Cascading weight randomization: the rank correlation of saliency maps
//    starts at exactly 1, decays below 0.5 once all layers are randomized,
//    and the whole sequence is reproducible under the same seed.
bool c9_cascading_decay(std::string& detail) {
    struct Pin {
        int dims, depth;
        uint64_t cfg_seed;
        std::vector<int> shape;
    };
    const std::vector<Pin> pins = {
        {2, 1, 6, {1, 1, 16, 16}},    {2, 2, 195, {1, 1, 16, 16}}, {2, 3, 218, {1, 1, 16, 16}},
        {3, 1, 161, {1, 1, 8, 8, 8}}, {3, 2, 232, {1, 1, 8, 8, 8}}, {3, 3, 303, {1, 1, 8, 8, 8}},
    };
    double worst_final = -1.0;
    for (const auto& p : pins) {
        const Model m = build_model(zoo_cfg(p.dims, p.depth, p.cfg_seed));
        const Tensor x = rand_tensor(p.shape, 1013);
        const auto method = [](const Model& mm, const Tensor& in) {
            return saliency(make_model_target(mm, nonempty_spec(mm, in), in), in).values;
        };
        const auto run1 = cascading_randomization(m, method, x, 17);
        const auto run2 = cascading_randomization(m, method, x, 17);
        if (run1.front().stage != "none" || run1.front().rho != 1.0) {
            detail = "sequence does not start at exactly 1";
            return false;
        }
        for (size_t k = 0; k < run1.size(); ++k)
            if (run1[k].rho != run2[k].rho) {
                detail = "sequence not reproducible under a fixed seed";
                return false;
            }
        worst_final = std::max(worst_final, run1.back().rho);
    }
    char buf[80];
    std::snprintf(buf, sizeof buf, "worst final rho %.3f over 6 models", worst_final);
    detail = buf;
    return worst_final < 0.5;
}

// 10. The batch runner writes byte-identical maps at parallelism 1 and 4, and
//     a forced-timeout method leaves every other method's bytes untouched.
bool c10_pipeline_determinism(std::string& detail) {
    const auto dir = fresh_dir("pipeline");
    write_evf(wave_volume({8, 8}), dir / "vol.evf");

    Json cfg;
    cfg["model"] = {{"config", {{"dims", 2}, {"in_channels", 1}, {"classes", 2}, {"depth", 1},
                                {"base_channels", 4}, {"seed", 42}}}};
    cfg["input"] = {{"volume", (dir / "vol.evf").string()}};
    cfg["wrapper"] = {{"strategy", "pixelwise-argmax"}, {"class", 0}};
    cfg["methods"] = Json::array({
        Json{{"id", "saliency"}},
        Json{{"id", "input_x_gradient"}},
        Json{{"id", "integrated_gradients"}, {"params", {{"steps", 8}}}},
        Json{{"id", "occlusion"}, {"params", {{"window", 2}, {"stride", 2}}}},
        Json{{"id", "smoothgrad"}, {"params", {{"n", 4}, {"sigma", 0.1}}}, {"seed", 9}},
    });
    cfg["runtime"] = {{"timeout_s", 60.0}, {"parallelism", 1},
                      {"output_dir", (dir / "p1").string()}, {"log_level", "error"}};
    run_pipeline(load_config(cfg));

    cfg["runtime"]["parallelism"] = 4;
    cfg["runtime"]["output_dir"] = (dir / "p4").string();
    run_pipeline(load_config(cfg));

    const std::vector<std::string> stems = {"m00_saliency", "m01_input_x_gradient",
                                            "m02_integrated_gradients", "m03_occlusion",
                                            "m04_smoothgrad"};
    for (const auto& s : stems)
        for (const char* ext : {".evf", ".png"})
            if (detail::read_file(dir / "p1" / (s + "_v0" + ext)) !=
                detail::read_file(dir / "p4" / (s + "_v0" + ext))) {
                detail = "bytes differ between parallelism 1 and 4: " + s + ext;
                return false;
            }

    // append a method guaranteed to exceed the budget; earlier outputs must
    // not move by a single byte and the victim must leave no files
    cfg["methods"].push_back(
        Json{{"id", "shapley_value_sampling"}, {"params", {{"permutations", 1000000}}}});
    cfg["runtime"]["timeout_s"] = 1.0;
    cfg["runtime"]["parallelism"] = 2;
    cfg["runtime"]["output_dir"] = (dir / "forced").string();
    const RunReport forced = run_pipeline(load_config(cfg));
    if (forced.methods[5].status != "timeout") {
        detail = "expected the appended method to time out";
        return false;
    }
    if (std::filesystem::exists(dir / "forced/m05_shapley_value_sampling_v0.evf")) {
        detail = "timed-out method left output files";
        return false;
    }
    for (const auto& s : stems)
        for (const char* ext : {".evf", ".png"})
            if (detail::read_file(dir / "p1" / (s + "_v0" + ext)) !=
                detail::read_file(dir / "forced" / (s + "_v0" + ext))) {
                detail = "timeout run changed other methods' bytes: " + s + ext;
                return false;
            }
    detail = "10 files byte-identical at p1/p4 and under a forced timeout";
    return true;
}

// 11. Both segmentation wrappers reproduce hand-enumerated 4-pixel oracles
//     exactly.
bool c11_wrapper_oracles(std::string& detail) {
    const Tensor scores({1, 2, 2, 2}, {1, 1, 1, 1, 2, 0, 0, 0});
    const WrapperResult r1 = wrap_pixelwise(scores, 1);
    const WrapperResult r0 = wrap_pixelwise(scores, 0);
    bool ok = r1.score.item() == 2.0f && r0.score.item() == 3.0f && r1.out_sums[1] == 2.0 &&
              r1.out_sums[0] == 3.0 && r1.out_counts[1] == 1.0 && r1.out_counts[0] == 3.0 &&
              r1.labels.values()[0] == 1.0f && r1.labels.values()[1] == 0.0f &&
              r1.labels.values()[2] == 0.0f && r1.labels.values()[3] == 0.0f;

    const Tensor probs({1, 1, 2, 2}, {0.1f, 0.1f, 0.9f, 0.9f});
    const WrapperResult t1 = wrap_threshold(probs, 1);
    const WrapperResult t0 = wrap_threshold(probs, 0);
    ok = ok && t1.score.item() == 0.9f + 0.9f && t0.score.item() == 0.1f + 0.1f &&
         t1.out_counts[1] == 2.0 && t1.threshold > 0.0 && t1.threshold < 1.0;

    detail = "argmax and threshold wrappers vs hand enumeration";
    return ok;
}

// 12. A full desk-scale run — 16^3 volume, 6 methods, every metric — finishes
//     well under the five-minute budget with all methods reporting ok.
bool c12_end_to_end(std::string& detail) {
    const auto dir = fresh_dir("e2e");
    write_evf(wave_volume({16, 16, 16}), dir / "vol.evf");

    Json cfg;
    cfg["model"] = {{"config", {{"dims", 3}, {"in_channels", 1}, {"classes", 1}, {"depth", 1},
                                {"base_channels", 4}, {"seed", 42}}}};
    cfg["input"] = {{"volume", (dir / "vol.evf").string()}};
    cfg["wrapper"] = {{"strategy", "threshold-otsu"}, {"class", 0}};
    cfg["methods"] = Json::array({
        Json{{"id", "saliency"}},
        Json{{"id", "input_x_gradient"}},
        Json{{"id", "integrated_gradients"}, {"params", {{"steps", 16}}}},
        Json{{"id", "feature_ablation"}, {"params", {{"grid", 2}}}},
        Json{{"id", "smoothgrad"}, {"params", {{"n", 4}, {"sigma", 0.1}}}, {"seed", 9}},
        Json{{"id", "occlusion"}, {"params", {{"window", 4}, {"stride", 4}}}},
    });
    cfg["eval"] = {{"infidelity", {{"n", 50}}}, {"sensitivity", {{"n", 2}}},
                   {"cascading", Json::object()}, {"seed", 17}};
    cfg["runtime"] = {{"timeout_s", 240.0}, {"parallelism", 2},
                      {"output_dir", (dir / "out").string()}, {"log_level", "error"}};

    const auto t0 = std::chrono::steady_clock::now();
    const RunReport report = run_pipeline(load_config(cfg));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    char buf[96];
    std::snprintf(buf, sizeof buf, "6 methods + 3 metrics in %.1f s (budget 300)", secs);
    detail = buf;
    if (report.ok != 6) {
        for (const auto& m : report.methods)
            if (m.status != "ok") detail += "; " + m.id + ": " + m.message;
        return false;
    }
    return secs < 300.0;
}

}  // namespace

int main() {
    struct Criterion {
        const char* name;
        bool (*run)(std::string&);
    };
    const std::vector<Criterion> criteria = {
        {"gradients match finite differences on every zoo model", c1_gradient_oracle},
        {"attribution family agrees with the linear closed form", c2_linear_concordance},
        {"integrated gradients satisfy completeness", c3_ig_completeness},
        {"deeplift attributions sum to the score delta", c4_deeplift_delta},
        {"sampling-free shapley matches subset enumeration", c5_shapley_exactness},
        {"layer conductance sums to the prediction difference", c6_conductance_completeness},
        {"infidelity matches its closed forms on a linear score", c7_infidelity_closed_forms},
        {"max-sensitivity of saliency on a linear score is zero", c8_sensitivity_zero},
        {"cascading randomization decays rank correlation", c9_cascading_decay},
        {"batch runner is deterministic and contains timeouts", c10_pipeline_determinism},
        {"segmentation wrappers match hand-enumerated oracles", c11_wrapper_oracles},
        {"16^3 volume end-to-end run fits the time budget", c12_end_to_end},
    };

    int failures = 0;
    for (size_t i = 0; i < criteria.size(); ++i) {
        std::string detail;
        bool ok = false;
        try {
            ok = criteria[i].run(detail);
        } catch (const std::exception& e) {
            detail = std::string("exception: ") + e.what();
        }
        std::printf("%s %2zu. %s (%s)\n", ok ? "PASS" : "FAIL", i + 1, criteria[i].name,
                    detail.c_str());
        std::fflush(stdout);
        if (!ok) ++failures;
    }
    std::printf("%d/%zu acceptance criteria passed\n", static_cast<int>(criteria.size()) - failures,
                criteria.size());
    return failures == 0 ? 0 : 1;
}
