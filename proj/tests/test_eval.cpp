#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "esegeta/eval.hpp"
#include "model_helpers.hpp"
#include "oracle_helpers.hpp"

using namespace esegeta;
using testutil::rand_tensor;

namespace {

ModelConfig cfg2d(uint64_t seed = 42) {
    ModelConfig c;
    c.dims = 2;
    c.in_channels = 1;
    c.classes = 2;
    c.depth = 1;
    c.base_channels = 4;
    c.seed = seed;
    return c;
}

// score(x) = sum_i w_i x_i, with a double-path score whose summation order
// matches the metric's own accumulators.
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

// Picks a class whose frozen mask is non-empty so the score is non-trivial.
WrapperSpec nonempty_spec(const Model& m, const Tensor& x) {
    WrapperSpec spec;
    spec.class_index = 1;
    WrapperResult r = apply_wrapper(m.forward(x.detach()), spec);
    if (r.out_counts[1] == 0.0) spec.class_index = 0;
    return spec;
}

Tensor zeros_like(const Tensor& t) {
    return Tensor(t.shape(), std::vector<float>(static_cast<size_t>(t.numel()), 0.0f));
}

// Saliency recomputed per model, as the randomization procedure requires.
Tensor saliency_of(const Model& m, const Tensor& x) {
    const ScoreTarget t = make_model_target(m, nonempty_spec(m, x), x);
    return saliency(t, x).values;
}

}  // namespace

// ---------------------------------------------------------------- spearman ---

TEST(Spearman, IdenticalVectorsGiveExactlyOne) {
    const std::vector<float> a = {3.0f, 1.0f, 2.0f, 5.0f, -4.0f};
    EXPECT_EQ(spearman_rho(a, a), 1.0);
    const std::vector<float> tied = {1.0f, 1.0f, 2.0f};
    EXPECT_EQ(spearman_rho(tied, tied), 1.0);
}

TEST(Spearman, ReversedRankingGivesExactlyMinusOne) {
    const std::vector<float> a = {1.0f, 2.0f, 3.0f, 4.0f};
    const std::vector<float> b = {4.0f, 3.0f, 2.0f, 1.0f};
    EXPECT_EQ(spearman_rho(a, b), -1.0);
}

TEST(Spearman, HandComputedSwapCase) {
    const std::vector<float> a = {1.0f, 2.0f, 3.0f, 4.0f};
    const std::vector<float> b = {1.0f, 3.0f, 2.0f, 4.0f};
    // d = (0, -1, 1, 0), sum d^2 = 2, rho = 1 - 6*2 / (4*15) = 0.8
    EXPECT_DOUBLE_EQ(spearman_rho(a, b), 0.8);
}

TEST(Spearman, AverageRanksOnTies) {
    const std::vector<float> a = {1.0f, 1.0f, 2.0f};
    const std::vector<float> b = {1.0f, 2.0f, 3.0f};
    // ranks a = (1.5, 1.5, 3), b = (1, 2, 3): rho = 1.5 / sqrt(1.5 * 2)
    EXPECT_NEAR(spearman_rho(a, b), std::sqrt(3.0) / 2.0, 1e-12);
}

TEST(Spearman, InvariantUnderMonotoneTransform) {
    const std::vector<float> a = {0.2f, -1.0f, 3.0f, 0.5f, 2.0f};
    std::vector<float> b(a.size());
    for (size_t i = 0; i < a.size(); ++i) b[i] = a[i] * a[i] * a[i];
    EXPECT_EQ(spearman_rho(a, b), 1.0);
}

TEST(Spearman, ValidatesArguments) {
    const std::vector<float> a = {1.0f, 2.0f, 3.0f};
    const std::vector<float> shorter = {1.0f, 2.0f};
    const std::vector<float> single = {1.0f};
    const std::vector<float> constant = {2.0f, 2.0f, 2.0f};
    EXPECT_THROW(spearman_rho(a, shorter), std::invalid_argument);
    EXPECT_THROW(spearman_rho(single, single), std::invalid_argument);
    EXPECT_THROW(spearman_rho(constant, a), std::invalid_argument);
}

// -------------------------------------------------------------- infidelity ---

TEST(Infidelity, ExactAttributionOfLinearScoreIsExactlyZero) {
    const Tensor w = rand_tensor({1, 1, 4, 4}, 33);
    const Tensor x = zeros_like(w);
    const ScoreTarget t = linear_target(w);
    // sum(I * w) and score(x) - score(x - I) are the same double sum, so
    // every squared term vanishes identically.
    EXPECT_EQ(infidelity(t, x, w, 64, 0.5, 9), 0.0);
}

TEST(Infidelity, ZeroAttributionMatchesClosedFormVariance) {
    const Tensor w = rand_tensor({1, 1, 4, 4}, 12);
    const Tensor x = zeros_like(w);
    const ScoreTarget t = linear_target(w);
    const double sigma = 0.25;
    double w2 = 0.0;
    for (float v : w.values()) w2 += static_cast<double>(v) * v;
    const double expected = sigma * sigma * w2;  // E[(w . I)^2], I ~ N(0, sigma^2)

    const double got = infidelity(t, x, zeros_like(w), 5000, sigma, 4);
    EXPECT_NEAR(got, expected, 0.1 * expected);
}

TEST(Infidelity, UniformlyOverstatedAttributionMatchesSameClosedForm) {
    const Tensor w = rand_tensor({1, 1, 4, 4}, 12);
    const Tensor x = zeros_like(w);
    const ScoreTarget t = linear_target(w);
    std::vector<float> doubled(w.values().begin(), w.values().end());
    for (auto& v : doubled) v *= 2.0f;

    // With attribution 2w each term is (2 w.I - w.I)^2 = (w.I)^2; with
    // attribution 0 it is (-w.I)^2. The estimates agree term by term.
    const double over = infidelity(t, x, Tensor(w.shape(), doubled), 800, 0.25, 4);
    const double zero = infidelity(t, x, zeros_like(w), 800, 0.25, 4);
    EXPECT_DOUBLE_EQ(over, zero);
}

TEST(Infidelity, DeterministicUnderFixedSeed) {
    const Model m = build_model(cfg2d());
    const Tensor x = rand_tensor({1, 1, 8, 8}, 77);
    const ScoreTarget t = make_model_target(m, nonempty_spec(m, x), x);
    const Tensor attr = saliency(t, x).values;

    const double a = infidelity(t, x, attr, 25, 0.0, 3);
    const double b = infidelity(t, x, attr, 25, 0.0, 3);
    const double c = infidelity(t, x, attr, 25, 0.0, 4);
    EXPECT_DOUBLE_EQ(a, b);
    EXPECT_NE(a, c);
    EXPECT_TRUE(std::isfinite(a));
    EXPECT_GE(a, 0.0);
}

TEST(Infidelity, ValidatesArguments) {
    const Tensor w = rand_tensor({1, 1, 4, 4}, 5);
    const Tensor x = zeros_like(w);
    const ScoreTarget t = linear_target(w);
    const Tensor wrong_shape = rand_tensor({1, 1, 2, 8}, 5);

    EXPECT_THROW(infidelity(t, x, wrong_shape, 8, 0.5, 0), std::invalid_argument);
    EXPECT_THROW(infidelity(t, x, w, 0, 0.5, 0), std::invalid_argument);
    EXPECT_THROW(infidelity(t, x, w, 8, -0.5, 0), std::invalid_argument);
    // a constant input has zero range, so the default sigma is rejected
    const Tensor flat(std::vector<int>{1, 1, 4, 4},
                      std::vector<float>(16, 0.5f));
    EXPECT_THROW(infidelity(t, flat, w, 8, 0.0, 0), std::invalid_argument);
}

// --------------------------------------------------------- max-sensitivity ---

TEST(MaxSensitivity, SaliencyOfLinearScoreIsExactlyZero) {
    const Tensor w = rand_tensor({1, 1, 4, 4}, 21);
    const Tensor x = rand_tensor({1, 1, 4, 4}, 22);
    const ScoreTarget t = linear_target(w);
    const auto method = [&](const Tensor& in) { return saliency(t, in).values; };
    // the gradient of a linear score is the constant w, so every probe map
    // matches the reference bitwise
    EXPECT_EQ(max_sensitivity(method, x, 10, 0.1, 5), 0.0);
}

TEST(MaxSensitivity, ZeroRadiusIsExactlyZero) {
    const Model m = build_model(cfg2d());
    const Tensor x = rand_tensor({1, 1, 8, 8}, 31);
    const ScoreTarget t = make_model_target(m, nonempty_spec(m, x), x);
    const auto method = [&](const Tensor& in) { return saliency(t, in).values; };
    EXPECT_EQ(max_sensitivity(method, x, 5, 0.0, 5), 0.0);
}

TEST(MaxSensitivity, MonotoneInSampleCountUnderSharedStream) {
    const Model m = build_model(cfg2d());
    const Tensor x = rand_tensor({1, 1, 8, 8}, 31);
    const ScoreTarget t = make_model_target(m, nonempty_spec(m, x), x);
    const auto method = [&](const Tensor& in) { return saliency(t, in).values; };

    const double s4 = max_sensitivity(method, x, 4, -1.0, 11);
    const double s10 = max_sensitivity(method, x, 10, -1.0, 11);
    EXPECT_GT(s4, 0.0);
    EXPECT_GE(s10, s4);  // probes 0..3 are shared, so the max can only grow
}

TEST(MaxSensitivity, NegativeRadiusRequestsTheDefault) {
    const Model m = build_model(cfg2d());
    const Tensor x = rand_tensor({1, 1, 8, 8}, 31);
    const ScoreTarget t = make_model_target(m, nonempty_spec(m, x), x);
    const auto method = [&](const Tensor& in) { return saliency(t, in).values; };

    float lo = x.values()[0], hi = x.values()[0];
    for (float v : x.values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double r = 0.02 * (static_cast<double>(hi) - static_cast<double>(lo));
    EXPECT_DOUBLE_EQ(max_sensitivity(method, x, 6, -1.0, 11),
                     max_sensitivity(method, x, 6, r, 11));
}

TEST(MaxSensitivity, MismatchedMapShapesThrow) {
    const Tensor x = rand_tensor({1, 4}, 2);
    int calls = 0;
    const auto fickle = [&](const Tensor&) {
        ++calls;
        if (calls == 1) return Tensor({1, 4}, std::vector<float>(4, 1.0f));
        return Tensor({2, 2}, std::vector<float>(4, 1.0f));
    };
    EXPECT_THROW(max_sensitivity(fickle, x, 3, 0.1, 0), std::runtime_error);
}

TEST(MaxSensitivity, ValidatesArguments) {
    const Tensor x = rand_tensor({1, 4}, 2);
    const auto method = [](const Tensor& in) { return in; };
    EXPECT_THROW(max_sensitivity(method, x, 0, 0.1, 0), std::invalid_argument);
}

// ------------------------------------------------- cascading randomization ---

TEST(CascadingRandomization, ReferenceStageIsExactlyOne) {
    const Model m = build_model(cfg2d());
    const Tensor x = rand_tensor({1, 1, 8, 8}, 31);

    const auto res = cascading_randomization(m, saliency_of, x, 5);
    ASSERT_EQ(res.size(), 4u);  // reference plus three default stages
    EXPECT_EQ(res[0].stage, "none");
    EXPECT_EQ(res[0].rho, 1.0);

    const Tensor direct = saliency_of(m, x);
    ASSERT_EQ(res[0].map.shape(), direct.shape());
    for (int64_t i = 0; i < direct.numel(); ++i)
        EXPECT_EQ(res[0].map.values()[i], direct.values()[i]) << i;
}

TEST(CascadingRandomization, DefaultStagesPartitionConvLayers) {
    ModelConfig c = cfg2d();
    c.depth = 2;
    c.mss = true;
    const Model m = build_model(c);

    const auto stages = default_randomization_stages(m);
    ASSERT_EQ(stages.size(), 3u);
    EXPECT_EQ(stages[0].name, "head");
    EXPECT_EQ(stages[1].name, "decoder");
    EXPECT_EQ(stages[2].name, "encoder");

    std::set<std::string> staged;
    for (const auto& s : stages)
        for (const auto& n : s.layers) EXPECT_TRUE(staged.insert(n).second) << n;
    std::set<std::string> convs;
    for (const auto& l : m.layers())
        if (l.kind == LayerKind::Conv) convs.insert(l.name);
    EXPECT_EQ(staged, convs);

    const auto& head = stages[0].layers;
    EXPECT_NE(std::find(head.begin(), head.end(), "head"), head.end());
    EXPECT_NE(std::find(head.begin(), head.end(), "mss2.head"), head.end());
    const auto& dec = stages[1].layers;
    EXPECT_NE(std::find(dec.begin(), dec.end(), "bottleneck.conv0"), dec.end());
    EXPECT_NE(std::find(dec.begin(), dec.end(), "dec0.conv0"), dec.end());
    const auto& enc = stages[2].layers;
    EXPECT_NE(std::find(enc.begin(), enc.end(), "enc0.conv0"), enc.end());
}

TEST(CascadingRandomization, FullRandomizationDecorrelates) {
    const Model m = build_model(cfg2d(6));
    const Tensor x = rand_tensor({1, 1, 16, 16}, 1013);

    const auto res = cascading_randomization(m, saliency_of, x, 17);
    ASSERT_EQ(res.size(), 4u);
    EXPECT_EQ(res[0].rho, 1.0);
    for (const auto& r : res) {
        EXPECT_LE(std::abs(r.rho), 1.0 + 1e-12) << r.stage;
        EXPECT_TRUE(std::isfinite(r.rho)) << r.stage;
    }
    EXPECT_LT(res.back().rho, 0.5);
}

TEST(CascadingRandomization, CumulativeStagesMatchDirectReinit) {
    const Model m = build_model(cfg2d());
    const Tensor x = rand_tensor({1, 1, 8, 8}, 31);
    const uint64_t seed = 5;

    const auto stages = default_randomization_stages(m);
    const auto res = cascading_randomization(m, saliency_of, x, stages, seed);

    std::vector<std::string> cumulative;
    cumulative.insert(cumulative.end(), stages[0].layers.begin(), stages[0].layers.end());
    cumulative.insert(cumulative.end(), stages[1].layers.begin(), stages[1].layers.end());
    const Tensor direct = saliency_of(m.reinit_layers(cumulative, seed), x);

    ASSERT_EQ(res[2].map.shape(), direct.shape());
    for (int64_t i = 0; i < direct.numel(); ++i)
        EXPECT_EQ(res[2].map.values()[i], direct.values()[i]) << i;
}

TEST(CascadingRandomization, DeterministicAcrossRuns) {
    const Model m = build_model(cfg2d());
    const Tensor x = rand_tensor({1, 1, 8, 8}, 31);

    const auto a = cascading_randomization(m, saliency_of, x, 5);
    const auto b = cascading_randomization(m, saliency_of, x, 5);
    ASSERT_EQ(a.size(), b.size());
    for (size_t k = 0; k < a.size(); ++k) {
        EXPECT_EQ(a[k].stage, b[k].stage);
        EXPECT_DOUBLE_EQ(a[k].rho, b[k].rho);
        for (int64_t i = 0; i < a[k].map.numel(); ++i)
            EXPECT_EQ(a[k].map.values()[i], b[k].map.values()[i]);
    }
}

TEST(CascadingRandomization, UnknownStageLayerThrows) {
    const Model m = build_model(cfg2d());
    const Tensor x = rand_tensor({1, 1, 8, 8}, 31);
    const std::vector<RandomizationStage> stages = {{"bogus", {"no.such.layer"}}};
    EXPECT_THROW(cascading_randomization(m, saliency_of, x, stages, 5), std::invalid_argument);
}
