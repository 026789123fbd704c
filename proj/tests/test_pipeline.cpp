#include <esegeta/cli.hpp>

#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

namespace {

using esegeta::Json;
using esegeta::MethodContext;
using esegeta::MethodEntry;
using esegeta::MethodKind;
using esegeta::MethodResult;
using esegeta::PatchSpec;
using esegeta::PipelineConfig;
using esegeta::RunReport;
using esegeta::Tensor;

std::filesystem::path temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("esegeta_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// A smooth, non-constant volume; with the seed-42 model below, class 0 owns a
// non-trivial argmax region so gradients are non-zero.
Tensor wave_volume(const std::vector<int>& spatial) {
    int64_t n = 1;
    for (int e : spatial) n *= e;
    std::vector<float> v(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        v[static_cast<size_t>(i)] = std::sin(0.37f * static_cast<float>(i));
    return Tensor(spatial, std::move(v));
}

Json base_config(const std::filesystem::path& volume, const std::filesystem::path& out_dir) {
    Json cfg;
    cfg["model"] = {{"config", {{"dims", 2},
                                {"in_channels", 1},
                                {"classes", 2},
                                {"depth", 1},
                                {"base_channels", 4},
                                {"seed", 42}}}};
    cfg["input"] = {{"volume", volume.string()}};
    cfg["wrapper"] = {{"strategy", "pixelwise-argmax"}, {"class", 0}};
    cfg["methods"] = Json::array({Json{{"id", "saliency"}}});
    cfg["runtime"] = {{"timeout_s", 60.0},
                      {"parallelism", 1},
                      {"output_dir", out_dir.string()},
                      {"log_level", "error"}};
    return cfg;
}

std::filesystem::path write_config(const std::filesystem::path& dir, const Json& cfg) {
    const auto path = dir / "config.json";
    std::ofstream(path) << cfg.dump(2);
    return path;
}

std::string config_error(const Json& cfg) {
    try {
        (void)esegeta::load_config(cfg);
    } catch (const std::invalid_argument& e) {
        return e.what();
    }
    ADD_FAILURE() << "expected std::invalid_argument";
    return {};
}

Json read_report(const std::filesystem::path& out_dir, const char* name = "report.json") {
    return Json::parse(esegeta::detail::read_file(out_dir / name));
}

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "esegeta_cli");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    return esegeta::cli_main(static_cast<int>(argv.size()), argv.data());
}

TEST(LoadConfig, MinimalConfigAppliesDefaults) {
    Json cfg;
    cfg["model"] = {{"config", {{"dims", 2}}}};
    cfg["input"] = {{"volume", "v.evf"}};
    cfg["methods"] = Json::array({Json{{"id", "saliency"}}});
    const PipelineConfig parsed = esegeta::load_config(cfg);
    EXPECT_EQ(parsed.model.dims, 2);
    EXPECT_EQ(parsed.model.classes, 2);
    EXPECT_EQ(parsed.volumes, std::vector<std::string>{"v.evf"});
    EXPECT_EQ(parsed.methods.size(), 1u);
    EXPECT_EQ(parsed.methods[0].seed, 0u);
    EXPECT_DOUBLE_EQ(parsed.runtime.timeout_s, 60.0);
    EXPECT_EQ(parsed.runtime.parallelism, 1);
    EXPECT_FALSE(parsed.runtime.patch.has_value());
    EXPECT_FALSE(parsed.eval.infidelity);
    EXPECT_EQ(parsed.echo, cfg);
}

TEST(LoadConfig, UnknownMethodRejected) {
    Json cfg = base_config("v.evf", "out");
    cfg["methods"][0]["id"] = "gradcam++";
    EXPECT_NE(config_error(cfg).find("unknown method 'gradcam++'"), std::string::npos);
}

TEST(LoadConfig, UnknownKeysReportTheirFullPath) {
    Json top = base_config("v.evf", "out");
    top["modle"] = 1;
    EXPECT_NE(config_error(top).find("'modle'"), std::string::npos);

    Json params = base_config("v.evf", "out");
    params["methods"][0] = {{"id", "occlusion"}, {"params", {{"windoww", 2}}}};
    EXPECT_NE(config_error(params).find("methods[0].params.windoww"), std::string::npos);

    Json runtime = base_config("v.evf", "out");
    runtime["runtime"]["paralelism"] = 4;
    EXPECT_NE(config_error(runtime).find("runtime.paralelism"), std::string::npos);
}

TEST(LoadConfig, LayerRequirementsEnforced) {
    Json extra = base_config("v.evf", "out");
    extra["methods"][0]["layer"] = "enc0.act1";
    EXPECT_NE(config_error(extra).find("does not take a layer"), std::string::npos);

    Json missing = base_config("v.evf", "out");
    missing["methods"][0] = {{"id", "gradcam"}};
    EXPECT_NE(config_error(missing).find("requires a layer"), std::string::npos);
}

TEST(LoadConfig, RuntimeBoundsEnforced) {
    Json timeout = base_config("v.evf", "out");
    timeout["runtime"]["timeout_s"] = 0.0;
    EXPECT_NE(config_error(timeout).find("timeout_s"), std::string::npos);

    Json threads = base_config("v.evf", "out");
    threads["runtime"]["parallelism"] = 0;
    EXPECT_NE(config_error(threads).find("parallelism"), std::string::npos);

    Json overlap = base_config("v.evf", "out");
    overlap["runtime"]["patch"] = {{"extent", 4}, {"overlap", 4}};
    EXPECT_NE(config_error(overlap).find("overlap"), std::string::npos);
}

TEST(LoadConfig, PatchRejectsLayerMethods) {
    Json cfg = base_config("v.evf", "out");
    cfg["methods"].push_back(Json{{"id", "layer_activation"}, {"layer", "enc0.act1"}});
    cfg["runtime"]["patch"] = {{"extent", 4}, {"overlap", 0}};
    EXPECT_NE(config_error(cfg).find("layer_activation"), std::string::npos);
}

TEST(LoadConfig, InputNeedsExactlyOneVolumeKey) {
    Json both = base_config("v.evf", "out");
    both["input"]["volumes"] = Json::array({"a.evf"});
    EXPECT_NE(config_error(both).find("'volume' or 'volumes'"), std::string::npos);

    Json neither = base_config("v.evf", "out");
    neither["input"].erase("volume");
    EXPECT_NE(config_error(neither).find("'volume' or 'volumes'"), std::string::npos);
}

TEST(LoadConfig, WrapperClassMustFitTheModel) {
    Json cfg = base_config("v.evf", "out");
    cfg["wrapper"]["class"] = 2;
    EXPECT_NE(config_error(cfg).find("classes"), std::string::npos);
}

TEST(RunPipeline, WritesMapOverlayAndReport) {
    const auto dir = temp_dir("pipe_smoke");
    esegeta::write_evf(wave_volume({8, 8}), dir / "vol.evf");
    const RunReport report =
        esegeta::run_pipeline(esegeta::load_config(base_config(dir / "vol.evf", dir / "out")));

    ASSERT_EQ(report.methods.size(), 1u);
    EXPECT_EQ(report.methods[0].status, "ok");
    EXPECT_EQ(report.methods[0].params_echo, "signed=true");
    EXPECT_EQ(report.ok, 1);

    const Tensor map = esegeta::read_evf(dir / "out/m00_saliency_v0.evf");
    EXPECT_EQ(map.shape(), (std::vector<int>{1, 1, 8, 8}));
    const std::string png = esegeta::detail::read_file(dir / "out/m00_saliency_v0.png");
    EXPECT_EQ(png.substr(0, 8), std::string("\x89PNG\r\n\x1a\n", 8));

    const Json rep = read_report(dir / "out");
    EXPECT_EQ(rep["version"], esegeta::kVersion);
    EXPECT_EQ(rep["totals"]["ok"], 1);
    EXPECT_EQ(rep["methods"][0]["status"], "ok");
    EXPECT_EQ(rep["config"]["wrapper"]["class"], 0);
}

TEST(RunPipeline, OutputBytesIdenticalAtAnyParallelism) {
    const auto dir = temp_dir("pipe_parallel");
    esegeta::write_evf(wave_volume({8, 8}), dir / "vol.evf");
    Json cfg = base_config(dir / "vol.evf", dir / "p1");
    cfg["methods"] = Json::array({
        Json{{"id", "saliency"}},
        Json{{"id", "input_x_gradient"}},
        Json{{"id", "integrated_gradients"}, {"params", {{"steps", 8}}}},
        Json{{"id", "occlusion"}, {"params", {{"window", 2}, {"stride", 2}}}},
        Json{{"id", "smoothgrad"}, {"params", {{"n", 4}, {"sigma", 0.1}}}, {"seed", 9}},
    });
    esegeta::run_pipeline(esegeta::load_config(cfg));

    cfg["runtime"]["parallelism"] = 4;
    cfg["runtime"]["output_dir"] = (dir / "p4").string();
    esegeta::run_pipeline(esegeta::load_config(cfg));

    int compared = 0;
    for (const auto& entry : std::filesystem::directory_iterator(dir / "p1")) {
        const std::string name = entry.path().filename().string();
        if (name == "report.json") continue;  // holds wall-clock timings
        EXPECT_EQ(esegeta::detail::read_file(entry.path()),
                  esegeta::detail::read_file(dir / "p4" / name))
            << name;
        ++compared;
    }
    EXPECT_EQ(compared, 10);  // 5 maps + 5 overlays
}

TEST(RunPipeline, TimeoutIsContainedToTheOffendingMethod) {
    const auto dir = temp_dir("pipe_timeout");
    esegeta::write_evf(wave_volume({8, 8}), dir / "vol.evf");
    Json cfg = base_config(dir / "vol.evf", dir / "out");
    cfg["methods"] = Json::array({
        Json{{"id", "saliency"}},
        Json{{"id", "shapley_value_sampling"}, {"params", {{"permutations", 1000000}}}},
        Json{{"id", "input_x_gradient"}},
    });
    cfg["runtime"]["timeout_s"] = 1.0;
    cfg["runtime"]["parallelism"] = 2;
    const RunReport report = esegeta::run_pipeline(esegeta::load_config(cfg));

    EXPECT_EQ(report.methods[0].status, "ok");
    EXPECT_EQ(report.methods[1].status, "timeout");
    EXPECT_NE(report.methods[1].message.find("time budget"), std::string::npos);
    EXPECT_EQ(report.methods[2].status, "ok");
    EXPECT_EQ(report.timeout, 1);

    EXPECT_TRUE(std::filesystem::exists(dir / "out/m00_saliency_v0.evf"));
    EXPECT_TRUE(std::filesystem::exists(dir / "out/m02_input_x_gradient_v0.evf"));
    EXPECT_FALSE(std::filesystem::exists(dir / "out/m01_shapley_value_sampling_v0.evf"));
    EXPECT_FALSE(std::filesystem::exists(dir / "out/m01_shapley_value_sampling_v0.png"));
    EXPECT_TRUE(report.methods[1].outputs.empty());
}

TEST(RunPipeline, MethodErrorIsContainedAndReported) {
    const auto dir = temp_dir("pipe_error");
    esegeta::write_evf(wave_volume({8, 8}), dir / "vol.evf");
    Json cfg = base_config(dir / "vol.evf", dir / "out");
    cfg["methods"].push_back(
        Json{{"id", "feature_permutation"},
             {"params", {{"batch_paths", Json::array({(dir / "missing.evf").string()})}}}});
    const RunReport report = esegeta::run_pipeline(esegeta::load_config(cfg));

    EXPECT_EQ(report.methods[0].status, "ok");
    EXPECT_EQ(report.methods[1].status, "error");
    EXPECT_FALSE(report.methods[1].message.empty());
    EXPECT_EQ(report.error, 1);
    EXPECT_FALSE(std::filesystem::exists(dir / "out/m01_feature_permutation_v0.evf"));
}

TEST(RunPipeline, WholeInputPatchMatchesUnpatchedBytes) {
    const auto dir = temp_dir("pipe_patch_full");
    esegeta::write_evf(wave_volume({8, 8}), dir / "vol.evf");
    Json cfg = base_config(dir / "vol.evf", dir / "plain");
    esegeta::run_pipeline(esegeta::load_config(cfg));

    cfg["runtime"]["output_dir"] = (dir / "patched").string();
    cfg["runtime"]["patch"] = {{"extent", 8}, {"overlap", 0}};
    esegeta::run_pipeline(esegeta::load_config(cfg));

    EXPECT_EQ(esegeta::detail::read_file(dir / "plain/m00_saliency_v0.evf"),
              esegeta::detail::read_file(dir / "patched/m00_saliency_v0.evf"));
}

// The stitcher is exercised directly with a stand-in method that reports each
// tile's origin row (the input encodes the row index), so the averaged output
// is hand-computable: tiles of extent 3 with overlap 1 over 8 rows start at
// {0, 2, 4, 5} and the last two overlap on rows 5-6.
TEST(RunPipeline, PatchStitchingAveragesCoveringTiles) {
    std::vector<float> rows(8);
    for (int i = 0; i < 8; ++i) rows[static_cast<size_t>(i)] = static_cast<float>(i);
    MethodContext ctx;
    ctx.input = Tensor({1, 1, 8, 1}, std::move(rows));

    MethodEntry fake{MethodKind::Model, false, {}, [](const MethodContext& c) {
        std::vector<float> v(static_cast<size_t>(c.input.numel()), c.input.values()[0]);
        return MethodResult{Tensor(c.input.shape(), std::move(v)), "origin_row"};
    }};
    const MethodResult stitched = esegeta::run_patched(fake, ctx, PatchSpec{{3, 1}, {1, 0}});

    const float expected[8] = {0.0f, 0.0f, 1.0f, 2.0f, 3.0f, 4.5f, 4.5f, 5.0f};
    ASSERT_EQ(stitched.map.shape(), ctx.input.shape());
    for (int i = 0; i < 8; ++i) EXPECT_FLOAT_EQ(stitched.map.values()[i], expected[i]) << i;
    EXPECT_NE(stitched.params_echo.find("patch_extent=3x1"), std::string::npos);
    EXPECT_NE(stitched.params_echo.find("patch_overlap=1x0"), std::string::npos);
}

TEST(RunPipeline, EvalSectionFillsReportMetrics) {
    const auto dir = temp_dir("pipe_eval");
    esegeta::write_evf(wave_volume({8, 8}), dir / "vol.evf");
    Json cfg = base_config(dir / "vol.evf", dir / "out");
    cfg["eval"] = {{"infidelity", {{"n", 20}}},
                   {"sensitivity", {{"n", 3}}},
                   {"cascading", Json::object()},
                   {"seed", 5}};
    const RunReport report = esegeta::run_pipeline(esegeta::load_config(cfg));

    ASSERT_EQ(report.methods[0].status, "ok");
    ASSERT_TRUE(report.methods[0].has_infidelity);
    ASSERT_TRUE(report.methods[0].has_sensitivity);
    ASSERT_TRUE(report.methods[0].has_cascading);
    const esegeta::EvalReport& ev = report.methods[0].eval;
    EXPECT_TRUE(std::isfinite(ev.infidelity));
    EXPECT_GE(ev.infidelity, 0.0);
    EXPECT_GT(ev.sensitivity, 0.0);
    EXPECT_GT(ev.sigma, 0.0);
    EXPECT_GT(ev.radius, 0.0);
    ASSERT_EQ(ev.randomization.size(), 4u);
    EXPECT_EQ(ev.randomization[0].stage, "none");
    EXPECT_EQ(ev.randomization[0].rho, 1.0);

    const Json rep = read_report(dir / "out");
    EXPECT_TRUE(rep["methods"][0].contains("eval"));
    EXPECT_EQ(rep["methods"][0]["eval"]["cascading"][0]["stage"], "none");
    EXPECT_EQ(rep["methods"][0]["eval"]["cascading"][0]["rho"], 1.0);
}

TEST(RunPipeline, MultipleVolumesGetPerVolumeOutputs) {
    const auto dir = temp_dir("pipe_multivol");
    esegeta::write_evf(wave_volume({8, 8}), dir / "a.evf");
    esegeta::write_evf(wave_volume({12, 8}), dir / "b.evf");
    Json cfg = base_config(dir / "a.evf", dir / "out");
    cfg["input"].erase("volume");
    cfg["input"]["volumes"] = Json::array({(dir / "a.evf").string(), (dir / "b.evf").string()});
    const RunReport report = esegeta::run_pipeline(esegeta::load_config(cfg));

    EXPECT_EQ(report.methods[0].status, "ok");
    EXPECT_EQ(report.methods[0].outputs.size(), 4u);
    EXPECT_EQ(esegeta::read_evf(dir / "out/m00_saliency_v0.evf").shape(),
              (std::vector<int>{1, 1, 8, 8}));
    EXPECT_EQ(esegeta::read_evf(dir / "out/m00_saliency_v1.evf").shape(),
              (std::vector<int>{1, 1, 12, 8}));
}

TEST(RunPipeline, LayerMethodMapsKeepTheirLayerShape) {
    const auto dir = temp_dir("pipe_layer");
    esegeta::write_evf(wave_volume({8, 8}), dir / "vol.evf");
    Json cfg = base_config(dir / "vol.evf", dir / "out");
    cfg["methods"] = Json::array({Json{{"id", "layer_activation"}, {"layer", "enc0.act1"}}});
    const RunReport report = esegeta::run_pipeline(esegeta::load_config(cfg));

    ASSERT_EQ(report.methods[0].status, "ok") << report.methods[0].message;
    const Tensor map = esegeta::read_evf(dir / "out/m00_layer_activation_v0.evf");
    EXPECT_EQ(map.shape(), (std::vector<int>{1, 4, 8, 8}));
    EXPECT_TRUE(std::filesystem::exists(dir / "out/m00_layer_activation_v0.png"));
}

TEST(RunPipeline, ThreeDVolumeRunsAndSlices) {
    const auto dir = temp_dir("pipe_3d");
    esegeta::write_evf(wave_volume({6, 8, 8}), dir / "vol.evf");
    Json cfg = base_config(dir / "vol.evf", dir / "out");
    cfg["model"]["config"]["dims"] = 3;
    const RunReport report = esegeta::run_pipeline(esegeta::load_config(cfg));

    ASSERT_EQ(report.methods[0].status, "ok") << report.methods[0].message;
    EXPECT_EQ(esegeta::read_evf(dir / "out/m00_saliency_v0.evf").shape(),
              (std::vector<int>{1, 1, 6, 8, 8}));
    const std::string png = esegeta::detail::read_file(dir / "out/m00_saliency_v0.png");
    EXPECT_EQ(png.substr(0, 8), std::string("\x89PNG\r\n\x1a\n", 8));
}

TEST(RunPipeline, EvalPassScoresExistingMaps) {
    const auto dir = temp_dir("pipe_evalpass");
    esegeta::write_evf(wave_volume({8, 8}), dir / "vol.evf");
    Json cfg = base_config(dir / "vol.evf", dir / "out");
    cfg["eval"] = {{"infidelity", {{"n", 10}}}, {"seed", 3}};

    // before any maps exist the pass must fail per method, not crash
    const RunReport missing = esegeta::run_eval_pass(esegeta::load_config(cfg));
    EXPECT_EQ(missing.methods[0].status, "error");
    EXPECT_NE(missing.methods[0].message.find("missing map file"), std::string::npos);

    esegeta::run_pipeline(esegeta::load_config(cfg));
    const RunReport report = esegeta::run_eval_pass(esegeta::load_config(cfg));
    EXPECT_EQ(report.methods[0].status, "ok");
    EXPECT_TRUE(report.methods[0].has_infidelity);
    EXPECT_TRUE(std::filesystem::exists(dir / "out/eval_report.json"));
    const Json rep = read_report(dir / "out", "eval_report.json");
    EXPECT_TRUE(rep["methods"][0]["eval"].contains("infidelity"));
}

TEST(Cli, ListMethodsPrintsTheRegistry) {
    testing::internal::CaptureStdout();
    const int rc = run_cli({"list-methods"});
    const std::string out = testing::internal::GetCapturedStdout();
    EXPECT_EQ(rc, 0);
    EXPECT_EQ(static_cast<size_t>(std::count(out.begin(), out.end(), '\n')),
              esegeta::method_registry().size());
    EXPECT_NE(out.find("saliency\n"), std::string::npos);
    EXPECT_NE(out.find("kernel_shap\n"), std::string::npos);
    EXPECT_LT(out.find("deconvolution"), out.find("smoothgrad"));  // sorted
}

TEST(Cli, MissingConfigPathExitsOne) {
    testing::internal::CaptureStderr();
    const int rc = run_cli({"run", "/nonexistent/config.json"});
    const std::string err = testing::internal::GetCapturedStderr();
    EXPECT_EQ(rc, 1);
    EXPECT_NE(err.find("/nonexistent/config.json"), std::string::npos);
}

TEST(Cli, RunExitCodesReflectMethodFailures) {
    const auto dir = temp_dir("cli_exit");
    esegeta::write_evf(wave_volume({8, 8}), dir / "vol.evf");
    Json ok = base_config(dir / "vol.evf", dir / "out_ok");
    testing::internal::CaptureStdout();
    EXPECT_EQ(run_cli({"run", write_config(dir, ok).string()}), 0);
    testing::internal::GetCapturedStdout();

    Json slow = base_config(dir / "vol.evf", dir / "out_slow");
    slow["methods"] = Json::array(
        {Json{{"id", "shapley_value_sampling"}, {"params", {{"permutations", 1000000}}}}});
    slow["runtime"]["timeout_s"] = 0.2;
    const auto slow_path = dir / "slow.json";
    std::ofstream(slow_path) << slow.dump(2);
    testing::internal::CaptureStdout();
    EXPECT_EQ(run_cli({"run", slow_path.string()}), 2);
    testing::internal::GetCapturedStdout();
}

TEST(Cli, ExportPngProducesAPngFile) {
    const auto dir = temp_dir("cli_export");
    esegeta::write_evf(wave_volume({8, 8}), dir / "vol.evf");
    Json cfg = base_config(dir / "vol.evf", dir / "out");
    testing::internal::CaptureStdout();
    ASSERT_EQ(run_cli({"run", write_config(dir, cfg).string()}), 0);
    testing::internal::GetCapturedStdout();

    const auto png = dir / "exported.png";
    EXPECT_EQ(run_cli({"export-png", "--in", (dir / "out/m00_saliency_v0.evf").string(), "--base",
                       (dir / "vol.evf").string(), "--out", png.string()}),
              0);
    // identical reduction path, so the bytes match the pipeline's own overlay
    EXPECT_EQ(esegeta::detail::read_file(png),
              esegeta::detail::read_file(dir / "out/m00_saliency_v0.png"));
}

}  // namespace
