#pragma once

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <map>
#include <mutex>
#include <optional>
#include <thread>

#include <nlohmann/json.hpp>

#include "eval.hpp"
#include "layer_attribution.hpp"
#include "png_io.hpp"
#include "volume_io.hpp"
#include "weights_io.hpp"

// JSON-config batch runner: a registry of attribution methods, a scheduler
// that executes configured methods concurrently under per-method cooperative
// deadlines, optional patch-based execution, metric evaluation, and a JSON
// run report. Every method owns its RNG streams and accumulates in fixed
// order, so EVF outputs are byte-identical at any parallelism degree.
namespace esegeta {

using Json = nlohmann::json;

inline constexpr const char* kVersion = "esegeta 1.0.0";

// ------------------------------------------------------------------ logging ---

enum class LogLevel { Debug = 0, Info = 1, Warn = 2, Error = 3 };

inline LogLevel log_level_from_string(const std::string& s) {
    if (s == "debug") return LogLevel::Debug;
    if (s == "info") return LogLevel::Info;
    if (s == "warn") return LogLevel::Warn;
    if (s == "error") return LogLevel::Error;
    throw std::invalid_argument("config: unknown log level '" + s + "'");
}

namespace detail {

inline std::atomic<int>& log_threshold() {
    static std::atomic<int> level{static_cast<int>(LogLevel::Info)};
    return level;
}

inline std::string iso8601_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t secs = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&secs, &tm);
    const auto ms =
        std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    char buf[80];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                  tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec,
                  static_cast<int>(ms));
    return buf;
}

inline void log_line(LogLevel level, const std::string& method, const std::string& msg) {
    if (static_cast<int>(level) < log_threshold().load(std::memory_order_relaxed)) return;
    static std::mutex mu;
    static constexpr const char* names[] = {"DEBUG", "INFO", "WARN", "ERROR"};
    std::lock_guard<std::mutex> lock(mu);
    std::fprintf(stderr, "%s %s method=%s msg=%s\n", iso8601_now().c_str(),
                 names[static_cast<int>(level)], method.c_str(), msg.c_str());
}

}  // namespace detail

// ------------------------------------------------------------------- config ---

struct MethodConfig {
    std::string id;
    Json params = Json::object();
    uint64_t seed = 0;
    std::string layer;  // required by layer-tapping methods, empty otherwise
};

struct EvalConfig {
    bool infidelity = false;
    int infidelity_n = 1000;
    double infidelity_sigma = 0.0;  // 0 = 0.1 * (max - min of the input)
    bool sensitivity = false;
    int sensitivity_n = 10;
    double sensitivity_radius = -1.0;  // negative = 0.02 * (max - min)
    bool cascading = false;
    std::vector<RandomizationStage> stages;  // empty = per-model default stages
    uint64_t seed = 0;
};

struct PatchSpec {
    std::vector<int> extent;   // per spatial dim
    std::vector<int> overlap;  // per spatial dim, 0 <= overlap < extent
};

struct RuntimeConfig {
    double timeout_s = 60.0;  // wall-clock budget per configured method
    int parallelism = 1;
    std::optional<PatchSpec> patch;
    std::string output_dir = "esegeta-out";
    std::string log_level = "info";
};

struct PipelineConfig {
    ModelConfig model;
    std::string weights_path;  // optional EWT file layered over the seeded build
    std::vector<std::string> volumes;
    WrapperSpec wrapper;
    std::vector<MethodConfig> methods;
    EvalConfig eval;
    RuntimeConfig runtime;
    Json echo = Json::object();  // the validated document, replayed into the report
};

// ----------------------------------------------------------------- registry ---

enum class MethodKind { Model, Layer };

struct MethodContext {
    const Model* model = nullptr;
    WrapperSpec wrapper;
    Tensor input;
    Json params = Json::object();
    uint64_t seed = 0;
    std::string layer;
    CancelToken cancel;
};

struct MethodResult {
    Tensor map;
    std::string params_echo;
};

struct MethodEntry {
    MethodKind kind = MethodKind::Model;
    bool needs_layer = false;
    std::vector<std::string> param_keys;
    std::function<MethodResult(const MethodContext&)> run;
};

namespace detail {

inline void require_object(const Json& v, const std::string& path) {
    if (!v.is_object()) throw std::invalid_argument("config: expected an object at " + path);
}

inline void require_known_keys(const Json& obj, const std::string& path,
                               const std::vector<std::string>& allowed) {
    require_object(obj, path.empty() ? "the top level" : path);
    for (const auto& item : obj.items()) {
        if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end())
            throw std::invalid_argument("config: unknown key '" +
                                        (path.empty() ? item.key() : path + "." + item.key()) + "'");
    }
}

inline double num_or(const Json& obj, const char* key, double dflt, const std::string& path) {
    if (!obj.contains(key)) return dflt;
    if (!obj[key].is_number())
        throw std::invalid_argument("config: expected a number at " + path + "." + key);
    return obj[key].get<double>();
}

inline int int_or(const Json& obj, const char* key, int dflt, const std::string& path) {
    if (!obj.contains(key)) return dflt;
    if (!obj[key].is_number_integer())
        throw std::invalid_argument("config: expected an integer at " + path + "." + key);
    return obj[key].get<int>();
}

inline uint64_t u64_or(const Json& obj, const char* key, uint64_t dflt, const std::string& path) {
    if (!obj.contains(key)) return dflt;
    if (!obj[key].is_number_unsigned() && !obj[key].is_number_integer())
        throw std::invalid_argument("config: expected an integer at " + path + "." + key);
    return obj[key].get<uint64_t>();
}

inline bool bool_or(const Json& obj, const char* key, bool dflt, const std::string& path) {
    if (!obj.contains(key)) return dflt;
    if (!obj[key].is_boolean())
        throw std::invalid_argument("config: expected a boolean at " + path + "." + key);
    return obj[key].get<bool>();
}

inline std::string str_or(const Json& obj, const char* key, const std::string& dflt,
                          const std::string& path) {
    if (!obj.contains(key)) return dflt;
    if (!obj[key].is_string())
        throw std::invalid_argument("config: expected a string at " + path + "." + key);
    return obj[key].get<std::string>();
}

// Accepts either one integer (broadcast across spatial dims) or a per-dim list.
inline std::vector<int> intlist_or(const Json& obj, const char* key, int rank, int dflt,
                                   const std::string& path) {
    if (!obj.contains(key)) return std::vector<int>(static_cast<size_t>(rank), dflt);
    const Json& v = obj[key];
    if (v.is_number_integer()) return std::vector<int>(static_cast<size_t>(rank), v.get<int>());
    if (v.is_array()) {
        if (static_cast<int>(v.size()) != rank)
            throw std::invalid_argument("config: " + path + "." + key + " must list " +
                                        std::to_string(rank) + " extents");
        std::vector<int> out;
        for (const auto& e : v) {
            if (!e.is_number_integer())
                throw std::invalid_argument("config: expected integers at " + path + "." + key);
            out.push_back(e.get<int>());
        }
        return out;
    }
    throw std::invalid_argument("config: expected an integer or list at " + path + "." + key);
}

inline Baseline baseline_from(const Json& params, const std::string& path) {
    if (!params.contains("baseline")) return Baseline::zeros();
    const Json& b = params["baseline"];
    require_known_keys(b, path + ".baseline", {"kind", "value", "sigma", "seed"});
    const std::string kind = str_or(b, "kind", "zeros", path + ".baseline");
    if (kind == "zeros") return Baseline::zeros();
    if (kind == "constant")
        return Baseline::constant(
            static_cast<float>(num_or(b, "value", 0.0, path + ".baseline")));
    if (kind == "gaussian")
        return Baseline::gaussian(static_cast<float>(num_or(b, "sigma", 1.0, path + ".baseline")),
                                  u64_or(b, "seed", 0, path + ".baseline"));
    throw std::invalid_argument("config: unknown baseline kind '" + kind + "' at " + path +
                                ".baseline.kind");
}

inline int spatial_rank(const Tensor& x) { return x.ndim() - 2; }

// Input volumes may carry just the spatial extents, channels + spatial, or
// the full batched shape; promote to [1, C, spatial...] and check channels.
inline Tensor promote_input(Tensor t, const ModelConfig& mc, const std::string& origin) {
    std::vector<int> s = t.shape();
    if (static_cast<int>(s.size()) == mc.dims) s.insert(s.begin(), {1, 1});
    else if (static_cast<int>(s.size()) == mc.dims + 1) s.insert(s.begin(), 1);
    if (static_cast<int>(s.size()) != mc.dims + 2)
        throw std::invalid_argument(origin + ": rank " + std::to_string(t.ndim()) +
                                    " volume does not fit a " + std::to_string(mc.dims) +
                                    "d model");
    if (s[0] != 1) throw std::invalid_argument(origin + ": batch extent must be 1");
    if (s[1] != mc.in_channels)
        throw std::invalid_argument(origin + ": volume has " + std::to_string(s[1]) +
                                    " channels, model expects " + std::to_string(mc.in_channels));
    std::vector<float> vals(t.values().begin(), t.values().end());
    return Tensor(std::move(s), std::move(vals));
}

}  // namespace detail

// Uniform interface over every attribution method: the scheduler provides
// (model, wrapper, input, params, seed, layer?, cancel) and receives a map
// plus a parameter echo for the report.
inline const std::map<std::string, MethodEntry>& method_registry() {
    static const std::map<std::string, MethodEntry> registry = [] {
        using detail::baseline_from;
        using detail::bool_or;
        using detail::int_or;
        using detail::intlist_or;
        using detail::num_or;
        std::map<std::string, MethodEntry> r;

        const auto target_of = [](const MethodContext& c) {
            return make_model_target(*c.model, c.wrapper, c.input);
        };

        r["saliency"] = {MethodKind::Model, false, {"signed"}, [=](const MethodContext& c) {
            c.cancel.check("saliency");
            AttributionMap m = saliency(target_of(c), c.input, bool_or(c.params, "signed", true, "params"));
            return MethodResult{m.values, m.params};
        }};
        r["input_x_gradient"] = {MethodKind::Model, false, {}, [=](const MethodContext& c) {
            c.cancel.check("input_x_gradient");
            AttributionMap m = input_x_gradient(target_of(c), c.input);
            return MethodResult{m.values, m.params};
        }};
        r["guided_backprop"] = {MethodKind::Model, false, {}, [=](const MethodContext& c) {
            c.cancel.check("guided_backprop");
            AttributionMap m = guided_backprop(target_of(c), c.input);
            return MethodResult{m.values, m.params};
        }};
        r["deconvolution"] = {MethodKind::Model, false, {}, [=](const MethodContext& c) {
            c.cancel.check("deconvolution");
            AttributionMap m = deconvolution(target_of(c), c.input);
            return MethodResult{m.values, m.params};
        }};
        r["integrated_gradients"] = {MethodKind::Model, false, {"steps", "baseline"},
                                     [=](const MethodContext& c) {
            AttributionMap m = integrated_gradients(target_of(c), c.input,
                                                    baseline_from(c.params, "params"),
                                                    int_or(c.params, "steps", 50, "params"), c.cancel);
            return MethodResult{m.values, m.params};
        }};
        r["smoothgrad"] = {MethodKind::Model, false, {"n", "sigma", "inner"},
                           [=](const MethodContext& c) {
            const double dflt_sigma = 0.15 * detail::value_range(c.input);
            AttributionMap m = smoothgrad(
                target_of(c), c.input,
                smooth_inner_from_string(detail::str_or(c.params, "inner", "saliency", "params")),
                int_or(c.params, "n", 25, "params"),
                static_cast<float>(num_or(c.params, "sigma", dflt_sigma, "params")), c.seed, c.cancel);
            return MethodResult{m.values, m.params};
        }};
        r["gradient_shap"] = {MethodKind::Model, false, {"n", "sigma", "baseline"},
                              [=](const MethodContext& c) {
            AttributionMap m = gradient_shap(target_of(c), c.input, baseline_from(c.params, "params"),
                                             int_or(c.params, "n", 25, "params"),
                                             static_cast<float>(num_or(c.params, "sigma", 0.0, "params")),
                                             c.seed, c.cancel);
            return MethodResult{m.values, m.params};
        }};
        r["deeplift"] = {MethodKind::Model, false, {"baseline"}, [=](const MethodContext& c) {
            c.cancel.check("deeplift");
            AttributionMap m = deeplift_rescale(target_of(c), c.input, baseline_from(c.params, "params"));
            return MethodResult{m.values, m.params};
        }};
        r["gradcam"] = {MethodKind::Model, true, {"linear_upsample"}, [=](const MethodContext& c) {
            c.cancel.check("gradcam");
            AttributionMap m = gradcam(target_of(c), c.input, c.layer,
                                       bool_or(c.params, "linear_upsample", true, "params"));
            return MethodResult{m.values, m.params};
        }};
        r["guided_gradcam"] = {MethodKind::Model, true, {}, [=](const MethodContext& c) {
            c.cancel.check("guided_gradcam");
            AttributionMap m = guided_gradcam(target_of(c), c.input, c.layer);
            return MethodResult{m.values, m.params};
        }};
        r["scorecam"] = {MethodKind::Model, true, {"baseline"}, [=](const MethodContext& c) {
            AttributionMap m = scorecam(target_of(c), c.input, c.layer,
                                        baseline_from(c.params, "params"), c.cancel);
            return MethodResult{m.values, m.params};
        }};
        r["occlusion"] = {MethodKind::Model, false, {"window", "stride", "baseline"},
                          [=](const MethodContext& c) {
            const int rank = detail::spatial_rank(c.input);
            PerturbSpec spec;
            spec.window = intlist_or(c.params, "window", rank, 4, "params");
            spec.stride = intlist_or(c.params, "stride", rank, 2, "params");
            spec.baseline = baseline_from(c.params, "params");
            AttributionMap m = occlusion(target_of(c), c.input, spec, c.cancel);
            return MethodResult{m.values, m.params};
        }};
        r["feature_ablation"] = {MethodKind::Model, false, {"grid", "baseline"},
                                 [=](const MethodContext& c) {
            const int rank = detail::spatial_rank(c.input);
            const Tensor groups = make_group_grid(
                c.input.shape(), PatchGrid{intlist_or(c.params, "grid", rank, 2, "params")});
            AttributionMap m = feature_ablation(target_of(c), c.input, groups,
                                                baseline_from(c.params, "params"), c.cancel);
            return MethodResult{m.values, m.params};
        }};
        r["feature_permutation"] = {MethodKind::Model, false, {"batch_paths"},
                                    [=](const MethodContext& c) {
            if (!c.params.contains("batch_paths") || !c.params["batch_paths"].is_array() ||
                c.params["batch_paths"].empty())
                throw std::invalid_argument(
                    "feature_permutation: params.batch_paths must list companion volumes");
            std::vector<Tensor> batch = {c.input};
            for (const auto& p : c.params["batch_paths"]) {
                if (!p.is_string())
                    throw std::invalid_argument("feature_permutation: batch_paths entries must be paths");
                batch.push_back(detail::promote_input(read_evf(p.get<std::string>()),
                                                      c.model->config(), "feature_permutation"));
            }
            std::vector<AttributionMap> maps =
                feature_permutation(target_of(c), batch, c.seed, c.cancel);
            return MethodResult{maps[0].values,
                                maps[0].params + ";batch=" + std::to_string(batch.size())};
        }};
        r["shapley_value_sampling"] = {MethodKind::Model, false,
                                       {"permutations", "exhaustive", "grid", "baseline"},
                                       [=](const MethodContext& c) {
            const bool exhaustive = bool_or(c.params, "exhaustive", false, "params");
            Tensor groups;
            if (c.params.contains("grid"))
                groups = make_group_grid(
                    c.input.shape(),
                    PatchGrid{intlist_or(c.params, "grid", detail::spatial_rank(c.input), 2, "params")});
            AttributionMap m = shapley_value_sampling(
                target_of(c), c.input, baseline_from(c.params, "params"),
                int_or(c.params, "permutations", 25, "params"), c.seed, exhaustive, groups, c.cancel);
            return MethodResult{m.values, m.params};
        }};
        r["rise"] = {MethodKind::Model, false, {"samples", "keep_prob", "grid", "baseline"},
                     [=](const MethodContext& c) {
            PerturbSpec spec;
            spec.samples = int_or(c.params, "samples", 1000, "params");
            spec.keep_prob = static_cast<float>(num_or(c.params, "keep_prob", 0.5, "params"));
            spec.mask_grid = int_or(c.params, "grid", 7, "params");
            spec.baseline = baseline_from(c.params, "params");
            spec.seed = c.seed;
            AttributionMap m = rise(target_of(c), c.input, spec, c.cancel);
            return MethodResult{m.values, m.params};
        }};
        r["lime"] = {MethodKind::Model, false,
                     {"grid", "samples", "kernel_width", "ridge_lambda", "baseline"},
                     [=](const MethodContext& c) {
            const int rank = detail::spatial_rank(c.input);
            AttributionMap m = lime(target_of(c), c.input,
                                    PatchGrid{intlist_or(c.params, "grid", rank, 2, "params")},
                                    int_or(c.params, "samples", 64, "params"),
                                    static_cast<float>(num_or(c.params, "kernel_width", 0.25, "params")),
                                    static_cast<float>(num_or(c.params, "ridge_lambda", 1e-4, "params")),
                                    baseline_from(c.params, "params"), c.seed, c.cancel);
            return MethodResult{m.values, m.params};
        }};
        r["kernel_shap"] = {MethodKind::Model, false,
                            {"grid", "samples", "ridge_lambda", "exhaustive", "baseline"},
                            [=](const MethodContext& c) {
            const int rank = detail::spatial_rank(c.input);
            AttributionMap m = kernel_shap(target_of(c), c.input,
                                           PatchGrid{intlist_or(c.params, "grid", rank, 2, "params")},
                                           int_or(c.params, "samples", 128, "params"),
                                           static_cast<float>(num_or(c.params, "ridge_lambda", 1e-4, "params")),
                                           baseline_from(c.params, "params"), c.seed,
                                           bool_or(c.params, "exhaustive", false, "params"), c.cancel);
            return MethodResult{m.values, m.params};
        }};

        r["layer_activation"] = {MethodKind::Layer, true, {}, [=](const MethodContext& c) {
            c.cancel.check("layer_activation");
            LayerAttributionMap m = layer_activation(target_of(c), c.input, c.layer);
            return MethodResult{m.values, m.params};
        }};
        r["layer_gradient_x_activation"] = {MethodKind::Layer, true, {}, [=](const MethodContext& c) {
            c.cancel.check("layer_gradient_x_activation");
            LayerAttributionMap m = layer_gradient_x_activation(target_of(c), c.input, c.layer);
            return MethodResult{m.values, m.params};
        }};
        r["layer_conductance"] = {MethodKind::Layer, true, {"steps", "baseline"},
                                  [=](const MethodContext& c) {
            LayerAttributionMap m = layer_conductance(target_of(c), c.input,
                                                      baseline_from(c.params, "params"), c.layer,
                                                      int_or(c.params, "steps", 50, "params"), c.cancel);
            return MethodResult{m.values, m.params};
        }};
        r["internal_influence"] = {MethodKind::Layer, true, {"steps", "baseline"},
                                   [=](const MethodContext& c) {
            LayerAttributionMap m = internal_influence(target_of(c), c.input,
                                                       baseline_from(c.params, "params"), c.layer,
                                                       int_or(c.params, "steps", 50, "params"), c.cancel);
            return MethodResult{m.values, m.params};
        }};
        r["layer_gradient_shap"] = {MethodKind::Layer, true, {"n", "sigma", "baseline"},
                                    [=](const MethodContext& c) {
            LayerAttributionMap m = layer_gradient_shap(
                target_of(c), c.input, baseline_from(c.params, "params"), c.layer,
                int_or(c.params, "n", 25, "params"),
                static_cast<float>(num_or(c.params, "sigma", 0.0, "params")), c.seed, c.cancel);
            return MethodResult{m.values, m.params};
        }};
        r["excitation_backprop"] = {MethodKind::Layer, true, {}, [=](const MethodContext& c) {
            c.cancel.check("excitation_backprop");
            LayerAttributionMap m = excitation_backprop(*c.model, c.wrapper, c.input, c.layer);
            return MethodResult{m.values, m.params};
        }};
        r["inverted_representation"] = {MethodKind::Layer, true, {"iters", "step", "lambda"},
                                        [=](const MethodContext& c) {
            const LayerFn fn = make_layer_fn(*c.model, c.layer);
            const Tensor acts = fn(c.input.detach());
            OptimizationResult res = inverted_representation(
                *c.model, c.layer, c.input.shape(), acts, int_or(c.params, "iters", 100, "params"),
                num_or(c.params, "step", 0.25, "params"), num_or(c.params, "lambda", 0.01, "params"),
                c.seed, c.cancel);
            return MethodResult{res.input, res.params};
        }};
        r["deepdream"] = {MethodKind::Layer, true, {"iters", "step"}, [=](const MethodContext& c) {
            OptimizationResult res =
                deepdream(*c.model, c.layer, c.input, int_or(c.params, "iters", 50, "params"),
                          num_or(c.params, "step", 0.1, "params"), c.seed, c.cancel);
            return MethodResult{res.input, res.params};
        }};
        return r;
    }();
    return registry;
}

// -------------------------------------------------------------- load config ---

inline PipelineConfig load_config(const Json& doc) {
    using namespace detail;
    PipelineConfig cfg;
    require_known_keys(doc, "", {"model", "input", "wrapper", "methods", "eval", "runtime"});
    if (!doc.contains("model") || !doc.contains("input") || !doc.contains("methods"))
        throw std::invalid_argument("config: 'model', 'input', and 'methods' are required");

    const Json& model = doc["model"];
    require_known_keys(model, "model", {"weights", "config"});
    cfg.weights_path = str_or(model, "weights", "", "model");
    if (!model.contains("config"))
        throw std::invalid_argument("config: 'model.config' is required");
    const Json& mc = model["config"];
    require_known_keys(mc, "model.config",
                       {"dims", "in_channels", "classes", "depth", "base_channels", "seed", "mss"});
    cfg.model.dims = int_or(mc, "dims", 2, "model.config");
    cfg.model.in_channels = int_or(mc, "in_channels", 1, "model.config");
    cfg.model.classes = int_or(mc, "classes", 2, "model.config");
    cfg.model.depth = int_or(mc, "depth", 1, "model.config");
    cfg.model.base_channels = int_or(mc, "base_channels", 4, "model.config");
    cfg.model.seed = u64_or(mc, "seed", 0, "model.config");
    cfg.model.mss = bool_or(mc, "mss", false, "model.config");

    const Json& input = doc["input"];
    require_known_keys(input, "input", {"volume", "volumes"});
    if (input.contains("volume") == input.contains("volumes"))
        throw std::invalid_argument("config: 'input' needs exactly one of 'volume' or 'volumes'");
    if (input.contains("volume")) {
        cfg.volumes.push_back(str_or(input, "volume", "", "input"));
    } else {
        if (!input["volumes"].is_array() || input["volumes"].empty())
            throw std::invalid_argument("config: 'input.volumes' must be a non-empty list");
        for (const auto& v : input["volumes"]) {
            if (!v.is_string())
                throw std::invalid_argument("config: 'input.volumes' entries must be paths");
            cfg.volumes.push_back(v.get<std::string>());
        }
    }

    if (doc.contains("wrapper")) {
        const Json& w = doc["wrapper"];
        require_known_keys(w, "wrapper", {"strategy", "class"});
        cfg.wrapper.strategy =
            wrapper_strategy_from_string(str_or(w, "strategy", "pixelwise-argmax", "wrapper"));
        cfg.wrapper.class_index = int_or(w, "class", 1, "wrapper");
    }
    if (cfg.wrapper.class_index < 0 || cfg.wrapper.class_index >= cfg.model.classes)
        throw std::invalid_argument("config: wrapper.class " +
                                    std::to_string(cfg.wrapper.class_index) + " outside the model's " +
                                    std::to_string(cfg.model.classes) + " classes");

    if (!doc["methods"].is_array() || doc["methods"].empty())
        throw std::invalid_argument("config: 'methods' must be a non-empty list");
    const auto& registry = method_registry();
    for (size_t i = 0; i < doc["methods"].size(); ++i) {
        const std::string path = "methods[" + std::to_string(i) + "]";
        const Json& m = doc["methods"][i];
        require_known_keys(m, path, {"id", "params", "seed", "layer"});
        MethodConfig out;
        out.id = str_or(m, "id", "", path);
        const auto it = registry.find(out.id);
        if (it == registry.end())
            throw std::invalid_argument("config: unknown method '" + out.id + "' at " + path + ".id");
        if (m.contains("params")) {
            require_known_keys(m["params"], path + ".params", it->second.param_keys);
            out.params = m["params"];
        }
        out.seed = u64_or(m, "seed", 0, path);
        out.layer = str_or(m, "layer", "", path);
        if (it->second.needs_layer && out.layer.empty())
            throw std::invalid_argument("config: method '" + out.id + "' requires a layer at " +
                                        path + ".layer");
        if (!it->second.needs_layer && !out.layer.empty())
            throw std::invalid_argument("config: method '" + out.id + "' does not take a layer (" +
                                        path + ".layer)");
        cfg.methods.push_back(std::move(out));
    }

    if (doc.contains("eval")) {
        const Json& e = doc["eval"];
        require_known_keys(e, "eval", {"infidelity", "sensitivity", "cascading", "seed"});
        cfg.eval.seed = u64_or(e, "seed", 0, "eval");
        if (e.contains("infidelity")) {
            require_known_keys(e["infidelity"], "eval.infidelity", {"n", "sigma"});
            cfg.eval.infidelity = true;
            cfg.eval.infidelity_n = int_or(e["infidelity"], "n", 1000, "eval.infidelity");
            cfg.eval.infidelity_sigma = num_or(e["infidelity"], "sigma", 0.0, "eval.infidelity");
        }
        if (e.contains("sensitivity")) {
            require_known_keys(e["sensitivity"], "eval.sensitivity", {"n", "radius"});
            cfg.eval.sensitivity = true;
            cfg.eval.sensitivity_n = int_or(e["sensitivity"], "n", 10, "eval.sensitivity");
            cfg.eval.sensitivity_radius = num_or(e["sensitivity"], "radius", -1.0, "eval.sensitivity");
        }
        if (e.contains("cascading")) {
            require_known_keys(e["cascading"], "eval.cascading", {"stages"});
            cfg.eval.cascading = true;
            if (e["cascading"].contains("stages")) {
                for (size_t i = 0; i < e["cascading"]["stages"].size(); ++i) {
                    const std::string path = "eval.cascading.stages[" + std::to_string(i) + "]";
                    const Json& s = e["cascading"]["stages"][i];
                    require_known_keys(s, path, {"name", "layers"});
                    RandomizationStage stage;
                    stage.name = str_or(s, "name", "stage" + std::to_string(i), path);
                    if (!s.contains("layers") || !s["layers"].is_array())
                        throw std::invalid_argument("config: " + path + ".layers must be a list");
                    for (const auto& l : s["layers"]) stage.layers.push_back(l.get<std::string>());
                    cfg.eval.stages.push_back(std::move(stage));
                }
            }
        }
    }

    if (doc.contains("runtime")) {
        const Json& rt = doc["runtime"];
        require_known_keys(rt, "runtime",
                           {"timeout_s", "parallelism", "patch", "output_dir", "log_level"});
        cfg.runtime.timeout_s = num_or(rt, "timeout_s", 60.0, "runtime");
        cfg.runtime.parallelism = int_or(rt, "parallelism", 1, "runtime");
        cfg.runtime.output_dir = str_or(rt, "output_dir", "esegeta-out", "runtime");
        cfg.runtime.log_level = str_or(rt, "log_level", "info", "runtime");
        if (rt.contains("patch")) {
            require_known_keys(rt["patch"], "runtime.patch", {"extent", "overlap"});
            PatchSpec patch;
            patch.extent = intlist_or(rt["patch"], "extent", cfg.model.dims, 0, "runtime.patch");
            patch.overlap = intlist_or(rt["patch"], "overlap", cfg.model.dims, 0, "runtime.patch");
            for (int d = 0; d < cfg.model.dims; ++d) {
                if (patch.extent[static_cast<size_t>(d)] < 1)
                    throw std::invalid_argument("config: runtime.patch.extent must be positive");
                if (patch.overlap[static_cast<size_t>(d)] < 0 ||
                    patch.overlap[static_cast<size_t>(d)] >= patch.extent[static_cast<size_t>(d)])
                    throw std::invalid_argument(
                        "config: runtime.patch.overlap must satisfy 0 <= overlap < extent");
            }
            cfg.runtime.patch = std::move(patch);
        }
    }
    if (!(cfg.runtime.timeout_s > 0.0))
        throw std::invalid_argument("config: runtime.timeout_s must be > 0");
    if (cfg.runtime.parallelism < 1)
        throw std::invalid_argument("config: runtime.parallelism must be >= 1");
    (void)log_level_from_string(cfg.runtime.log_level);

    if (cfg.runtime.patch)
        for (const MethodConfig& m : cfg.methods)
            if (method_registry().at(m.id).kind == MethodKind::Layer)
                throw std::invalid_argument("config: patch mode does not support layer method '" +
                                            m.id + "'");

    cfg.echo = doc;
    return cfg;
}

inline PipelineConfig load_config_file(const std::filesystem::path& path) {
    const std::string bytes = detail::read_file(path);
    Json doc;
    try {
        doc = Json::parse(bytes);
    } catch (const Json::parse_error& e) {
        throw std::invalid_argument("config: " + path.string() + " is not valid JSON: " + e.what());
    }
    return load_config(doc);
}

// ---------------------------------------------------------- patch execution ---

namespace detail {

// Tile starts covering [0, extent): fixed stride with the last tile clamped
// so it ends exactly at the boundary. stride <= tile, so tiles always touch.
inline std::vector<int> tile_starts(int extent, int tile, int stride) {
    std::vector<int> out;
    for (int s = 0;; s += stride) {
        if (s + tile >= extent) {
            const int last = extent - tile;
            if (out.empty() || out.back() != last) out.push_back(last);
            break;
        }
        out.push_back(s);
    }
    return out;
}

inline Tensor crop_spatial(const Tensor& x, const std::vector<int>& start,
                           const std::vector<int>& extent) {
    const auto& s = x.shape();
    const int rank = static_cast<int>(start.size());
    std::vector<int> out_shape = {s[0], s[1]};
    out_shape.insert(out_shape.end(), extent.begin(), extent.end());
    int64_t plane = 1, out_plane = 1;
    for (int d = 0; d < rank; ++d) {
        plane *= s[static_cast<size_t>(d) + 2];
        out_plane *= extent[static_cast<size_t>(d)];
    }
    std::vector<float> v(static_cast<size_t>(s[0] * s[1] * out_plane));
    std::vector<int> oc(static_cast<size_t>(rank), 0);
    for (int64_t bc = 0; bc < s[0] * s[1]; ++bc)
        for (int64_t of = 0; of < out_plane; ++of) {
            int64_t rem = of, flat = 0;
            for (int d = rank - 1; d >= 0; --d) {
                oc[static_cast<size_t>(d)] = static_cast<int>(rem % extent[static_cast<size_t>(d)]);
                rem /= extent[static_cast<size_t>(d)];
            }
            for (int d = 0; d < rank; ++d)
                flat = flat * s[static_cast<size_t>(d) + 2] +
                       (start[static_cast<size_t>(d)] + oc[static_cast<size_t>(d)]);
            v[static_cast<size_t>(bc * out_plane + of)] = x.values()[bc * plane + flat];
        }
    return Tensor(std::move(out_shape), std::move(v));
}

}  // namespace detail

// Tiles the input with the configured overlap, runs the method on every tile
// (the wrapper mask is re-frozen per tile), and stitches the tile maps by
// per-element average over all covering tiles.
inline MethodResult run_patched(const MethodEntry& entry, const MethodContext& ctx,
                                const PatchSpec& patch) {
    if (entry.kind != MethodKind::Model)
        throw std::invalid_argument("patch mode supports input-shaped methods only");
    const auto& s = ctx.input.shape();
    const int rank = detail::spatial_rank(ctx.input);
    if (static_cast<int>(patch.extent.size()) != rank)
        throw std::invalid_argument("patch: extent lists " + std::to_string(patch.extent.size()) +
                                    " dims, input has " + std::to_string(rank));
    std::vector<std::vector<int>> starts(static_cast<size_t>(rank));
    for (int d = 0; d < rank; ++d) {
        const int dim = s[static_cast<size_t>(d) + 2];
        const int tile = patch.extent[static_cast<size_t>(d)];
        const int overlap = patch.overlap[static_cast<size_t>(d)];
        if (tile > dim)
            throw std::invalid_argument("patch: extent " + std::to_string(tile) +
                                        " exceeds input extent " + std::to_string(dim));
        starts[static_cast<size_t>(d)] = detail::tile_starts(dim, tile, tile - overlap);
    }

    std::vector<double> acc(static_cast<size_t>(ctx.input.numel()), 0.0);
    int64_t plane = 1;
    for (int d = 0; d < rank; ++d) plane *= s[static_cast<size_t>(d) + 2];
    std::vector<int> cover(static_cast<size_t>(plane), 0);

    std::vector<size_t> cursor(static_cast<size_t>(rank), 0);
    std::string echo;
    while (true) {
        ctx.cancel.check(ctx.layer.empty() ? "patched run" : ctx.layer);
        std::vector<int> origin(static_cast<size_t>(rank));
        for (int d = 0; d < rank; ++d)
            origin[static_cast<size_t>(d)] = starts[static_cast<size_t>(d)][cursor[static_cast<size_t>(d)]];

        MethodContext tile_ctx = ctx;
        tile_ctx.input = detail::crop_spatial(ctx.input, origin, patch.extent);
        const MethodResult r = entry.run(tile_ctx);
        if (r.map.shape() != tile_ctx.input.shape())
            throw std::runtime_error("patch: method returned a map of shape " +
                                     shape_to_string(r.map.shape()) + " for a tile of " +
                                     shape_to_string(tile_ctx.input.shape()));
        if (echo.empty()) echo = r.params_echo;

        int64_t tile_plane = 1;
        for (int e : patch.extent) tile_plane *= e;
        std::vector<int> oc(static_cast<size_t>(rank), 0);
        for (int64_t bc = 0; bc < s[0] * s[1]; ++bc)
            for (int64_t of = 0; of < tile_plane; ++of) {
                int64_t rem = of, flat = 0;
                for (int d = rank - 1; d >= 0; --d) {
                    oc[static_cast<size_t>(d)] =
                        static_cast<int>(rem % patch.extent[static_cast<size_t>(d)]);
                    rem /= patch.extent[static_cast<size_t>(d)];
                }
                for (int d = 0; d < rank; ++d)
                    flat = flat * s[static_cast<size_t>(d) + 2] +
                           (origin[static_cast<size_t>(d)] + oc[static_cast<size_t>(d)]);
                acc[static_cast<size_t>(bc * plane + flat)] += r.map.values()[bc * tile_plane + of];
                if (bc == 0) ++cover[static_cast<size_t>(flat)];
            }

        int d = rank - 1;
        for (; d >= 0; --d) {
            if (++cursor[static_cast<size_t>(d)] < starts[static_cast<size_t>(d)].size()) break;
            cursor[static_cast<size_t>(d)] = 0;
        }
        if (d < 0) break;
    }

    for (int64_t p = 0; p < plane; ++p)
        if (cover[static_cast<size_t>(p)] == 0)
            throw std::runtime_error("patch: tiling left position " + std::to_string(p) +
                                     " uncovered");
    std::vector<float> v(static_cast<size_t>(ctx.input.numel()));
    for (int64_t bc = 0; bc < s[0] * s[1]; ++bc)
        for (int64_t p = 0; p < plane; ++p)
            v[static_cast<size_t>(bc * plane + p)] = static_cast<float>(
                acc[static_cast<size_t>(bc * plane + p)] / cover[static_cast<size_t>(p)]);

    std::string patch_echo = ";patch_extent=";
    for (size_t d = 0; d < patch.extent.size(); ++d)
        patch_echo += (d ? "x" : "") + std::to_string(patch.extent[d]);
    patch_echo += ";patch_overlap=";
    for (size_t d = 0; d < patch.overlap.size(); ++d)
        patch_echo += (d ? "x" : "") + std::to_string(patch.overlap[d]);
    return {Tensor(ctx.input.shape(), std::move(v)), echo + patch_echo};
}

// ------------------------------------------------------------- png plumbing ---

namespace detail {

// Collapses [1, C, spatial...] to the spatial tensor by channel mean.
inline Tensor channel_mean(const Tensor& t) {
    const auto& s = t.shape();
    const int C = s[1];
    int64_t plane = 1;
    std::vector<int> sp(s.begin() + 2, s.end());
    for (int e : sp) plane *= e;
    std::vector<float> v(static_cast<size_t>(plane));
    for (int64_t p = 0; p < plane; ++p) {
        double m = 0.0;
        for (int c = 0; c < C; ++c) m += t.values()[c * plane + p];
        v[static_cast<size_t>(p)] = static_cast<float>(m / C);
    }
    return Tensor(std::move(sp), std::move(v));
}

// Nearest-neighbor resize of a spatial (rank 2 or 3) tensor so layer-shaped
// maps can be drawn over the input.
inline Tensor resize_nearest(const Tensor& src, const std::vector<int>& target) {
    if (src.shape() == target) return src;
    const auto& ss = src.shape();
    const int rank = static_cast<int>(target.size());
    int64_t out_n = 1;
    for (int e : target) out_n *= e;
    std::vector<float> v(static_cast<size_t>(out_n));
    std::vector<int> oc(static_cast<size_t>(rank), 0);
    for (int64_t of = 0; of < out_n; ++of) {
        int64_t rem = of, flat = 0;
        for (int d = rank - 1; d >= 0; --d) {
            oc[static_cast<size_t>(d)] = static_cast<int>(rem % target[static_cast<size_t>(d)]);
            rem /= target[static_cast<size_t>(d)];
        }
        for (int d = 0; d < rank; ++d) {
            const int se = ss[static_cast<size_t>(d)];
            int sc = static_cast<int>(static_cast<int64_t>(oc[static_cast<size_t>(d)]) * se /
                                      target[static_cast<size_t>(d)]);
            sc = std::min(sc, se - 1);
            flat = flat * se + sc;
        }
        v[static_cast<size_t>(of)] = src.values()[flat];
    }
    return Tensor(target, std::move(v));
}

// 2D drawing plane for any map: channel-mean, resize to the input's spatial
// extents, middle slice along the first spatial axis for 3D volumes.
inline Tensor map_plane(const Tensor& map, const std::vector<int>& input_spatial) {
    Tensor plane = resize_nearest(channel_mean(map), input_spatial);
    if (static_cast<int>(input_spatial.size()) == 3)
        plane = slice_3d(plane, 0, input_spatial[0] / 2);
    return plane;
}

}  // namespace detail

// ------------------------------------------------------------------- report ---

struct MethodReportEntry {
    std::string id;
    std::string status = "ok";  // ok | timeout | error
    std::string message;
    double elapsed_ms = 0.0;
    std::vector<std::string> outputs;
    std::string params_echo;
    EvalReport eval;
    bool has_infidelity = false;
    bool has_sensitivity = false;
    bool has_cascading = false;
};

struct RunReport {
    std::vector<MethodReportEntry> methods;
    int ok = 0;
    int timeout = 0;
    int error = 0;
    double elapsed_ms = 0.0;
    Json config_echo;
    std::string version = kVersion;
};

inline Json report_to_json(const RunReport& report) {
    Json doc;
    doc["version"] = report.version;
    doc["totals"] = {{"methods", report.methods.size()},
                     {"ok", report.ok},
                     {"timeout", report.timeout},
                     {"error", report.error},
                     {"elapsed_ms", report.elapsed_ms}};
    doc["methods"] = Json::array();
    for (const auto& m : report.methods) {
        Json e;
        e["id"] = m.id;
        e["status"] = m.status;
        e["elapsed_ms"] = m.elapsed_ms;
        e["outputs"] = m.outputs;
        e["params"] = m.params_echo;
        if (!m.message.empty()) e["message"] = m.message;
        if (m.has_infidelity || m.has_sensitivity || m.has_cascading) {
            Json ev;
            ev["seed"] = m.eval.seed;
            if (m.has_infidelity) {
                ev["infidelity"] = m.eval.infidelity;
                ev["infidelity_n"] = m.eval.infidelity_samples;
                ev["sigma"] = m.eval.sigma;
            }
            if (m.has_sensitivity) {
                ev["sensitivity"] = m.eval.sensitivity;
                ev["sensitivity_n"] = m.eval.sensitivity_samples;
                ev["radius"] = m.eval.radius;
            }
            if (m.has_cascading) {
                ev["cascading"] = Json::array();
                for (const auto& s : m.eval.randomization)
                    ev["cascading"].push_back({{"stage", s.stage}, {"rho", s.rho}});
            }
            e["eval"] = std::move(ev);
        }
        doc["methods"].push_back(std::move(e));
    }
    doc["config"] = report.config_echo;
    return doc;
}

// ----------------------------------------------------------------- pipeline ---

namespace detail {

inline Tensor compute_map(const MethodEntry& entry, const MethodConfig& mc, const Model& model,
                          const WrapperSpec& wrapper, const Tensor& input,
                          const std::optional<PatchSpec>& patch, const CancelToken& cancel,
                          std::string* echo = nullptr) {
    MethodContext ctx;
    ctx.model = &model;
    ctx.wrapper = wrapper;
    ctx.input = input;
    ctx.params = mc.params;
    ctx.seed = mc.seed;
    ctx.layer = mc.layer;
    ctx.cancel = cancel;
    const MethodResult r = patch ? run_patched(entry, ctx, *patch) : entry.run(ctx);
    if (echo) *echo = r.params_echo;
    return r.map;
}

inline EvalReport evaluate_method(const PipelineConfig& cfg, const MethodEntry& entry,
                                  const MethodConfig& mc, const Model& model, const Tensor& x0,
                                  const Tensor& map0, const CancelToken& cancel,
                                  MethodReportEntry& out) {
    EvalReport rep;
    rep.method_id = mc.id;
    rep.model_id = cfg.model.id();
    rep.seed = cfg.eval.seed;

    if (cfg.eval.infidelity && map0.shape() == x0.shape()) {
        const ScoreTarget t = make_model_target(model, cfg.wrapper, x0);
        double sigma = cfg.eval.infidelity_sigma;
        if (sigma == 0.0) sigma = 0.1 * value_range(x0);
        rep.infidelity = infidelity(t, x0, map0, cfg.eval.infidelity_n, sigma, cfg.eval.seed);
        rep.infidelity_samples = cfg.eval.infidelity_n;
        rep.sigma = sigma;
        out.has_infidelity = true;
    }
    if (cfg.eval.sensitivity) {
        double radius = cfg.eval.sensitivity_radius;
        if (radius < 0.0) radius = 0.02 * value_range(x0);
        rep.sensitivity = max_sensitivity(
            [&](const Tensor& in) {
                return compute_map(entry, mc, model, cfg.wrapper, in, cfg.runtime.patch, cancel);
            },
            x0, cfg.eval.sensitivity_n, radius, cfg.eval.seed);
        rep.sensitivity_samples = cfg.eval.sensitivity_n;
        rep.radius = radius;
        out.has_sensitivity = true;
    }
    if (cfg.eval.cascading) {
        const auto method = [&](const Model& m, const Tensor& in) {
            return compute_map(entry, mc, m, cfg.wrapper, in, cfg.runtime.patch, cancel);
        };
        const auto stages =
            cfg.eval.stages.empty() ? default_randomization_stages(model) : cfg.eval.stages;
        const auto results = cascading_randomization(model, method, x0, stages, cfg.eval.seed);
        for (const auto& r : results) rep.randomization.push_back({r.stage, r.rho});
        out.has_cascading = true;
    }
    return rep;
}

inline std::string method_prefix(size_t index, const std::string& id) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "m%02zu", index);
    return std::string(buf) + "_" + id;
}

}  // namespace detail

// Executes every configured method (up to `parallelism` at a time) against
// the loaded model and volumes, writes EVF maps + PNG overlays + report.json
// into the output directory, and returns the report. A method that times out
// or fails is contained: its status is recorded and no files are written for
// it. Map bytes are identical at any parallelism degree.
inline RunReport run_pipeline(const PipelineConfig& cfg) {
    const char* env_level = std::getenv("ESEGETA_LOG");
    detail::log_threshold().store(
        static_cast<int>(log_level_from_string(env_level ? env_level : cfg.runtime.log_level)),
        std::memory_order_relaxed);
    const auto t0 = std::chrono::steady_clock::now();

    const Model model = cfg.weights_path.empty() ? build_model(cfg.model)
                                                 : load_weights(cfg.weights_path, cfg.model);
    std::vector<Tensor> volumes;
    for (const std::string& path : cfg.volumes)
        volumes.push_back(detail::promote_input(read_evf(path), cfg.model, "input '" + path + "'"));
    for (const Tensor& v : volumes) model.validate_input(v);
    if (cfg.runtime.patch) {
        // surface tiling problems before any method runs
        for (const Tensor& v : volumes) {
            const int rank = detail::spatial_rank(v);
            if (static_cast<int>(cfg.runtime.patch->extent.size()) != rank)
                throw std::invalid_argument("patch: extent rank does not match the input");
            for (int d = 0; d < rank; ++d)
                if (cfg.runtime.patch->extent[static_cast<size_t>(d)] > v.shape()[static_cast<size_t>(d) + 2])
                    throw std::invalid_argument("patch: extent exceeds the input extent");
        }
    }
    std::filesystem::create_directories(cfg.runtime.output_dir);

    const auto timeout =
        std::chrono::milliseconds(static_cast<int64_t>(cfg.runtime.timeout_s * 1000.0));
    std::vector<MethodReportEntry> entries(cfg.methods.size());

    const auto run_one = [&](size_t i) {
        const MethodConfig& mc = cfg.methods[i];
        const MethodEntry& entry = method_registry().at(mc.id);
        MethodReportEntry& out = entries[i];
        out.id = mc.id;
        detail::log_line(LogLevel::Info, mc.id, "start");
        const auto m0 = std::chrono::steady_clock::now();
        const CancelToken cancel = CancelToken::after(timeout);
        try {
            // compute everything first; files only appear on full success
            std::vector<std::pair<std::filesystem::path, std::string>> pending;
            for (size_t v = 0; v < volumes.size(); ++v) {
                std::string echo;
                const Tensor map = detail::compute_map(entry, mc, model, cfg.wrapper, volumes[v],
                                                       cfg.runtime.patch, cancel, &echo);
                if (v == 0) {
                    out.params_echo = echo;
                    if (cfg.eval.infidelity || cfg.eval.sensitivity || cfg.eval.cascading)
                        out.eval = detail::evaluate_method(cfg, entry, mc, model, volumes[0], map,
                                                           cancel, out);
                }
                const std::string stem =
                    detail::method_prefix(i, mc.id) + "_v" + std::to_string(v);
                const std::filesystem::path dir(cfg.runtime.output_dir);
                pending.emplace_back(dir / (stem + ".evf"), encode_evf(map));

                const std::vector<int> sp(volumes[v].shape().begin() + 2, volumes[v].shape().end());
                Tensor base = detail::channel_mean(volumes[v]);
                if (static_cast<int>(sp.size()) == 3) base = slice_3d(base, 0, sp[0] / 2);
                pending.emplace_back(dir / (stem + ".png"),
                                     encode_overlay_png(base, detail::map_plane(map, sp)));
            }
            for (auto& [path, bytes] : pending) {
                detail::write_file_atomic(path, bytes);
                out.outputs.push_back(path.string());
            }
            out.status = "ok";
        } catch (const MethodTimeout& e) {
            out.status = "timeout";
            out.message = e.what();
            out.outputs.clear();
        } catch (const std::exception& e) {
            out.status = "error";
            out.message = e.what();
            out.outputs.clear();
        }
        out.elapsed_ms = std::chrono::duration<double, std::milli>(
                             std::chrono::steady_clock::now() - m0)
                             .count();
        detail::log_line(out.status == "ok" ? LogLevel::Info : LogLevel::Warn, mc.id,
                         "status=" + out.status + " elapsed_ms=" + std::to_string(out.elapsed_ms));
    };

    const int workers = std::min<int>(cfg.runtime.parallelism, static_cast<int>(cfg.methods.size()));
    if (workers <= 1) {
        for (size_t i = 0; i < cfg.methods.size(); ++i) run_one(i);
    } else {
        std::atomic<size_t> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                while (true) {
                    const size_t i = next.fetch_add(1);
                    if (i >= cfg.methods.size()) return;
                    run_one(i);
                }
            });
        for (auto& t : pool) t.join();
    }

    RunReport report;
    report.methods = std::move(entries);
    for (const auto& m : report.methods) {
        if (m.status == "ok") ++report.ok;
        else if (m.status == "timeout") ++report.timeout;
        else ++report.error;
    }
    report.elapsed_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    report.config_echo = cfg.echo;
    detail::write_file_atomic(std::filesystem::path(cfg.runtime.output_dir) / "report.json",
                              report_to_json(report).dump(2) + "\n");
    return report;
}

// Metrics-only pass over a finished run: infidelity is scored against each
// method's existing EVF map; sensitivity and cascading re-run the method as
// configured. Writes eval_report.json; map files are left untouched.
inline RunReport run_eval_pass(const PipelineConfig& cfg) {
    const char* env_level = std::getenv("ESEGETA_LOG");
    detail::log_threshold().store(
        static_cast<int>(log_level_from_string(env_level ? env_level : cfg.runtime.log_level)),
        std::memory_order_relaxed);
    const auto t0 = std::chrono::steady_clock::now();
    if (!cfg.eval.infidelity && !cfg.eval.sensitivity && !cfg.eval.cascading)
        throw std::invalid_argument("config: the eval pass needs an 'eval' section");

    const Model model = cfg.weights_path.empty() ? build_model(cfg.model)
                                                 : load_weights(cfg.weights_path, cfg.model);
    const Tensor x0 =
        detail::promote_input(read_evf(cfg.volumes[0]), cfg.model, "input '" + cfg.volumes[0] + "'");
    model.validate_input(x0);

    const auto timeout =
        std::chrono::milliseconds(static_cast<int64_t>(cfg.runtime.timeout_s * 1000.0));
    RunReport report;
    report.methods.resize(cfg.methods.size());
    for (size_t i = 0; i < cfg.methods.size(); ++i) {
        const MethodConfig& mc = cfg.methods[i];
        const MethodEntry& entry = method_registry().at(mc.id);
        MethodReportEntry& out = report.methods[i];
        out.id = mc.id;
        const auto m0 = std::chrono::steady_clock::now();
        const CancelToken cancel = CancelToken::after(timeout);
        try {
            const std::filesystem::path map_path =
                std::filesystem::path(cfg.runtime.output_dir) /
                (detail::method_prefix(i, mc.id) + "_v0.evf");
            if (!std::filesystem::exists(map_path))
                throw std::runtime_error("eval: missing map file " + map_path.string() +
                                         " (run the pipeline first)");
            const Tensor map = read_evf(map_path);
            out.eval = detail::evaluate_method(cfg, entry, mc, model, x0, map, cancel, out);
            out.status = "ok";
        } catch (const MethodTimeout& e) {
            out.status = "timeout";
            out.message = e.what();
        } catch (const std::exception& e) {
            out.status = "error";
            out.message = e.what();
        }
        out.elapsed_ms = std::chrono::duration<double, std::milli>(
                             std::chrono::steady_clock::now() - m0)
                             .count();
        detail::log_line(out.status == "ok" ? LogLevel::Info : LogLevel::Warn, mc.id,
                         "eval status=" + out.status);
    }
    for (const auto& m : report.methods) {
        if (m.status == "ok") ++report.ok;
        else if (m.status == "timeout") ++report.timeout;
        else ++report.error;
    }
    report.elapsed_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    report.config_echo = cfg.echo;
    detail::write_file_atomic(std::filesystem::path(cfg.runtime.output_dir) / "eval_report.json",
                              report_to_json(report).dump(2) + "\n");
    return report;
}

}  // namespace esegeta
