#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <functional>
#include <utility>

#include "model.hpp"
#include "wrapper.hpp"

// Scalar scoring targets for attribution methods, plus the cooperative
// cancellation and baseline types shared by every method implementation.
namespace esegeta {

// Thrown by CancelToken::check when a method exceeds its wall-clock budget.
class MethodTimeout : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Cooperative cancellation: long-running loops call check() at least once
// per sample/step/window. Default-constructed tokens never fire.
class CancelToken {
public:
    CancelToken() = default;

    static CancelToken with_deadline(std::chrono::steady_clock::time_point deadline) {
        CancelToken t;
        t.has_deadline_ = true;
        t.deadline_ = deadline;
        return t;
    }

    static CancelToken after(std::chrono::milliseconds budget) {
        return with_deadline(std::chrono::steady_clock::now() + budget);
    }

    static CancelToken with_flag(const std::atomic<bool>* flag) {
        CancelToken t;
        t.flag_ = flag;
        return t;
    }

    bool cancelled() const {
        if (flag_ && flag_->load(std::memory_order_relaxed)) return true;
        return has_deadline_ && std::chrono::steady_clock::now() >= deadline_;
    }

    void check(const std::string& method_id) const {
        if (cancelled()) throw MethodTimeout("method '" + method_id + "' exceeded its time budget");
    }

private:
    bool has_deadline_ = false;
    std::chrono::steady_clock::time_point deadline_{};
    const std::atomic<bool>* flag_ = nullptr;
};

// Reference input a method compares against: all zeros, a constant fill, or
// seeded Gaussian noise. `salt` lets samplers draw fresh noise per sample
// while staying deterministic.
struct Baseline {
    enum class Kind { Zeros, Constant, GaussianNoise };

    Kind kind = Kind::Zeros;
    float value = 0.0f;
    float sigma = 1.0f;
    uint64_t seed = 0;

    static Baseline zeros() { return {}; }
    static Baseline constant(float v) { return {Kind::Constant, v, 0.0f, 0}; }
    static Baseline gaussian(float sigma, uint64_t seed) {
        return {Kind::GaussianNoise, 0.0f, sigma, seed};
    }

    Tensor materialize(const std::vector<int>& shape, uint64_t salt = 0) const {
        switch (kind) {
            case Kind::Zeros: return Tensor::zeros(shape);
            case Kind::Constant: return Tensor::full(shape, value);
            case Kind::GaussianNoise: {
                Rng rng = stream_rng(seed, mix_key(0x6261736531696e65ull, salt));
                std::vector<float> v(static_cast<size_t>(shape_numel(shape)));
                for (auto& x : v) x = static_cast<float>(rng.normal() * sigma);
                return Tensor(shape, std::move(v));
            }
        }
        throw std::runtime_error("baseline: unreachable kind");
    }
};

inline Baseline baseline_from_string(const std::string& s, float value, float sigma, uint64_t seed) {
    if (s == "zeros") return Baseline::zeros();
    if (s == "constant") return Baseline::constant(value);
    if (s == "gaussian-noise") return Baseline::gaussian(sigma, seed);
    throw std::invalid_argument("baseline: unknown kind '" + s + "'");
}

// One scalar-valued differentiable function of the input, with optional
// extras: a float64 evaluation path and tapped-layer access. Methods only
// see this interface, so tests can swap in closed-form targets.
struct ScoreTarget {
    // Scalar tensor wired into the autodiff tape (input may require grad).
    std::function<Tensor(const Tensor&)> score;
    // High-precision scalar; falls back to float32 `score` when absent.
    std::function<double(const Tensor&)> score_f64;
    // (scalar, tapped activation) for layer methods; absent on closed-form
    // targets that have no layers.
    std::function<std::pair<Tensor, Tensor>(const Tensor&, const std::string&)> score_with_tap;

    double value(const Tensor& x) const {
        if (score_f64) return score_f64(x);
        return static_cast<double>(score(x).item());
    }

    std::pair<Tensor, Tensor> tapped(const Tensor& x, const std::string& layer) const {
        if (!score_with_tap)
            throw std::invalid_argument("target: this score target exposes no layers");
        return score_with_tap(x, layer);
    }
};

// Wraps a segmentation model into a ScoreTarget. The class-assignment mask
// is frozen from `clean_x` here, once, and reused for every perturbed or
// path-interpolated evaluation a method performs afterwards. The model is
// captured by pointer and must outlive the target.
inline ScoreTarget make_model_target(const Model& model, const WrapperSpec& spec,
                                     const Tensor& clean_x, WrapperResult* info = nullptr) {
    model.validate_input(clean_x);
    Tensor clean_out = model.forward(clean_x.detach());
    WrapperResult wrapped = apply_wrapper(clean_out, spec);
    if (info) *info = wrapped;
    const Tensor mask = wrapped.class_mask;
    const Model* m = &model;

    ScoreTarget t;
    t.score = [m, mask](const Tensor& x) { return masked_score(m->forward(x), mask); };
    t.score_f64 = [m, mask](const Tensor& x) {
        const std::vector<double> out = m->forward_f64(x);
        if (out.size() != static_cast<size_t>(mask.numel()))
            throw std::runtime_error("target: model output size changed between mask freeze and scoring");
        double acc = 0.0;
        for (size_t i = 0; i < out.size(); ++i)
            acc += out[i] * static_cast<double>(mask.values()[static_cast<int64_t>(i)]);
        return acc;
    };
    t.score_with_tap = [m, mask](const Tensor& x, const std::string& layer) {
        std::vector<LayerTap> taps;
        std::array<std::string, 1> names = {layer};
        Tensor out = m->forward_with_taps(x, std::span<const std::string>(names), taps);
        return std::make_pair(masked_score(out, mask), taps[0].activation);
    };
    return t;
}

}  // namespace esegeta
