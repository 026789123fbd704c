#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace esegeta {

enum class OpKind {
    Conv2d,
    Conv3d,
    MaxPool,
    UpsampleNearest,
    UpsampleLinear,
    Relu,
    LeakyRelu,
    Sigmoid,
    Softmax,
    Add,
    Mul,
    Concat,
    Linear,
    Sum,
    Mean,
    Reshape,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Conv2d: return "conv2d";
        case OpKind::Conv3d: return "conv3d";
        case OpKind::MaxPool: return "maxpool";
        case OpKind::UpsampleNearest: return "upsample_nearest";
        case OpKind::UpsampleLinear: return "upsample_linear";
        case OpKind::Relu: return "relu";
        case OpKind::LeakyRelu: return "leaky_relu";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Softmax: return "softmax";
        case OpKind::Add: return "add";
        case OpKind::Mul: return "mul";
        case OpKind::Concat: return "concat";
        case OpKind::Linear: return "linear";
        case OpKind::Sum: return "sum";
        case OpKind::Mean: return "mean";
        case OpKind::Reshape: return "reshape";
    }
    return "?";
}

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_to_string(const std::vector<int>& shape) {
    std::ostringstream os;
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    return os.str();
}

namespace detail {

struct TensorData {
    std::vector<int> shape;
    std::vector<float> values;
    bool requires_grad = false;
    std::vector<float> grad;  // filled by backward(); empty until then
    int producer = -1;        // index of the producing op record, -1 for leaves
};

struct OpRecord {
    OpKind kind;
    std::vector<std::shared_ptr<TensorData>> inputs;
    std::shared_ptr<TensorData> output;
    std::vector<int> iparams;    // stride/pad/window/factor/axis sizes, op specific
    std::vector<float> fparams;  // slope/alpha, op specific
    std::vector<int> iaux;       // forward-time bookkeeping (e.g. maxpool argmax)
};

// Tape of ops in creation order; creation order is a valid topological order.
// When two tapes meet at an op (diamond patterns rooted at a shared leaf),
// the smaller tape is spliced into the larger and left as a redirect.
struct Graph {
    std::vector<OpRecord> ops;
    std::shared_ptr<Graph> forward_to;  // set when this tape was merged away
};

inline std::shared_ptr<Graph> resolve_graph(std::shared_ptr<Graph> g) {
    while (g && g->forward_to) g = g->forward_to;
    return g;
}

}  // namespace detail

// A dense float tensor handle. Leaf tensors own plain storage; tensors
// produced by ops additionally reference the recording graph so backward()
// can replay the tape. Handles share storage (shallow copy semantics).
class Tensor {
public:
    Tensor() = default;

    Tensor(std::vector<int> shape, std::vector<float> values, bool requires_grad = false) {
        validate_shape(shape);
        if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
            throw std::invalid_argument("tensor: shape " + shape_to_string(shape) + " expects " +
                                        std::to_string(shape_numel(shape)) + " values, got " +
                                        std::to_string(values.size()));
        }
        for (size_t i = 0; i < values.size(); ++i) {
            if (!std::isfinite(values[i])) {
                throw std::invalid_argument("tensor: non-finite value at flat index " + std::to_string(i));
            }
        }
        d_ = std::make_shared<detail::TensorData>();
        d_->shape = std::move(shape);
        d_->values = std::move(values);
        d_->requires_grad = requires_grad;
    }

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        std::vector<float> v(static_cast<size_t>(shape_numel(shape)), 0.0f);
        return Tensor(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor full(std::vector<int> shape, float value, bool requires_grad = false) {
        std::vector<float> v(static_cast<size_t>(shape_numel(shape)), value);
        return Tensor(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor scalar(float value, bool requires_grad = false) {
        return Tensor({1}, {value}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(d_); }

    const std::vector<int>& shape() const { return data().shape; }

    int ndim() const { return static_cast<int>(data().shape.size()); }

    int64_t numel() const { return static_cast<int64_t>(data().values.size()); }

    std::span<const float> values() const { return data().values; }

    float item() const {
        if (numel() != 1) {
            throw std::invalid_argument("tensor: item() requires a single-element tensor, shape is " +
                                        shape_to_string(shape()));
        }
        return data().values[0];
    }

    bool requires_grad() const { return data().requires_grad; }

    bool has_grad() const { return defined() && !d_->grad.empty(); }

    // Snapshot of the accumulated gradient as a fresh leaf tensor.
    Tensor grad() const {
        if (!has_grad()) {
            throw std::runtime_error("tensor: no gradient recorded; call backward() first");
        }
        Tensor g;
        g.d_ = std::make_shared<detail::TensorData>();
        g.d_->shape = d_->shape;
        g.d_->values = d_->grad;
        return g;
    }

    // Fresh leaf with the same contents, detached from any graph.
    Tensor detach() const {
        Tensor t;
        t.d_ = std::make_shared<detail::TensorData>();
        t.d_->shape = data().shape;
        t.d_->values = data().values;
        return t;
    }

    Tensor with_requires_grad(bool flag = true) const {
        Tensor t = detach();
        t.d_->requires_grad = flag;
        return t;
    }

    // --- internal plumbing (used by ops/autodiff/methods) ---

    const std::shared_ptr<detail::TensorData>& impl() const { return d_; }

    const std::shared_ptr<detail::Graph>& graph() const { return g_; }

    static Tensor attach(std::shared_ptr<detail::TensorData> d, std::shared_ptr<detail::Graph> g) {
        Tensor t;
        t.d_ = std::move(d);
        t.g_ = std::move(g);
        return t;
    }

private:
    static void validate_shape(const std::vector<int>& shape) {
        if (shape.empty()) throw std::invalid_argument("tensor: shape must have at least one dimension");
        for (int d : shape) {
            if (d <= 0) throw std::invalid_argument("tensor: non-positive extent in shape " + shape_to_string(shape));
        }
    }

    detail::TensorData& data() {
        if (!d_) throw std::runtime_error("tensor: using a default-constructed tensor");
        return *d_;
    }
    const detail::TensorData& data() const {
        if (!d_) throw std::runtime_error("tensor: using a default-constructed tensor");
        return *d_;
    }

    std::shared_ptr<detail::TensorData> d_;
    std::shared_ptr<detail::Graph> g_;
};

}  // namespace esegeta
