#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bevdiff/rng.hpp"
#include "bevdiff/tensor.hpp"

namespace bevdiff {

/// Named learnable tensors. Ordered by name so iteration and serialization are deterministic.
class ParamStore {
public:
    void add(const std::string& name, Tensor init);
    bool contains(const std::string& name) const { return params_.count(name) != 0; }
    const Tensor& get(const std::string& name) const;
    Tensor& get(const std::string& name);
    const std::map<std::string, Tensor>& all() const noexcept { return params_; }
    std::size_t scalar_count() const;
    bool all_finite() const;

    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }

    friend bool operator==(const ParamStore&, const ParamStore&) = default;

private:
    std::map<std::string, Tensor> params_;
};

/// Uniform in +-sqrt(1/fan_in).
Tensor init_uniform(const Shape& shape, int fan_in, Rng& rng);

using Gradients = std::map<std::string, Tensor>;

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    Tape& tape() const { return *tape_; }
    int id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    int id_ = -1;
};

/// Append-only record of differentiable operations. Nodes are stored in creation order, which is a
/// topological order, so backward() is a single reverse sweep.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

    /// With record=false no backward closures are kept (inference).
    explicit Tape(bool record = true) : record_(record) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    /// Leaf bound to a named parameter; binding the same name twice returns the same node.
    Var parameter(const ParamStore& store, const std::string& name);

    /// Reverse sweep from a scalar node. Throws std::invalid_argument for non-scalar losses.
    void backward(Var loss);
    /// backward() then collect d loss / d p for every parameter in the store; unused ones are zero.
    Gradients gradients(Var loss, const ParamStore& store);

    /// Accumulated gradient of a node after backward(); zeros if none reached it.
    Tensor grad(Var v) const;

    bool recording() const noexcept { return record_; }
    std::size_t size() const noexcept { return nodes_.size(); }
    std::string_view op_name(Var v) const { return nodes_.at(v.id()).op; }
    const std::vector<int>& inputs_of(Var v) const { return nodes_.at(v.id()).inputs; }

    // Used by primitive implementations.
    Var record(std::string_view op, std::vector<Var> inputs, Tensor value, BackwardFn fn);
    bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
    void accumulate(Var v, const Tensor& g);
    /// Mutable gradient buffer of an input that requires grad (allocated on first use).
    Tensor& grad_buffer(Var v);

private:
    friend class Var;

    struct Node {
        std::string_view op;
        std::vector<int> inputs;
        Tensor value;
        BackwardFn backward;
        std::string param;
        bool requires_grad = false;
    };

    bool record_;
    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::map<std::string, int> bound_params_;
};

enum class Reduction { Mean, Sum };

// ---------------------------------------------------------------------------------------------
// Differentiable primitives. All operate on rank-4 NCHW tensors unless stated otherwise.

/// Cross-correlation. kernel [O,C,kh,kw] with odd kh,kw; bias [O].
Var conv2d(Var input, Var kernel, Var bias, int stride, int padding);
/// Bilinear resampling with align_corners = false.
Var bilinear_resize(Var input, int out_h, int out_w);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var swish(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var exp(Var a);
Var concat(std::span<const Var> parts, int axis);
Var slice(Var a, int axis, int begin, int end);
Var mean(Var a);
Var sum(Var a);
Var mse(Var a, Var b);
Var stop_gradient(Var a);

/// x [N,D] times weight [O,D]^T plus bias [O] -> [N,O].
Var linear(Var x, Var weight, Var bias);
/// x [N,C,H,W] plus v [N,C] broadcast over H,W.
Var add_per_channel(Var x, Var v);
/// Multiply sample n of x by coeffs[n].
Var scale_per_sample(Var x, std::span<const double> coeffs);
/// Replace every (n,c) plane by its spatial mean.
Var spatial_mean_broadcast(Var x);
/// sum_i w_i x_i / (sum_i w_i + eps); weights is a rank-1 tensor with one entry per input.
Var normalized_fusion(std::span<const Var> inputs, Var weights, double eps);
/// Flat-index gather -> rank-1 tensor of indices.size().
Var gather(Var a, std::span<const std::size_t> indices);
Var smooth_l1(Var a);
/// Per-element sigmoid focal loss of logits against binary targets, probabilities clamped to
/// [1e-7, 1 - 1e-7].
Var sigmoid_focal_loss(Var logits, const Tensor& targets, double alpha, double gamma, Reduction reduction);

}  // namespace bevdiff
