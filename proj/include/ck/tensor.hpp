#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ck {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;
struct AutodiffNode;

/// Gradient rule of a recorded op: maps the gradient of the op output to one
/// gradient per input (an undefined Tensor stands for "no contribution").
/// Rules are written with differentiable ops so that gradients can themselves
/// be differentiated when the backward pass runs with create_graph.
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until requires_grad is set
    bool requires_grad = false;
    std::shared_ptr<AutodiffNode> grad_fn;
};

/// Dense row-major tensor of 64-bit reals.
///
/// A Tensor is a shared handle: copies alias the same storage, which is what
/// lets the autodiff tape refer back to leaves. Use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
    static Tensor scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }
    static Tensor vector(std::initializer_list<double> values);

    bool defined() const { return impl_ != nullptr; }

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    std::span<double> data() { return impl_->data; }
    const std::vector<double>& values() const { return impl_->data; }
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double& operator[](std::size_t i) { return impl_->data[i]; }
    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on);
    /// Accumulated gradient of a leaf; all zeros when nothing has flowed in.
    std::span<const double> grad() const { return impl_->grad; }
    std::span<double> grad() { return impl_->grad; }
    void zero_grad();

    const std::shared_ptr<AutodiffNode>& grad_fn() const { return impl_->grad_fn; }
    bool is_leaf() const { return impl_->grad_fn == nullptr; }

    /// Same values, cut off from the tape.
    Tensor detach() const;
    /// Deep copy of values and the requires_grad flag; no tape history.
    Tensor clone() const;

    TensorImpl* impl() const { return impl_.get(); }
    bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

private:
    friend Tensor record_op(std::string, Shape, std::vector<double>, std::vector<Tensor>, BackwardFn);
    std::shared_ptr<TensorImpl> impl_;
};

struct AutodiffNode {
    std::string op;
    std::vector<Tensor> inputs;
    BackwardFn backward;
};

/// True while ops record onto the tape (thread-local).
bool grad_mode_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class GradModeGuard {
public:
    explicit GradModeGuard(bool enabled);
    ~GradModeGuard();
    GradModeGuard(const GradModeGuard&) = delete;
    GradModeGuard& operator=(const GradModeGuard&) = delete;

private:
    bool previous_;
};

/// Builds the result tensor of an op. The node is attached only when grad mode
/// is on and some input requires gradients; this is the extension point for
/// custom-gradient ops (straight-through estimators, fake quantization).
Tensor record_op(std::string op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                 BackwardFn backward);

/// Reverse-mode sweep from a scalar loss; accumulates into leaf grad buffers.
void backward(const Tensor& loss);

/// Gradients of a scalar `output` with respect to `wrt` (leaves or interior
/// tensors). Unreachable entries come back as zeros. With create_graph the
/// returned tensors are themselves on the tape (double backward).
std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt, bool create_graph = false);

} // namespace ck
