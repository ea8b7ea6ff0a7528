#include "ck/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "ck/error.hpp"
#include "ck/ops.hpp"

namespace ck {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor: empty shape");
    for (auto d : shape)
        if (d == 0) throw ShapeError("tensor: zero-length dimension in " + shape_str(shape));
}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<TensorImpl>()) {
    check_shape(shape);
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<TensorImpl>()) {
    check_shape(shape);
    if (data.size() != shape_numel(shape))
        throw ShapeError("tensor: data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
}

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor(Shape{values.size()}, std::vector<double>(values));
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (on && impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0);
    if (!on) impl_->grad.clear();
    return *this;
}

void Tensor::zero_grad() {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    Tensor out;
    out.impl_ = std::make_shared<TensorImpl>();
    out.impl_->shape = impl_->shape;
    out.impl_->data = impl_->data;
    return out;
}

Tensor Tensor::clone() const {
    Tensor out = detach();
    out.set_requires_grad(impl_->requires_grad);
    return out;
}

namespace {
thread_local bool g_grad_mode = true;
}

bool grad_mode_enabled() { return g_grad_mode; }

NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_mode) { g_grad_mode = enabled; }
GradModeGuard::~GradModeGuard() { g_grad_mode = previous_; }

Tensor record_op(std::string op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                 BackwardFn backward) {
    Tensor out(std::move(shape), std::move(data));
    if (!g_grad_mode) return out;
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (!any) return out;
    auto node = std::make_shared<AutodiffNode>();
    node->op = std::move(op);
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    out.impl_->grad_fn = std::move(node);
    out.impl_->requires_grad = true;
    return out;
}

namespace {

// Reverse topological order of the tensors reachable from `root` through
// recorded nodes.
std::vector<TensorImpl*> reverse_topological(const Tensor& root) {
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    struct Frame {
        TensorImpl* impl;
        std::size_t next;
    };
    std::vector<Frame> stack{{root.impl(), 0}};
    visited.insert(root.impl());
    while (!stack.empty()) {
        Frame& top = stack.back();
        const auto& node = top.impl->grad_fn;
        if (node && top.next < node->inputs.size()) {
            const Tensor& in = node->inputs[top.next++];
            if (in.defined() && in.requires_grad() && visited.insert(in.impl()).second) stack.push_back({in.impl(), 0});
            continue;
        }
        order.push_back(top.impl);
        stack.pop_back();
    }
    std::reverse(order.begin(), order.end());
    return order;
}

std::unordered_map<TensorImpl*, Tensor> run_backward(const Tensor& output, bool create_graph) {
    if (!output.defined()) throw Error("backward: undefined tensor");
    if (output.numel() != 1)
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(output.shape()));
    std::unordered_map<TensorImpl*, Tensor> grads;
    if (!output.requires_grad()) return grads;

    GradModeGuard mode(create_graph);
    grads.emplace(output.impl(), Tensor(output.shape(), 1.0));
    for (TensorImpl* impl : reverse_topological(output)) {
        const auto& node = impl->grad_fn;
        if (!node) continue;
        auto it = grads.find(impl);
        if (it == grads.end()) continue;
        Tensor g = it->second;
        std::vector<Tensor> input_grads = node->backward(g);
        if (input_grads.size() != node->inputs.size())
            throw Error("backward: op '" + node->op + "' returned wrong number of gradients");
        for (std::size_t i = 0; i < input_grads.size(); ++i) {
            const Tensor& in = node->inputs[i];
            const Tensor& ig = input_grads[i];
            if (!in.defined() || !in.requires_grad() || !ig.defined()) continue;
            if (ig.shape() != in.shape())
                throw ShapeError("backward: op '" + node->op + "' produced gradient " + shape_str(ig.shape()) +
                                 " for input " + shape_str(in.shape()));
            auto [slot, inserted] = grads.try_emplace(in.impl(), ig);
            if (!inserted) slot->second = add(slot->second, ig);
        }
    }
    return grads;
}

} // namespace

void backward(const Tensor& loss) {
    auto grads = run_backward(loss, false);
    for (auto& [impl, g] : grads) {
        if (impl->grad_fn || !impl->requires_grad) continue;
        if (impl->grad.size() != impl->data.size()) impl->grad.assign(impl->data.size(), 0.0);
        auto gv = g.data();
        for (std::size_t i = 0; i < gv.size(); ++i) impl->grad[i] += gv[i];
    }
}

std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt, bool create_graph) {
    auto grads = run_backward(output, create_graph);
    std::vector<Tensor> result;
    result.reserve(wrt.size());
    for (const Tensor& t : wrt) {
        auto it = grads.find(t.impl());
        result.push_back(it != grads.end() ? it->second : Tensor::zeros(t.shape()));
    }
    return result;
}

} // namespace ck
