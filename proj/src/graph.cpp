#include "ck/graph.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_map>

#include "ck/error.hpp"
#include "ck/ops.hpp"

namespace ck {

namespace {

constexpr std::pair<LayerKind, std::string_view> kKindNames[] = {
    {LayerKind::Conv2D, "Conv2D"},       {LayerKind::FullyConnected, "FullyConnected"},
    {LayerKind::BatchNorm, "BatchNorm"}, {LayerKind::ReLU, "ReLU"},
    {LayerKind::Add, "Add"},             {LayerKind::MaxPool2D, "MaxPool2D"},
    {LayerKind::Flatten, "Flatten"},
};

constexpr std::pair<HookPosition, std::string_view> kPositionNames[] = {
    {HookPosition::PreParam, "pre_param"},
    {HookPosition::PreInput, "pre_input"},
    {HookPosition::PostOutput, "post_output"},
};

void expect_param_shape(const NodeSpec& spec, std::string_view name, const Shape& shape, bool optional = false) {
    if (!spec.has_param(name)) {
        if (optional) return;
        throw GraphError("node '" + spec.id + "': missing parameter '" + std::string(name) + "'");
    }
    if (spec.param(name).shape() != shape)
        throw ShapeError("node '" + spec.id + "': parameter '" + std::string(name) + "' has shape " +
                         shape_str(spec.param(name).shape()) + ", expected " + shape_str(shape));
}

std::size_t expected_input_count(LayerKind kind) { return kind == LayerKind::Add ? 2 : 1; }

void validate_node(const NodeSpec& spec) {
    switch (spec.kind) {
    case LayerKind::Conv2D: {
        const auto& a = spec.as<Conv2dAttrs>();
        if (a.in_channels == 0 || a.out_channels == 0 || a.kernel == 0 || a.stride == 0)
            throw GraphError("node '" + spec.id + "': Conv2D attributes must be positive");
        expect_param_shape(spec, "weight", {a.out_channels, a.in_channels, a.kernel, a.kernel});
        expect_param_shape(spec, "bias", {a.out_channels}, true);
        break;
    }
    case LayerKind::FullyConnected: {
        const auto& a = spec.as<LinearAttrs>();
        if (a.in_features == 0 || a.out_features == 0)
            throw GraphError("node '" + spec.id + "': FullyConnected sizes must be positive");
        expect_param_shape(spec, "weight", {a.out_features, a.in_features});
        expect_param_shape(spec, "bias", {a.out_features}, true);
        break;
    }
    case LayerKind::BatchNorm: {
        const auto& a = spec.as<BatchNormAttrs>();
        for (auto name : {"gamma", "beta", "running_mean", "running_var"}) expect_param_shape(spec, name, {a.channels});
        break;
    }
    case LayerKind::MaxPool2D: {
        const auto& a = spec.as<PoolAttrs>();
        if (a.kernel == 0 || a.stride == 0) throw GraphError("node '" + spec.id + "': pool window must be positive");
        break;
    }
    default:
        break;
    }
}

} // namespace

std::string_view to_string(LayerKind kind) {
    for (auto [k, name] : kKindNames)
        if (k == kind) return name;
    return "?";
}

LayerKind layer_kind_from_string(std::string_view name) {
    for (auto [k, n] : kKindNames)
        if (n == name) return k;
    throw FormatError("unknown layer kind '" + std::string(name) + "'");
}

std::string_view to_string(HookPosition position) {
    for (auto [p, name] : kPositionNames)
        if (p == position) return name;
    return "?";
}

HookPosition hook_position_from_string(std::string_view name) {
    for (auto [p, n] : kPositionNames)
        if (n == name) return p;
    throw FormatError("unknown hook position '" + std::string(name) + "'");
}

bool NodeSpec::has_param(std::string_view name) const {
    return std::any_of(params.begin(), params.end(), [&](const NamedTensor& p) { return p.name == name; });
}

const Tensor& NodeSpec::param(std::string_view name) const {
    for (const auto& p : params)
        if (p.name == name) return p.value;
    throw GraphError("node '" + id + "' has no parameter '" + std::string(name) + "'");
}

Tensor& NodeSpec::param(std::string_view name) {
    return const_cast<Tensor&>(std::as_const(*this).param(name));
}

bool is_trainable_param(LayerKind kind, std::string_view name) {
    return !(kind == LayerKind::BatchNorm && (name == "running_mean" || name == "running_var"));
}

NodeSpec& ModelGraph::add(NodeSpec spec) {
    if (spec.id.empty() || spec.id == kInput) throw GraphError("invalid node id '" + spec.id + "'");
    if (contains(spec.id)) throw GraphError("duplicate node id '" + spec.id + "'");
    if (spec.inputs.size() != expected_input_count(spec.kind))
        throw GraphError("node '" + spec.id + "': " + std::string(to_string(spec.kind)) + " expects " +
                         std::to_string(expected_input_count(spec.kind)) + " input(s)");
    for (const auto& in : spec.inputs)
        if (in != kInput && !contains(in))
            throw GraphError("node '" + spec.id + "': input '" + in + "' does not resolve to an earlier node");
    validate_node(spec);
    nodes_.push_back(std::move(spec));
    return nodes_.back();
}

bool ModelGraph::contains(std::string_view id) const {
    return std::any_of(nodes_.begin(), nodes_.end(), [&](const NodeSpec& n) { return n.id == id; });
}

const NodeSpec& ModelGraph::node(std::string_view id) const {
    for (const auto& n : nodes_)
        if (n.id == id) return n;
    throw GraphError("unknown node id '" + std::string(id) + "'");
}

NodeSpec& ModelGraph::node(std::string_view id) { return const_cast<NodeSpec&>(std::as_const(*this).node(id)); }

const std::string& ModelGraph::output() const {
    if (!output_.empty()) return output_;
    if (nodes_.empty()) throw GraphError("graph has no nodes");
    return nodes_.back().id;
}

void ModelGraph::set_output(std::string id) {
    if (!contains(id)) throw GraphError("unknown node id '" + id + "'");
    output_ = std::move(id);
}

std::vector<std::string> ModelGraph::consumers(std::string_view id) const {
    std::vector<std::string> out;
    for (const auto& n : nodes_)
        if (std::find(n.inputs.begin(), n.inputs.end(), id) != n.inputs.end()) out.push_back(n.id);
    return out;
}

void ModelGraph::insert_hook(const HookPoint& point, TransformPtr transform) {
    if (!transform) throw GraphError("insert_hook: null transform");
    if (point.node == kInput) {
        if (point.position != HookPosition::PostOutput)
            throw GraphError("insert_hook: the graph input only accepts post_output hooks");
    } else {
        const NodeSpec& n = node(point.node);
        if (point.position == HookPosition::PreParam && !n.has_param(point.param))
            throw GraphError("insert_hook: node '" + n.id + "' has no parameter '" + point.param + "'");
        if (point.position == HookPosition::PreInput && point.input_index >= n.inputs.size())
            throw GraphError("insert_hook: node '" + n.id + "' has no input " + std::to_string(point.input_index));
    }
    for (const auto& h : hooks_)
        if (h.point == point && h.transform->family() == transform->family())
            throw GraphError("insert_hook: a '" + transform->family() + "' hook already exists at " + point.node + "/" +
                             std::string(to_string(point.position)) + (point.param.empty() ? "" : "/" + point.param));
    hooks_.push_back({point, std::move(transform)});
}

std::vector<TransformPtr> ModelGraph::hooks_at(const HookPoint& point) const {
    std::vector<TransformPtr> out;
    for (const auto& h : hooks_)
        if (h.point == point) out.push_back(h.transform);
    return out;
}

void ModelGraph::remove_hooks(const std::function<bool(const Hook&)>& predicate) {
    std::erase_if(hooks_, predicate);
}

std::vector<Tensor> ModelGraph::parameters() const {
    std::vector<Tensor> out;
    for (const auto& n : nodes_)
        for (const auto& p : n.params)
            if (is_trainable_param(n.kind, p.name)) out.push_back(p.value);
    for (const auto& h : hooks_)
        for (const auto& t : h.transform->trainable()) out.push_back(t);
    return out;
}

std::size_t ModelGraph::parameter_count() const {
    std::size_t count = 0;
    for (const auto& n : nodes_)
        for (const auto& p : n.params)
            if (is_trainable_param(n.kind, p.name)) count += p.value.numel();
    return count;
}

ModelGraph ModelGraph::clone() const {
    ModelGraph out(input_shape_);
    out.output_ = output_;
    out.nodes_ = nodes_;
    for (auto& n : out.nodes_)
        for (auto& p : n.params) p.value = p.value.clone();
    for (const auto& h : hooks_) out.hooks_.push_back({h.point, h.transform->clone()});
    return out;
}

namespace {

Tensor apply_hooks(const ModelGraph& graph, const HookPoint& point, Tensor x, const RunContext& ctx) {
    for (const auto& h : graph.hooks())
        if (h.point == point) x = h.transform->apply(x, ctx);
    return x;
}

Tensor hooked_param(const ModelGraph& graph, const NodeSpec& n, std::string_view name, const RunContext& ctx) {
    return apply_hooks(graph, HookPoint::pre_param(n.id, std::string(name)), n.param(name), ctx);
}

Tensor run_batchnorm(const ModelGraph& graph, const NodeSpec& n, const Tensor& x, const RunContext& ctx) {
    const auto& a = n.as<BatchNormAttrs>();
    if ((x.rank() != 2 && x.rank() != 4) || x.dim(1) != a.channels)
        throw ShapeError("node '" + n.id + "' (BatchNorm): expected " + std::to_string(a.channels) +
                         " channels on axis 1, got input " + shape_str(x.shape()));
    Tensor gamma = hooked_param(graph, n, "gamma", ctx);
    Tensor beta = hooked_param(graph, n, "beta", ctx);
    Tensor running_mean = n.param("running_mean");
    Tensor running_var = n.param("running_var");
    const Shape& shape = x.shape();

    if (ctx.mode == RunMode::Train) {
        const double m = static_cast<double>(x.numel() / a.channels);
        Tensor mu = scale(reduce_to_axis(x, 1), 1.0 / m);
        Tensor centered = sub(x, broadcast_axis(mu, shape, 1));
        Tensor var = scale(reduce_to_axis(mul(centered, centered), 1), 1.0 / m);
        Tensor inv_std = pow_scalar(add_scalar(var, a.eps), -0.5);
        const double unbias = m > 1 ? m / (m - 1) : 1.0;
        for (std::size_t c = 0; c < a.channels; ++c) {
            running_mean[c] = (1 - a.momentum) * running_mean[c] + a.momentum * mu[c];
            running_var[c] = (1 - a.momentum) * running_var[c] + a.momentum * var[c] * unbias;
        }
        return add(mul(centered, broadcast_axis(mul(inv_std, gamma), shape, 1)), broadcast_axis(beta, shape, 1));
    }
    std::vector<double> inv(a.channels);
    for (std::size_t c = 0; c < a.channels; ++c) inv[c] = 1.0 / std::sqrt(running_var[c] + a.eps);
    Tensor factor = mul(gamma, Tensor(Shape{a.channels}, std::move(inv)));
    Tensor offset = sub(beta, mul(factor, running_mean.detach()));
    return add(mul(x, broadcast_axis(factor, shape, 1)), broadcast_axis(offset, shape, 1));
}

Tensor run_node(const ModelGraph& graph, const NodeSpec& n, const std::vector<Tensor>& in, const RunContext& ctx) {
    switch (n.kind) {
    case LayerKind::Conv2D: {
        const auto& a = n.as<Conv2dAttrs>();
        if (in[0].rank() != 4 || in[0].dim(1) != a.in_channels)
            throw ShapeError("node '" + n.id + "' (Conv2D): expected [N," + std::to_string(a.in_channels) +
                             ",H,W] input, got " + shape_str(in[0].shape()));
        Tensor y = conv2d(in[0], hooked_param(graph, n, "weight", ctx), {a.stride, a.padding});
        if (n.has_param("bias")) y = add(y, broadcast_axis(hooked_param(graph, n, "bias", ctx), y.shape(), 1));
        return y;
    }
    case LayerKind::FullyConnected: {
        const auto& a = n.as<LinearAttrs>();
        if (in[0].rank() != 2 || in[0].dim(1) != a.in_features)
            throw ShapeError("node '" + n.id + "' (FullyConnected): expected [N," + std::to_string(a.in_features) +
                             "] input, got " + shape_str(in[0].shape()));
        Tensor y = matmul(in[0], transpose(hooked_param(graph, n, "weight", ctx)));
        if (n.has_param("bias")) y = add(y, broadcast_axis(hooked_param(graph, n, "bias", ctx), y.shape(), 1));
        return y;
    }
    case LayerKind::BatchNorm:
        return run_batchnorm(graph, n, in[0], ctx);
    case LayerKind::ReLU:
        return relu(in[0]);
    case LayerKind::Add:
        if (in[0].shape() != in[1].shape())
            throw ShapeError("node '" + n.id + "' (Add): input shapes differ " + shape_str(in[0].shape()) + " vs " +
                             shape_str(in[1].shape()));
        return add(in[0], in[1]);
    case LayerKind::MaxPool2D: {
        const auto& a = n.as<PoolAttrs>();
        return max_pool2d(in[0], a.kernel, a.stride);
    }
    case LayerKind::Flatten: {
        const std::size_t batch = in[0].dim(0);
        return reshape(in[0], Shape{batch, in[0].numel() / batch});
    }
    }
    throw GraphError("node '" + n.id + "': unsupported kind");
}

using Observer = std::function<void(const std::string&, const Tensor&)>;

Tensor execute(const ModelGraph& graph, const Tensor& input, const RunContext& ctx, const Observer& observe) {
    for (const auto& h : graph.hooks())
        if (h.point.node != ModelGraph::kInput && !graph.contains(h.point.node))
            throw GraphError("dangling hook on unknown node '" + h.point.node + "'");
    const Shape& sig = graph.input_shape();
    if (input.rank() != sig.size() + 1 || !std::equal(sig.begin(), sig.end(), input.shape().begin() + 1))
        throw ShapeError("run_graph: input " + shape_str(input.shape()) + " does not match signature [N" +
                         (sig.empty() ? "" : "," + shape_str(sig).substr(1)));
    std::unordered_map<std::string, Tensor> values;
    values.emplace(std::string(ModelGraph::kInput), apply_hooks(graph, HookPoint::post_output(std::string(ModelGraph::kInput)), input, ctx));
    for (const auto& n : graph.nodes()) {
        std::vector<Tensor> in;
        in.reserve(n.inputs.size());
        for (std::size_t i = 0; i < n.inputs.size(); ++i)
            in.push_back(apply_hooks(graph, HookPoint::pre_input(n.id, i), values.at(n.inputs[i]), ctx));
        Tensor out = apply_hooks(graph, HookPoint::post_output(n.id), run_node(graph, n, in, ctx), ctx);
        if (observe) observe(n.id, out);
        values[n.id] = std::move(out);
    }
    return values.at(graph.output());
}

} // namespace

Tensor run_graph(const ModelGraph& graph, const Tensor& input, const RunContext& ctx) {
    return execute(graph, input, ctx, {});
}

std::vector<std::pair<std::string, Shape>> infer_output_shapes(const ModelGraph& graph) {
    NoGradGuard no_grad;
    Shape batch_shape{1};
    batch_shape.insert(batch_shape.end(), graph.input_shape().begin(), graph.input_shape().end());
    std::vector<std::pair<std::string, Shape>> shapes;
    // Hooks are skipped: a bare structural copy avoids stochastic transforms.
    ModelGraph bare(graph.input_shape());
    for (const auto& n : graph.nodes()) bare.add(n);
    bare.set_output(graph.output());
    execute(bare, Tensor(batch_shape, 0.0), RunContext{RunMode::Eval, nullptr},
            [&](const std::string& id, const Tensor& t) { shapes.emplace_back(id, t.shape()); });
    return shapes;
}

namespace {

Tensor he_normal(const Shape& shape, std::size_t fan_in, Rng& rng) {
    Tensor t(shape);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.data()) v = rng.normal(0.0, stddev);
    return t;
}

} // namespace

NodeSpec make_conv2d(std::string id, std::string input, Conv2dAttrs attrs, Rng& rng, bool bias) {
    NodeSpec n{std::move(id), LayerKind::Conv2D, attrs, {}, {std::move(input)}};
    n.params.push_back({"weight", he_normal({attrs.out_channels, attrs.in_channels, attrs.kernel, attrs.kernel},
                                            attrs.in_channels * attrs.kernel * attrs.kernel, rng)});
    if (bias) n.params.push_back({"bias", Tensor::zeros({attrs.out_channels})});
    for (auto& p : n.params) p.value.set_requires_grad(true);
    return n;
}

NodeSpec make_linear(std::string id, std::string input, LinearAttrs attrs, Rng& rng) {
    NodeSpec n{std::move(id), LayerKind::FullyConnected, attrs, {}, {std::move(input)}};
    n.params.push_back({"weight", he_normal({attrs.out_features, attrs.in_features}, attrs.in_features, rng)});
    n.params.push_back({"bias", Tensor::zeros({attrs.out_features})});
    for (auto& p : n.params) p.value.set_requires_grad(true);
    return n;
}

NodeSpec make_batchnorm(std::string id, std::string input, std::size_t channels) {
    NodeSpec n{std::move(id), LayerKind::BatchNorm, BatchNormAttrs{channels}, {}, {std::move(input)}};
    n.params.push_back({"gamma", Tensor::ones({channels})});
    n.params.push_back({"beta", Tensor::zeros({channels})});
    n.params.push_back({"running_mean", Tensor::zeros({channels})});
    n.params.push_back({"running_var", Tensor::ones({channels})});
    n.param("gamma").set_requires_grad(true);
    n.param("beta").set_requires_grad(true);
    return n;
}

NodeSpec make_relu(std::string id, std::string input) {
    return NodeSpec{std::move(id), LayerKind::ReLU, std::monostate{}, {}, {std::move(input)}};
}

NodeSpec make_add(std::string id, std::string lhs, std::string rhs) {
    return NodeSpec{std::move(id), LayerKind::Add, std::monostate{}, {}, {std::move(lhs), std::move(rhs)}};
}

NodeSpec make_maxpool(std::string id, std::string input, std::size_t kernel, std::size_t stride) {
    return NodeSpec{std::move(id), LayerKind::MaxPool2D, PoolAttrs{kernel, stride}, {}, {std::move(input)}};
}

NodeSpec make_flatten(std::string id, std::string input) {
    return NodeSpec{std::move(id), LayerKind::Flatten, std::monostate{}, {}, {std::move(input)}};
}

} // namespace ck
