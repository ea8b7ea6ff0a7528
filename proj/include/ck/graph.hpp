#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ck/rng.hpp"
#include "ck/tensor.hpp"
#include "ck/transform.hpp"

namespace ck {

enum class LayerKind { Conv2D, FullyConnected, BatchNorm, ReLU, Add, MaxPool2D, Flatten };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

struct Conv2dAttrs {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;
};

struct LinearAttrs {
    std::size_t in_features = 0;
    std::size_t out_features = 0;
};

struct BatchNormAttrs {
    std::size_t channels = 0;
    double eps = 1e-5;
    double momentum = 0.1;
};

struct PoolAttrs {
    std::size_t kernel = 2;
    std::size_t stride = 2;
};

using LayerAttrs = std::variant<std::monostate, Conv2dAttrs, LinearAttrs, BatchNormAttrs, PoolAttrs>;

/// One layer of a model graph. Conv2D weights are [out, in, kH, kW] and
/// FullyConnected weights are [out_features, in_features].
struct NodeSpec {
    std::string id;
    LayerKind kind = LayerKind::ReLU;
    LayerAttrs attrs;
    std::vector<NamedTensor> params;
    std::vector<std::string> inputs;

    bool has_param(std::string_view name) const;
    const Tensor& param(std::string_view name) const;
    Tensor& param(std::string_view name);

    template <class A>
    const A& as() const { return std::get<A>(attrs); }
    template <class A>
    A& as() { return std::get<A>(attrs); }
};

enum class HookPosition { PreParam, PreInput, PostOutput };

std::string_view to_string(HookPosition position);
HookPosition hook_position_from_string(std::string_view name);

struct HookPoint {
    std::string node;
    HookPosition position = HookPosition::PostOutput;
    std::string param;            // PreParam only
    std::size_t input_index = 0;  // PreInput only

    static HookPoint pre_param(std::string node, std::string param) {
        return {std::move(node), HookPosition::PreParam, std::move(param), 0};
    }
    static HookPoint pre_input(std::string node, std::size_t index = 0) {
        return {std::move(node), HookPosition::PreInput, {}, index};
    }
    static HookPoint post_output(std::string node) { return {std::move(node), HookPosition::PostOutput, {}, 0}; }

    bool operator==(const HookPoint&) const = default;
};

struct Hook {
    HookPoint point;
    TransformPtr transform;
};

/// Explicit layer DAG with compression hook points.
///
/// Nodes may only reference earlier nodes (or the graph input), so insertion
/// order is a topological order and the graph stays acyclic under every
/// mutation. Hooks at the same point compose in registration order.
class ModelGraph {
public:
    static constexpr std::string_view kInput = "input";

    ModelGraph() = default;
    /// `input_shape` excludes the batch dimension.
    explicit ModelGraph(Shape input_shape) : input_shape_(std::move(input_shape)) {}

    const Shape& input_shape() const { return input_shape_; }

    NodeSpec& add(NodeSpec spec);
    bool contains(std::string_view id) const;
    const NodeSpec& node(std::string_view id) const;
    NodeSpec& node(std::string_view id);
    const std::vector<NodeSpec>& nodes() const { return nodes_; }
    std::vector<NodeSpec>& nodes() { return nodes_; }

    /// Defaults to the last added node.
    const std::string& output() const;
    void set_output(std::string id);

    std::vector<std::string> consumers(std::string_view id) const;

    void insert_hook(const HookPoint& point, TransformPtr transform);
    std::vector<TransformPtr> hooks_at(const HookPoint& point) const;
    const std::vector<Hook>& hooks() const { return hooks_; }
    void remove_hooks(const std::function<bool(const Hook&)>& predicate);

    /// Trainable tensors: layer weights, biases and BatchNorm affine params
    /// followed by the trainable state of every hook.
    std::vector<Tensor> parameters() const;
    /// Number of scalars in layer weights and biases (BatchNorm included,
    /// running statistics excluded).
    std::size_t parameter_count() const;

    /// Deep copy of parameters; hooks are cloned too.
    ModelGraph clone() const;

private:
    Shape input_shape_;
    std::vector<NodeSpec> nodes_;
    std::vector<Hook> hooks_;
    std::string output_;
};

bool is_trainable_param(LayerKind kind, std::string_view name);

/// Executes the graph on a batch ([N, ...input_shape]). BatchNorm uses batch
/// statistics (and updates running statistics) in train mode, running
/// statistics in eval mode.
Tensor run_graph(const ModelGraph& graph, const Tensor& input, const RunContext& ctx);
inline Tensor run_graph(const ModelGraph& graph, const Tensor& input, RunMode mode = RunMode::Eval) {
    return run_graph(graph, input, RunContext{mode, nullptr});
}

/// Per-node output shapes for a batch of one, computed by a dry eval run.
std::vector<std::pair<std::string, Shape>> infer_output_shapes(const ModelGraph& graph);

// Layer construction helpers. Weights use He-normal initialization from rng,
// biases start at zero, BatchNorm at identity.
NodeSpec make_conv2d(std::string id, std::string input, Conv2dAttrs attrs, Rng& rng, bool bias = true);
NodeSpec make_linear(std::string id, std::string input, LinearAttrs attrs, Rng& rng);
NodeSpec make_batchnorm(std::string id, std::string input, std::size_t channels);
NodeSpec make_relu(std::string id, std::string input);
NodeSpec make_add(std::string id, std::string lhs, std::string rhs);
NodeSpec make_maxpool(std::string id, std::string input, std::size_t kernel = 2, std::size_t stride = 2);
NodeSpec make_flatten(std::string id, std::string input);

} // namespace ck
