#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ck/rng.hpp"
#include "ck/tensor.hpp"
#include "json.hpp"

namespace ck {

enum class RunMode { Train, Eval };

struct RunContext {
    RunMode mode = RunMode::Eval;
    Rng* rng = nullptr;  // required by stochastic transforms in train mode
};

struct NamedTensor {
    std::string name;
    Tensor value;
};

/// Which channel axis of a hooked tensor a pruning slice refers to.
enum class ChannelAxis { Output, Input };

/// A compression operation attached to a graph hook point.
///
/// Transforms are shared between the graph (which applies them) and the
/// controller of the algorithm that created them (which updates their state).
class Transform {
public:
    virtual ~Transform() = default;

    /// Compression family; at most one transform per family per hook point.
    virtual std::string family() const = 0;
    /// Serialization tag, resolved by make_transform().
    virtual std::string type() const = 0;

    virtual Tensor apply(const Tensor& x, const RunContext& ctx) = 0;

    virtual std::vector<Tensor> trainable() const { return {}; }
    /// Full state (trainable values and buffers) in a stable order.
    virtual std::vector<NamedTensor> tensors() const { return {}; }
    virtual nlohmann::json attrs() const { return nlohmann::json::object(); }
    virtual std::shared_ptr<Transform> clone() const = 0;

    /// Drops per-channel state for channels with keep[c] == false. Called when
    /// pruned filters are physically removed from the hooked tensor.
    virtual void slice_channels(ChannelAxis axis, const std::vector<bool>& keep);
};

using TransformPtr = std::shared_ptr<Transform>;
using TransformFactory =
    std::function<TransformPtr(const nlohmann::json& attrs, const std::vector<NamedTensor>& tensors)>;

void register_transform(const std::string& type, TransformFactory factory);
/// Rebuilds a transform from its serialized form; FormatError on unknown type.
TransformPtr make_transform(const std::string& type, const nlohmann::json& attrs,
                            const std::vector<NamedTensor>& tensors);

} // namespace ck
