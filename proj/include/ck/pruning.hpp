#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ck/graph.hpp"
#include "ck/transform.hpp"

namespace ck {

enum class FilterCriterion { L1, L2, GeometricMedian };

std::string_view to_string(FilterCriterion criterion);
FilterCriterion filter_criterion_from_string(std::string_view name);

/// One score per output filter of a Conv2D weight [out, in, kH, kW]; lower
/// means less important. GeometricMedian scores sum_{j != i} ||F_i - F_j||_2
/// and is not defined for a single filter (returns nullopt).
std::optional<std::vector<double>> filter_importance(const Tensor& weight, FilterCriterion criterion);

/// Keep-mask that drops the floor(rate * n) lowest-scored filters; ties drop
/// the lower index first.
std::vector<bool> select_filters(const std::vector<double>& scores, double rate);

enum class PruningSchedulerMode { Baseline, Exponential };

std::string_view to_string(PruningSchedulerMode mode);
PruningSchedulerMode pruning_scheduler_from_string(std::string_view name);

struct PruningScheduleSpec {
    PruningSchedulerMode mode = PruningSchedulerMode::Baseline;
    double target = 0.3;
    double init = 0.0;  // exponential starting rate
    std::size_t warmup_epochs = 0;
    std::size_t epochs = 0;  // exponential ramp length

    void validate() const;
};

struct PruningRate {
    double rate = 0.0;
    bool frozen = false;
};

/// Baseline: 0 before warmup, then the target, frozen. Exponential:
/// target - (target - init) * exp(-5 (e - W) / E) after warmup, the target
/// (frozen) from W + E on.
PruningRate pruning_rate_at_epoch(const PruningScheduleSpec& spec, std::size_t epoch);

/// Output-channel mask for a convolution's weight, bias and the per-channel
/// parameters of a following BatchNorm. Unfrozen masks pass gradients
/// straight through so zeroed filters can come back when the selection
/// changes; frozen masks also mask the gradient.
class FilterMask : public Transform {
public:
    explicit FilterMask(Tensor mask, bool frozen = false) : mask_(std::move(mask)), frozen_(frozen) {}

    std::string family() const override { return "pruning"; }
    std::string type() const override { return "FilterMask"; }
    Tensor apply(const Tensor& x, const RunContext& ctx) override;
    std::vector<NamedTensor> tensors() const override { return {{"mask", mask_}}; }
    nlohmann::json attrs() const override { return {{"frozen", frozen_}}; }
    TransformPtr clone() const override { return std::make_shared<FilterMask>(mask_.clone(), frozen_); }

    Tensor& mask() { return mask_; }
    const Tensor& mask() const { return mask_; }
    std::vector<bool> keep() const;
    void set_frozen(bool on) { frozen_ = on; }
    bool frozen() const { return frozen_; }

private:
    Tensor mask_;  // [out_channels], entries 0 or 1
    bool frozen_ = false;
};

/// Result of pushing per-convolution output masks through the graph.
struct MaskPropagation {
    /// Keep-mask over the channels (or flattened features) produced by a node.
    /// Absent entries mean nothing was removed.
    std::map<std::string, std::vector<bool>> output_masks;
    /// Convolutions whose pruning every downstream consumer accepts.
    std::set<std::string> prunable;
    /// Convolutions whose masks were reset (Add with differing inputs, or
    /// reaching the graph output).
    std::set<std::string> rejected;
};

/// BatchNorm, ReLU and MaxPool2D pass masks through; Flatten expands them to
/// feature positions; Conv2D and FullyConnected consume them. Add accepts
/// only identical input masks, otherwise every convolution feeding it is
/// reset to unpruned; so is anything whose mask reaches the graph output.
MaskPropagation propagate_pruning_masks(const ModelGraph& graph, const std::map<std::string, std::vector<bool>>& masks);

/// Convolutions that can be pruned at all: a structural propagation where
/// every candidate carries a distinct mask.
std::set<std::string> structurally_prunable(const ModelGraph& graph, const std::vector<std::string>& candidates);

/// Physically removes masked channels: conv filters and biases, the matching
/// input channels of consumers, BatchNorm entries, FullyConnected columns,
/// and per-channel state of hooks on affected tensors. Pruning hooks are
/// dropped. Throws GraphError if a masked conv is not prunable.
ModelGraph strip_pruned_filters(const ModelGraph& graph, const std::map<std::string, std::vector<bool>>& masks);

/// Pruning candidates: every Conv2D except `exclude` matches and, unless
/// prune_last, convolutions feeding the network head.
std::vector<std::string> pruning_candidates(const ModelGraph& graph, const std::vector<std::string>& exclude,
                                            bool prune_last);

/// BatchNorm nodes directly consuming `conv` (their gamma/beta get the conv's mask).
std::vector<std::string> following_batchnorms(const ModelGraph& graph, const std::string& conv);

} // namespace ck
