#include "ck/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include "ck/binarization.hpp"
#include "ck/error.hpp"
#include "ck/kernels.hpp"
#include "ck/ops.hpp"
#include "ck/sparsity.hpp"

namespace ck {

std::string_view to_string(FilterCriterion criterion) {
    switch (criterion) {
    case FilterCriterion::L1: return "l1";
    case FilterCriterion::L2: return "l2";
    case FilterCriterion::GeometricMedian: return "geometric_median";
    }
    return "?";
}

FilterCriterion filter_criterion_from_string(std::string_view name) {
    for (auto c : {FilterCriterion::L1, FilterCriterion::L2, FilterCriterion::GeometricMedian})
        if (to_string(c) == name) return c;
    throw ConfigError("unknown filter importance criterion '" + std::string(name) + "'");
}

std::optional<std::vector<double>> filter_importance(const Tensor& weight, FilterCriterion criterion) {
    if (weight.rank() != 4) throw ShapeError("filter_importance: expected a 4-D convolution weight, got " + shape_str(weight.shape()));
    const std::size_t n = weight.dim(0), dim = weight.numel() / n;
    std::vector<double> scores(n, 0.0);
    if (criterion == FilterCriterion::GeometricMedian) {
        if (n < 2) return std::nullopt;
        kernels::pairwise_distance_sums(n, dim, weight.data(), scores);
        return scores;
    }
    for (std::size_t f = 0; f < n; ++f) {
        double acc = 0.0;
        for (std::size_t i = 0; i < dim; ++i) {
            const double v = weight[f * dim + i];
            acc += criterion == FilterCriterion::L1 ? std::fabs(v) : v * v;
        }
        scores[f] = criterion == FilterCriterion::L1 ? acc : std::sqrt(acc);
    }
    return scores;
}

std::vector<bool> select_filters(const std::vector<double>& scores, double rate) {
    if (!(rate >= 0.0) || rate >= 1.0) throw ConfigError("pruning rate must be in [0, 1), got " + std::to_string(rate));
    const std::size_t n = scores.size();
    // the epsilon keeps e.g. 0.3 * 10 from flooring to 2
    const auto count = static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 1e-9));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::vector<bool> keep(n, true);
    for (std::size_t i = 0; i < count; ++i) keep[order[i]] = false;
    return keep;
}

std::string_view to_string(PruningSchedulerMode mode) {
    return mode == PruningSchedulerMode::Baseline ? "baseline" : "exponential";
}

PruningSchedulerMode pruning_scheduler_from_string(std::string_view name) {
    if (name == "baseline") return PruningSchedulerMode::Baseline;
    if (name == "exponential") return PruningSchedulerMode::Exponential;
    throw ConfigError("unknown pruning scheduler '" + std::string(name) + "' (expected baseline or exponential)");
}

void PruningScheduleSpec::validate() const {
    if (!(target >= 0.0) || target >= 1.0) throw ConfigError("pruning target rate must be in [0, 1)");
    if (!(init >= 0.0) || init > target) throw ConfigError("pruning initial rate must be in [0, target]");
}

PruningRate pruning_rate_at_epoch(const PruningScheduleSpec& spec, std::size_t epoch) {
    spec.validate();
    if (epoch < spec.warmup_epochs) return {0.0, false};
    if (spec.mode == PruningSchedulerMode::Baseline) return {spec.target, true};
    const std::size_t since = epoch - spec.warmup_epochs;
    if (since >= spec.epochs) return {spec.target, true};
    const double progress = static_cast<double>(since) / static_cast<double>(spec.epochs);
    return {spec.target - (spec.target - spec.init) * std::exp(-5.0 * progress), false};
}

// ---------------------------------------------------------------------------

Tensor FilterMask::apply(const Tensor& x, const RunContext&) {
    if (x.rank() == 0 || x.dim(0) != mask_.numel())
        throw ShapeError("FilterMask: mask of length " + std::to_string(mask_.numel()) + " for tensor " +
                         shape_str(x.shape()));
    const std::size_t inner = x.numel() / x.dim(0);
    std::vector<double> full(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) full[i] = mask_[i / inner];
    if (frozen_) return mul(x, Tensor(x.shape(), std::move(full)));
    for (std::size_t i = 0; i < x.numel(); ++i) full[i] = x[i] * (full[i] - 1.0);
    return add(x, Tensor(x.shape(), std::move(full)));
}

std::vector<bool> FilterMask::keep() const {
    std::vector<bool> k(mask_.numel());
    for (std::size_t i = 0; i < k.size(); ++i) k[i] = mask_[i] != 0.0;
    return k;
}

// ---------------------------------------------------------------------------

namespace {

using Mask = std::vector<bool>;

bool all_kept(const Mask& m) { return std::all_of(m.begin(), m.end(), [](bool b) { return b; }); }

struct Flow {
    std::optional<Mask> mask;
    std::set<std::string> sources;
    std::optional<std::string> token;  // structural mode: identity of the mask
};

// One propagation sweep; returns the convolutions that must be reset.
std::set<std::string> sweep(const ModelGraph& graph, const std::map<std::string, Mask>& masks,
                            const std::set<std::string>& rejected, bool structural,
                            const std::map<std::string, Shape>& shapes, std::map<std::string, Flow>& flows) {
    std::set<std::string> conflict;
    flows.clear();
    flows[std::string(ModelGraph::kInput)] = {};
    for (const auto& n : graph.nodes()) {
        const Flow& in = flows.at(n.inputs[0]);
        Flow out;
        switch (n.kind) {
        case LayerKind::Conv2D:
            if (auto it = masks.find(n.id); it != masks.end() && !rejected.count(n.id)) {
                out.mask = it->second;
                out.sources = {n.id};
                out.token = n.id;
            }
            break;
        case LayerKind::BatchNorm:
        case LayerKind::ReLU:
        case LayerKind::MaxPool2D:
            out = in;
            break;
        case LayerKind::Flatten:
            out = in;
            if (in.mask) {
                const Shape& s = shapes.at(n.inputs[0]);
                const std::size_t spatial = shape_numel(s) / s.at(1);
                Mask expanded;
                for (bool k : *in.mask) expanded.insert(expanded.end(), spatial, k);
                out.mask = std::move(expanded);
            }
            break;
        case LayerKind::FullyConnected:
            break;
        case LayerKind::Add: {
            const Flow& rhs = flows.at(n.inputs[1]);
            const bool same = structural ? (in.token == rhs.token) : (in.mask == rhs.mask);
            if (same) {
                out = in;
                out.sources.insert(rhs.sources.begin(), rhs.sources.end());
            } else {
                conflict.insert(in.sources.begin(), in.sources.end());
                conflict.insert(rhs.sources.begin(), rhs.sources.end());
            }
            break;
        }
        }
        flows[n.id] = std::move(out);
    }
    const Flow& last = flows.at(graph.output());
    if (last.mask) conflict.insert(last.sources.begin(), last.sources.end());
    return conflict;
}

std::map<std::string, Shape> output_shapes(const ModelGraph& graph) {
    std::map<std::string, Shape> shapes;
    for (auto& [id, s] : infer_output_shapes(graph)) shapes[id] = s;
    return shapes;
}

MaskPropagation propagate(const ModelGraph& graph, std::map<std::string, Mask> masks, bool structural) {
    for (auto it = masks.begin(); it != masks.end();) {
        const auto& n = graph.node(it->first);
        if (n.kind != LayerKind::Conv2D) throw GraphError("pruning mask on non-convolution '" + it->first + "'");
        if (it->second.size() != n.as<Conv2dAttrs>().out_channels)
            throw ShapeError("pruning mask for '" + it->first + "' has length " + std::to_string(it->second.size()) +
                             ", expected " + std::to_string(n.as<Conv2dAttrs>().out_channels));
        if (!structural && all_kept(it->second)) it = masks.erase(it);
        else ++it;
    }
    const auto shapes = output_shapes(graph);
    MaskPropagation result;
    std::map<std::string, Flow> flows;
    while (true) {
        auto conflict = sweep(graph, masks, result.rejected, structural, shapes, flows);
        if (conflict.empty()) break;
        result.rejected.insert(conflict.begin(), conflict.end());
    }
    for (const auto& [id, m] : masks)
        if (!result.rejected.count(id)) result.prunable.insert(id);
    for (auto& [id, f] : flows)
        if (f.mask) result.output_masks[id] = *f.mask;
    return result;
}

} // namespace

MaskPropagation propagate_pruning_masks(const ModelGraph& graph, const std::map<std::string, std::vector<bool>>& masks) {
    return propagate(graph, masks, false);
}

std::set<std::string> structurally_prunable(const ModelGraph& graph, const std::vector<std::string>& candidates) {
    std::map<std::string, Mask> masks;
    for (const auto& id : candidates) masks[id] = Mask(graph.node(id).as<Conv2dAttrs>().out_channels, true);
    return propagate(graph, masks, true).prunable;
}

std::vector<std::string> pruning_candidates(const ModelGraph& graph, const std::vector<std::string>& exclude,
                                            bool prune_last) {
    const auto head = prune_last ? std::vector<std::string>{} : head_feeding_convolutions(graph);
    std::vector<std::string> out;
    for (const auto& n : graph.nodes()) {
        if (n.kind != LayerKind::Conv2D) continue;
        if (std::find(head.begin(), head.end(), n.id) != head.end()) continue;
        if (std::any_of(exclude.begin(), exclude.end(), [&](const std::string& p) { return layer_name_matches(n.id, p); }))
            continue;
        out.push_back(n.id);
    }
    return out;
}

std::vector<std::string> following_batchnorms(const ModelGraph& graph, const std::string& conv) {
    std::vector<std::string> out;
    std::deque<std::string> frontier{conv};
    std::set<std::string> seen;
    while (!frontier.empty()) {
        const std::string cur = frontier.front();
        frontier.pop_front();
        for (const auto& c : graph.consumers(cur)) {
            const auto kind = graph.node(c).kind;
            if (kind == LayerKind::BatchNorm && std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
            if ((kind == LayerKind::BatchNorm || kind == LayerKind::ReLU || kind == LayerKind::MaxPool2D ||
                 kind == LayerKind::Add) &&
                seen.insert(c).second)
                frontier.push_back(c);
        }
    }
    return out;
}

namespace {

Tensor slice_vector(const Tensor& t, const Mask& keep) { return slice_weight_channels(t, ChannelAxis::Output, keep); }

void slice_hooks_at(ModelGraph& g, const HookPoint& point, ChannelAxis axis, const Mask& keep) {
    for (auto& h : g.hooks_at(point)) h->slice_channels(axis, keep);
}

std::size_t kept_count(const Mask& m) { return static_cast<std::size_t>(std::count(m.begin(), m.end(), true)); }

} // namespace

ModelGraph strip_pruned_filters(const ModelGraph& graph, const std::map<std::string, std::vector<bool>>& masks) {
    const auto prop = propagate_pruning_masks(graph, masks);
    for (const auto& [id, m] : masks)
        if (!all_kept(m) && !prop.prunable.count(id))
            throw GraphError("convolution '" + id + "' cannot be stripped: downstream layers do not accept its mask");
    ModelGraph g = graph.clone();
    g.remove_hooks([](const Hook& h) { return h.transform->family() == "pruning"; });

    auto mask_of = [&](const std::string& id) -> const Mask* {
        auto it = prop.output_masks.find(id);
        return it == prop.output_masks.end() ? nullptr : &it->second;
    };
    for (auto& n : g.nodes()) {
        const Mask* in = mask_of(n.inputs[0]);
        for (std::size_t i = 0; i < n.inputs.size(); ++i)
            if (const Mask* m = mask_of(n.inputs[i])) slice_hooks_at(g, HookPoint::pre_input(n.id, i), ChannelAxis::Output, *m);
        switch (n.kind) {
        case LayerKind::Conv2D: {
            auto& a = n.as<Conv2dAttrs>();
            if (in) {
                n.param("weight") = slice_weight_channels(n.param("weight"), ChannelAxis::Input, *in);
                slice_hooks_at(g, HookPoint::pre_param(n.id, "weight"), ChannelAxis::Input, *in);
                a.in_channels = kept_count(*in);
            }
            if (const Mask* own = mask_of(n.id)) {
                n.param("weight") = slice_weight_channels(n.param("weight"), ChannelAxis::Output, *own);
                slice_hooks_at(g, HookPoint::pre_param(n.id, "weight"), ChannelAxis::Output, *own);
                if (n.has_param("bias")) {
                    n.param("bias") = slice_vector(n.param("bias"), *own);
                    slice_hooks_at(g, HookPoint::pre_param(n.id, "bias"), ChannelAxis::Output, *own);
                }
                a.out_channels = kept_count(*own);
            }
            break;
        }
        case LayerKind::BatchNorm:
            if (in) {
                for (const char* p : {"gamma", "beta", "running_mean", "running_var"}) {
                    n.param(p) = slice_vector(n.param(p), *in);
                    slice_hooks_at(g, HookPoint::pre_param(n.id, p), ChannelAxis::Output, *in);
                }
                n.as<BatchNormAttrs>().channels = kept_count(*in);
            }
            break;
        case LayerKind::FullyConnected:
            if (in) {
                n.param("weight") = slice_weight_channels(n.param("weight"), ChannelAxis::Input, *in);
                slice_hooks_at(g, HookPoint::pre_param(n.id, "weight"), ChannelAxis::Input, *in);
                n.as<LinearAttrs>().in_features = kept_count(*in);
            }
            break;
        default:
            break;
        }
        if (const Mask* out = mask_of(n.id)) slice_hooks_at(g, HookPoint::post_output(n.id), ChannelAxis::Output, *out);
    }
    return g;
}

} // namespace ck
