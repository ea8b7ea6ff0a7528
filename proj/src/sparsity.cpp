#include "ck/sparsity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ck/error.hpp"
#include "ck/ops.hpp"

namespace ck {

MagnitudeMasks magnitude_threshold(const std::vector<Tensor>& weights, double level) {
    if (!(level >= 0.0) || level >= 1.0)
        throw ConfigError("sparsity level must be in [0, 1), got " + std::to_string(level));
    struct Entry {
        double importance;
        std::size_t layer, index;
    };
    std::vector<Entry> entries;
    MagnitudeMasks result;
    for (std::size_t l = 0; l < weights.size(); ++l) {
        double norm2 = 0.0;
        for (double v : weights[l].data()) norm2 += v * v;
        const double norm = std::sqrt(norm2);
        for (std::size_t i = 0; i < weights[l].numel(); ++i)
            entries.push_back({norm > 0.0 ? std::fabs(weights[l][i]) / norm : 0.0, l, i});
        result.masks.emplace_back(weights[l].numel(), 1.0);
    }
    const auto k = static_cast<std::size_t>(std::llround(level * static_cast<double>(entries.size())));
    // entries are already in (layer, index) order, so a stable sort keeps ties earliest-first
    std::stable_sort(entries.begin(), entries.end(),
                     [](const Entry& a, const Entry& b) { return a.importance < b.importance; });
    for (std::size_t j = 0; j < k; ++j) result.masks[entries[j].layer][entries[j].index] = 0.0;
    result.threshold = k > 0 ? entries[k - 1].importance : 0.0;
    return result;
}

std::string_view to_string(ScheduleMode mode) {
    switch (mode) {
    case ScheduleMode::Polynomial: return "polynomial";
    case ScheduleMode::Exponential: return "exponential";
    case ScheduleMode::Adaptive: return "adaptive";
    case ScheduleMode::Multistep: return "multistep";
    }
    return "?";
}

ScheduleMode schedule_mode_from_string(std::string_view name) {
    for (auto m : {ScheduleMode::Polynomial, ScheduleMode::Exponential, ScheduleMode::Adaptive, ScheduleMode::Multistep})
        if (to_string(m) == name) return m;
    throw ConfigError("unknown sparsity schedule mode '" + std::string(name) + "'");
}

void SparsityScheduleSpec::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("sparsity schedule: " + what); };
    if (!(init >= 0.0 && init < 1.0)) fail("init must be in [0, 1)");
    if (!(target >= 0.0 && target < 1.0)) fail("target must be in [0, 1)");
    if (init > target) fail("init must not exceed target");
    if (mode == ScheduleMode::Multistep) {
        if (steps.empty()) fail("multistep mode needs at least one step");
        double prev = init;
        for (std::size_t i = 0; i < steps.size(); ++i) {
            if (i > 0 && steps[i].first <= steps[i - 1].first) fail("multistep epochs must increase");
            if (steps[i].second < prev || steps[i].second > target) fail("multistep levels must rise towards target");
            prev = steps[i].second;
        }
        return;
    }
    if (epochs == 0 && init != target) fail("epochs = 0 requires init == target");
    if (mode == ScheduleMode::Polynomial && !(power > 0.0)) fail("power must be positive");
    if (mode == ScheduleMode::Adaptive) {
        if (patience == 0) fail("patience must be at least 1");
        if (!(step > 0.0)) fail("step must be positive");
        if (min_delta < 0.0) fail("min_delta must be nonnegative");
    }
}

double sparsity_level_at_epoch(const SparsityScheduleSpec& spec, std::size_t epoch, std::span<const double> metrics) {
    spec.validate();
    if (spec.mode == ScheduleMode::Multistep) {
        double level = spec.init;
        for (const auto& [e, l] : spec.steps)
            if (e <= epoch) level = l;
        return level;
    }
    if (epoch >= spec.epochs) return spec.target;
    const double progress = static_cast<double>(epoch) / static_cast<double>(spec.epochs);
    switch (spec.mode) {
    case ScheduleMode::Polynomial:
        return spec.init + (spec.target - spec.init) * std::pow(progress, spec.power);
    case ScheduleMode::Exponential:
        return spec.init + (spec.target - spec.init) * -std::expm1(-5.0 * progress);
    case ScheduleMode::Adaptive: {
        double level = spec.init;
        double best = std::numeric_limits<double>::infinity();
        std::size_t stalled = 0;
        for (std::size_t i = 0; i < std::min(epoch, metrics.size()); ++i) {
            if (best - metrics[i] < spec.min_delta) ++stalled;
            else stalled = 0;
            best = std::min(best, metrics[i]);
            if (stalled >= spec.patience) {
                level = std::min(level + spec.step, spec.target);
                stalled = 0;
            }
        }
        return level;
    }
    default:
        break;
    }
    return spec.target;
}

std::vector<double> sample_gates(std::span<const double> scores, Rng& rng) {
    std::vector<double> z(scores.size());
    for (std::size_t j = 0; j < scores.size(); ++j) {
        const double u = rng.uniform();
        z[j] = scores[j] + std::log(u / (1.0 - u)) > 0.0 ? 1.0 : 0.0;
    }
    return z;
}

Tensor rb_regularizer_loss(const std::vector<Tensor>& scores, double level) {
    if (scores.empty()) return Tensor::scalar(0.0);
    Tensor total;
    std::size_t count = 0;
    for (const auto& s : scores) {
        Tensor part = sum(sigmoid(s));
        total = total.defined() ? add(total, part) : part;
        count += s.numel();
    }
    if (count == 0) throw ShapeError("rb_regularizer_loss: no scores");
    Tensor gap = add_scalar(scale(total, 1.0 / static_cast<double>(count)), -(1.0 - level));
    return mul(gap, gap);
}

std::vector<double> rb_eval_mask(std::span<const double> scores) {
    std::vector<double> mask(scores.size());
    for (std::size_t j = 0; j < scores.size(); ++j) mask[j] = scores[j] > 0.0 ? 1.0 : 0.0;
    return mask;
}

Tensor slice_weight_channels(const Tensor& t, ChannelAxis axis, const std::vector<bool>& keep) {
    const std::size_t ax = axis == ChannelAxis::Output ? 0 : 1;
    if (ax >= t.rank()) throw ShapeError("slice_weight_channels: no axis " + std::to_string(ax) + " in " + shape_str(t.shape()));
    if (keep.size() != t.dim(ax))
        throw ShapeError("slice_weight_channels: mask length " + std::to_string(keep.size()) + " for axis of size " +
                         std::to_string(t.dim(ax)));
    std::size_t inner = 1;
    for (std::size_t d = ax + 1; d < t.rank(); ++d) inner *= t.dim(d);
    std::vector<double> out;
    for (std::size_t i = 0; i < t.numel(); ++i)
        if (keep[(i / inner) % keep.size()]) out.push_back(t[i]);
    Shape shape = t.shape();
    shape[ax] = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
    Tensor result(shape, std::move(out));
    result.set_requires_grad(t.requires_grad());
    return result;
}

std::vector<std::string> sparsifiable_layers(const ModelGraph& graph) {
    std::vector<std::string> out;
    for (const auto& n : graph.nodes())
        if (n.kind == LayerKind::Conv2D || n.kind == LayerKind::FullyConnected) out.push_back(n.id);
    return out;
}

// ---------------------------------------------------------------------------

Tensor BinaryMask::apply(const Tensor& x, const RunContext&) {
    if (x.shape() != mask_.shape())
        throw ShapeError("BinaryMask: mask " + shape_str(mask_.shape()) + " does not match " + shape_str(x.shape()));
    return mul(x, mask_);
}

void BinaryMask::slice_channels(ChannelAxis axis, const std::vector<bool>& keep) {
    mask_ = slice_weight_channels(mask_, axis, keep);
}

RBGate::RBGate(Tensor scores) : scores_(std::move(scores)) { scores_.set_requires_grad(true); }

Tensor RBGate::apply(const Tensor& x, const RunContext& ctx) {
    if (x.shape() != scores_.shape())
        throw ShapeError("RBGate: scores " + shape_str(scores_.shape()) + " do not match " + shape_str(x.shape()));
    if (ctx.mode == RunMode::Eval) return mul(x, Tensor(x.shape(), rb_eval_mask(scores_.data())));
    if (!ctx.rng) throw Error("RBGate: train mode needs a random generator");
    std::vector<double> noise(scores_.numel());
    for (auto& v : noise) {
        const double u = ctx.rng->uniform();
        v = std::log(u / (1.0 - u));
    }
    Tensor p = sigmoid(add(scores_, Tensor(scores_.shape(), std::move(noise))));
    Tensor z = ste_apply(p, [](double v) { return v > 0.5 ? 1.0 : 0.0; });
    return mul(x, z);
}

void RBGate::slice_channels(ChannelAxis axis, const std::vector<bool>& keep) {
    scores_ = slice_weight_channels(scores_, axis, keep);
}

} // namespace ck
