#include "ck/binarization.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <cmath>
#include <deque>
#include <set>

#include <spdlog/spdlog.h>

#include "ck/error.hpp"
#include "ck/ops.hpp"

namespace ck {

std::string_view to_string(WeightBinarization scheme) { return scheme == WeightBinarization::XNOR ? "xnor" : "dorefa"; }

WeightBinarization weight_binarization_from_string(std::string_view name) {
    if (name == "xnor") return WeightBinarization::XNOR;
    if (name == "dorefa") return WeightBinarization::DoReFa;
    throw ConfigError("unknown weight binarization scheme '" + std::string(name) + "' (expected xnor or dorefa)");
}

namespace {

void expect_conv_weight(const Tensor& w) {
    if (w.rank() != 4) throw ShapeError("binarize_weights: expected a 4-D convolution weight, got " + shape_str(w.shape()));
}

double sign_of(double v) { return v >= 0.0 ? 1.0 : -1.0; }

} // namespace

Tensor binarize_weights(const Tensor& w, WeightBinarization scheme) {
    expect_conv_weight(w);
    Tensor sign = ste_apply(w, sign_of);
    if (scheme == WeightBinarization::DoReFa) return mul(expand(mean(abs(w)), w.shape()), sign);
    const double group = static_cast<double>(w.numel() / w.dim(1));
    Tensor alpha = scale(reduce_to_axis(abs(w), 1), 1.0 / group);
    return mul(broadcast_axis(alpha, w.shape(), 1), sign);
}

std::vector<double> binarization_scales(const Tensor& w, WeightBinarization scheme) {
    expect_conv_weight(w);
    if (scheme == WeightBinarization::DoReFa) {
        double total = 0.0;
        for (double v : w.data()) total += std::fabs(v);
        return {total / static_cast<double>(w.numel())};
    }
    const std::size_t in = w.dim(1), inner = w.dim(2) * w.dim(3);
    std::vector<double> alpha(in, 0.0);
    for (std::size_t i = 0; i < w.numel(); ++i) alpha[(i / inner) % in] += std::fabs(w[i]);
    for (auto& a : alpha) a /= static_cast<double>(w.numel() / in);
    return alpha;
}

Tensor binarize_activations(const Tensor& in, const Tensor& s, const Tensor& t) {
    if (in.rank() < 2) throw ShapeError("binarize_activations: input needs a channel axis, got " + shape_str(in.shape()));
    if (s.numel() != 1) throw ShapeError("binarize_activations: scale must have one element");
    if (t.numel() != in.dim(1))
        throw ShapeError("binarize_activations: " + std::to_string(t.numel()) + " thresholds for " +
                         std::to_string(in.dim(1)) + " channels");
    if (!(s[0] > 0.0)) throw Error("binarize_activations: scale must be positive");
    Tensor s_full = expand(s, in.shape());
    Tensor shifted = sub(in, mul(s_full, broadcast_axis(t, in.shape(), 1)));
    Tensor step = ste_apply(shifted, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
    return mul(s_full, step);
}

BinarizationStage binarization_stage_at(std::size_t epoch, const std::array<int, 4>& stage_epochs) {
    for (int d : stage_epochs)
        if (d < 0) throw ConfigError("binarization stage durations must be nonnegative");
    BinarizationStage s;
    std::size_t start = 0;
    for (int k = 0; k < 3; ++k) {
        const std::size_t end = start + static_cast<std::size_t>(stage_epochs[k]);
        if (epoch < end) {
            s.stage = k + 1;
            s.activations = k >= 1;
            s.weights = k >= 2;
            return s;
        }
        start = end;
    }
    s.stage = 4;
    s.activations = s.weights = true;
    s.weight_decay = false;
    const double length = stage_epochs[3];
    const double progress = length > 0 ? std::min(1.0, static_cast<double>(epoch - start) / length) : 1.0;
    s.lr_factor = (1.0 - progress) * (1.0 - progress);
    return s;
}

// ---------------------------------------------------------------------------

Tensor WeightBinarize::apply(const Tensor& x, const RunContext&) {
    return enabled_ ? binarize_weights(x, scheme_) : x;
}

nlohmann::json WeightBinarize::attrs() const {
    return {{"scheme", std::string(to_string(scheme_))}, {"enabled", enabled_}};
}

TransformPtr WeightBinarize::clone() const {
    auto out = std::make_shared<WeightBinarize>(scheme_);
    out->enabled_ = enabled_;
    return out;
}

ActivationBinarize::ActivationBinarize(Tensor scale, Tensor thresholds)
    : scale_(std::move(scale)), thresholds_(std::move(thresholds)) {
    if (scale_.numel() != 1) throw ShapeError("ActivationBinarize: scale must have one element");
    scale_.set_requires_grad(true);
    thresholds_.set_requires_grad(true);
}

Tensor ActivationBinarize::apply(const Tensor& x, const RunContext&) {
    if (calibrating_) {
        init_from(x);
        calibrating_ = false;
        return x;
    }
    return enabled_ ? binarize_activations(x, scale_, thresholds_) : x;
}

nlohmann::json ActivationBinarize::attrs() const { return {{"enabled", enabled_}}; }

TransformPtr ActivationBinarize::clone() const {
    auto out = std::make_shared<ActivationBinarize>(scale_.clone(), thresholds_.clone());
    out->enabled_ = enabled_;
    return out;
}

void ActivationBinarize::slice_channels(ChannelAxis axis, const std::vector<bool>& keep) {
    if (axis != ChannelAxis::Output) return;
    if (keep.size() != thresholds_.numel())
        throw ShapeError("ActivationBinarize: channel mask length " + std::to_string(keep.size()) + " for " +
                         std::to_string(thresholds_.numel()) + " thresholds");
    std::vector<double> kept;
    for (std::size_t c = 0; c < keep.size(); ++c)
        if (keep[c]) kept.push_back(thresholds_[c]);
    const Shape shape{kept.size()};
    thresholds_ = Tensor(shape, std::move(kept));
    thresholds_.set_requires_grad(true);
}

void ActivationBinarize::init_from(const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) total += std::fabs(v);
    const double m = x.numel() ? total / static_cast<double>(x.numel()) : 0.0;
    scale_[0] = m > 0.0 ? 2.0 * m : 1.0;
    for (auto& t : thresholds_.data()) t = 0.5;
}

// ---------------------------------------------------------------------------

bool layer_name_matches(const std::string& name, const std::string& pattern) {
    return fnmatch(pattern.c_str(), name.c_str(), 0) == 0;
}

std::vector<std::string> head_feeding_convolutions(const ModelGraph& graph) {
    std::vector<std::string> out;
    for (const auto& n : graph.nodes()) {
        if (n.kind != LayerKind::Conv2D) continue;
        std::deque<std::string> frontier{n.id};
        std::set<std::string> seen;
        bool feeds_head = false;
        while (!frontier.empty() && !feeds_head) {
            const std::string cur = frontier.front();
            frontier.pop_front();
            for (const auto& c : graph.consumers(cur)) {
                const auto kind = graph.node(c).kind;
                if (kind == LayerKind::FullyConnected) feeds_head = true;
                else if (kind != LayerKind::Conv2D && seen.insert(c).second) frontier.push_back(c);
            }
        }
        if (feeds_head) out.push_back(n.id);
    }
    return out;
}

std::vector<std::string> default_binarization_denylist(const ModelGraph& graph) {
    std::vector<std::string> deny;
    for (const auto& n : graph.nodes())
        if (n.kind == LayerKind::Conv2D) {
            deny.push_back(n.id);
            break;
        }
    for (auto& id : head_feeding_convolutions(graph))
        if (std::find(deny.begin(), deny.end(), id) == deny.end()) deny.push_back(id);
    return deny;
}

std::vector<BinarizedLayer> apply_binarization(ModelGraph& graph, const BinarizationSettings& settings) {
    std::vector<std::string> convs;
    for (const auto& n : graph.nodes())
        if (n.kind == LayerKind::Conv2D) convs.push_back(n.id);

    auto matches_any = [](const std::string& id, const std::vector<std::string>& patterns) {
        return std::any_of(patterns.begin(), patterns.end(),
                           [&](const std::string& p) { return layer_name_matches(id, p); });
    };
    auto warn_unmatched = [&](const std::vector<std::string>& patterns, const char* list) {
        for (const auto& p : patterns)
            if (std::none_of(convs.begin(), convs.end(), [&](const std::string& id) { return layer_name_matches(id, p); }))
                spdlog::warn("binarization {} pattern '{}' matches no convolution", list, p);
    };
    if (settings.allowlist) warn_unmatched(*settings.allowlist, "allowlist");
    if (settings.denylist) warn_unmatched(*settings.denylist, "denylist");
    const auto deny = settings.denylist ? *settings.denylist : default_binarization_denylist(graph);

    std::vector<BinarizedLayer> out;
    for (const auto& id : convs) {
        if (settings.allowlist && !matches_any(id, *settings.allowlist)) continue;
        if (matches_any(id, deny)) continue;
        const std::size_t channels = graph.node(id).as<Conv2dAttrs>().in_channels;
        auto w = std::make_shared<WeightBinarize>(settings.scheme);
        auto a = std::make_shared<ActivationBinarize>(Tensor::ones({1}), Tensor({channels}, 0.5));
        graph.insert_hook(HookPoint::pre_param(id, "weight"), w);
        graph.insert_hook(HookPoint::pre_input(id, 0), a);
        out.push_back({id, w, a});
    }
    return out;
}

} // namespace ck
