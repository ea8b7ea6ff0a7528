#include "ck/quantization.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ck/error.hpp"
#include "ck/ops.hpp"

namespace ck {

std::string_view to_string(QuantMode mode) { return mode == QuantMode::Symmetric ? "symmetric" : "asymmetric"; }

std::string_view to_string(QuantRole role) {
    switch (role) {
    case QuantRole::Weights: return "weights";
    case QuantRole::SignedActivation: return "signed_activation";
    case QuantRole::UnsignedActivation: return "unsigned_activation";
    }
    return "?";
}

QuantMode quant_mode_from_string(std::string_view name) {
    if (name == "symmetric") return QuantMode::Symmetric;
    if (name == "asymmetric") return QuantMode::Asymmetric;
    throw ConfigError("unknown quantization mode '" + std::string(name) + "'");
}

QuantRole quant_role_from_string(std::string_view name) {
    for (auto role : {QuantRole::Weights, QuantRole::SignedActivation, QuantRole::UnsignedActivation})
        if (to_string(role) == name) return role;
    throw ConfigError("unknown quantizer role '" + std::string(name) + "'");
}

QuantRange quant_range_for(int bits, QuantRole role) {
    if (bits < 2) throw ConfigError("quantization bit-width must be >= 2, got " + std::to_string(bits));
    if (bits > 32) throw ConfigError("quantization bit-width must be <= 32, got " + std::to_string(bits));
    const std::int64_t half = std::int64_t{1} << (bits - 1);
    switch (role) {
    case QuantRole::Weights: return {-half + 1, half - 1};
    case QuantRole::SignedActivation: return {-half, half - 1};
    case QuantRole::UnsignedActivation: return {0, (std::int64_t{1} << bits) - 1};
    }
    return {};
}

double round_half_even(double x) {
    // std::nearbyint honours the current rounding mode, which is
    // round-to-nearest-even unless a caller changed it.
    return std::nearbyint(x);
}

TunedRange tune_asymmetric_range(double r_min, double r_max, int bits) {
    if (bits < 2) throw ConfigError("quantization bit-width must be >= 2, got " + std::to_string(bits));
    const double levels = std::ldexp(1.0, bits) - 1.0;
    const double low = std::min(r_min, 0.0);
    const double high = std::max(r_max, 0.0);
    if (high - low <= 0.0) return {0.0, kMinQuantScale, 0};

    const double zp = round_half_even(-low * levels / (high - low));
    // an end-point zero point snaps that end of the range onto 0.0
    if (zp == 0.0) return {0.0, high, 0};
    if (zp == levels) return {low, 0.0, static_cast<std::int64_t>(levels)};
    const double t = (zp - levels) / zp;
    const double high2 = t * low;
    const double low2 = high / t;
    if (high2 - low > high - low2) return {low, high2, static_cast<std::int64_t>(zp)};
    return {low2, high, static_cast<std::int64_t>(zp)};
}

namespace {

struct ChannelLayout {
    std::size_t extent = 1;  // number of channels
    std::size_t inner = 1;   // elements per contiguous channel run

    std::size_t channel(std::size_t i) const { return (i / inner) % extent; }
};

ChannelLayout layout_for(const Tensor& r, std::optional<std::size_t> axis, std::size_t param_count, const char* op) {
    ChannelLayout l;
    if (!axis) {
        if (param_count != 1)
            throw ShapeError(std::string(op) + ": per-tensor quantizer expects 1 range value, got " +
                             std::to_string(param_count));
        l.inner = r.numel();
        return l;
    }
    if (*axis >= r.rank())
        throw ShapeError(std::string(op) + ": channel axis " + std::to_string(*axis) + " out of range for " +
                         shape_str(r.shape()));
    l.extent = r.dim(*axis);
    for (std::size_t d = *axis + 1; d < r.rank(); ++d) l.inner *= r.dim(d);
    if (param_count != l.extent)
        throw ShapeError(std::string(op) + ": " + std::to_string(param_count) + " range values for " +
                         std::to_string(l.extent) + " channels of " + shape_str(r.shape()));
    return l;
}

// Reduces d(out)/d(param) coefficients into per-channel parameter gradients.
Tensor reduce_param_grad(const Tensor& g, const Tensor& coeff, std::optional<std::size_t> axis) {
    Tensor weighted = mul(g, coeff);
    return axis ? reduce_to_axis(weighted, *axis) : sum(weighted);
}

struct SymmetricPass {
    std::vector<double> out, mask, coeff_scale;
};

SymmetricPass symmetric_pass(const Tensor& r, std::span<const double> scale, int bits, QuantRole role,
                             std::optional<std::size_t> axis) {
    const auto range = quant_range_for(bits, role);
    const auto layout = layout_for(r, axis, scale.size(), "fake_quant_symmetric");
    for (double s : scale)
        if (!(s > 0.0)) throw Error("fake_quant_symmetric: scale must be positive, got " + std::to_string(s));
    const double q_min = static_cast<double>(range.q_min), q_max = static_cast<double>(range.q_max);
    SymmetricPass pass;
    pass.out.resize(r.numel());
    pass.mask.resize(r.numel());
    pass.coeff_scale.resize(r.numel());
    for (std::size_t i = 0; i < r.numel(); ++i) {
        const double step = scale[layout.channel(i)] / q_max;
        const double v = r[i] / step;
        const double clamped = std::clamp(v, q_min, q_max);
        const double q = round_half_even(clamped);
        const bool inside = v >= q_min && v <= q_max;
        pass.out[i] = step * q;
        pass.mask[i] = inside ? 1.0 : 0.0;
        // d(out)/d(step) = q - v inside the range, q at a clamp boundary.
        pass.coeff_scale[i] = (q - (inside ? v : 0.0)) / q_max;
    }
    return pass;
}

struct AsymmetricPass {
    std::vector<double> out, mask, coeff_min, coeff_max;
};

AsymmetricPass asymmetric_pass(const Tensor& r, std::span<const double> r_min, std::span<const double> r_max, int bits,
                               std::optional<std::size_t> axis) {
    if (bits < 2) throw ConfigError("quantization bit-width must be >= 2, got " + std::to_string(bits));
    if (r_min.size() != r_max.size()) throw ShapeError("fake_quant_asymmetric: r_min and r_max lengths differ");
    const auto layout = layout_for(r, axis, r_min.size(), "fake_quant_asymmetric");
    const double levels = std::ldexp(1.0, bits) - 1.0;
    std::vector<double> step(r_min.size()), zero(r_min.size());
    for (std::size_t c = 0; c < r_min.size(); ++c) {
        if (!(r_max[c] > r_min[c]))
            throw Error("fake_quant_asymmetric: degenerate range [" + std::to_string(r_min[c]) + ", " +
                        std::to_string(r_max[c]) + "]");
        step[c] = (r_max[c] - r_min[c]) / levels;
        zero[c] = std::clamp(round_half_even(-r_min[c] / step[c]), 0.0, levels);
    }
    AsymmetricPass pass;
    pass.out.resize(r.numel());
    pass.mask.resize(r.numel());
    pass.coeff_min.resize(r.numel());
    pass.coeff_max.resize(r.numel());
    for (std::size_t i = 0; i < r.numel(); ++i) {
        const std::size_t c = layout.channel(i);
        const double clamped = std::clamp(r[i], r_min[c], r_max[c]);
        const double w = clamped / step[c] + zero[c];
        const double q = std::clamp(round_half_even(w), 0.0, levels);
        pass.out[i] = step[c] * (q - zero[c]);
        const bool below = r[i] < r_min[c], above = r[i] > r_max[c];
        pass.mask[i] = (below || above) ? 0.0 : 1.0;
        // out = s*(round(w) - z): d(out) = ds*(round(w) - w) + d(clamped)
        const double ds_term = (q - w) / levels;
        pass.coeff_max[i] = ds_term + (above ? 1.0 : 0.0);
        pass.coeff_min[i] = -ds_term + (below ? 1.0 : 0.0);
    }
    return pass;
}

} // namespace

std::size_t QuantizerParams::channels() const {
    return mode == QuantMode::Symmetric ? scale.numel() : r_min.numel();
}

QuantRange QuantizerParams::range() const {
    if (mode == QuantMode::Symmetric) return quant_range_for(bits, role);
    quant_range_for(bits, role);  // validates bits
    return {0, (std::int64_t{1} << bits) - 1};
}

double QuantizerParams::step(std::size_t c) const {
    if (mode == QuantMode::Symmetric) return scale[c] / static_cast<double>(range().q_max);
    const auto tuned = tune_asymmetric_range(r_min[c], r_max[c], bits);
    return (tuned.r_max - tuned.r_min) / (std::ldexp(1.0, bits) - 1.0);
}

std::int64_t QuantizerParams::zero_point(std::size_t c) const {
    if (mode == QuantMode::Symmetric) return 0;
    return tune_asymmetric_range(r_min[c], r_max[c], bits).zero_point;
}

Tensor fake_quant_symmetric(const Tensor& r, const Tensor& scale, int bits, QuantRole role,
                            std::optional<std::size_t> axis) {
    auto pass = symmetric_pass(r, scale.data(), bits, role, axis);
    Tensor mask(r.shape(), std::move(pass.mask));
    Tensor coeff(r.shape(), std::move(pass.coeff_scale));
    return record_op("fake_quant_symmetric", r.shape(), std::move(pass.out), {r, scale},
                     [mask, coeff, axis](const Tensor& g) {
                         return std::vector<Tensor>{mul(g, mask), reduce_param_grad(g, coeff, axis)};
                     });
}

Tensor fake_quant_symmetric(const Tensor& r, const QuantizerParams& p) {
    return fake_quant_symmetric(r, p.scale, p.bits, p.role, p.per_channel_axis);
}

Tensor fake_quant_asymmetric(const Tensor& r, const Tensor& r_min, const Tensor& r_max, int bits,
                             std::optional<std::size_t> axis) {
    auto pass = asymmetric_pass(r, r_min.data(), r_max.data(), bits, axis);
    Tensor mask(r.shape(), std::move(pass.mask));
    Tensor coeff_min(r.shape(), std::move(pass.coeff_min));
    Tensor coeff_max(r.shape(), std::move(pass.coeff_max));
    return record_op("fake_quant_asymmetric", r.shape(), std::move(pass.out), {r, r_min, r_max},
                     [mask, coeff_min, coeff_max, axis](const Tensor& g) {
                         return std::vector<Tensor>{mul(g, mask), reduce_param_grad(g, coeff_min, axis),
                                                    reduce_param_grad(g, coeff_max, axis)};
                     });
}

Tensor fake_quant_asymmetric(const Tensor& r, const QuantizerParams& p) {
    return fake_quant_asymmetric(r, p.r_min, p.r_max, p.bits, p.per_channel_axis);
}

namespace {

// value + (target - value) as a constant offset: forward equals target,
// gradient flows to `value` unchanged.
Tensor straight_through_replace(const Tensor& value, std::vector<double> target) {
    for (std::size_t i = 0; i < target.size(); ++i) target[i] -= value[i];
    return add(value, Tensor(value.shape(), std::move(target)));
}

} // namespace

Tensor fake_quant(const Tensor& r, const QuantizerParams& p) {
    if (p.mode == QuantMode::Symmetric) {
        std::vector<double> floored(p.scale.values());
        for (auto& s : floored) s = std::max(s, kMinQuantScale);
        return fake_quant_symmetric(r, straight_through_replace(p.scale, std::move(floored)), p.bits, p.role,
                                    p.per_channel_axis);
    }
    std::vector<double> low(p.r_min.numel()), high(p.r_max.numel());
    for (std::size_t c = 0; c < low.size(); ++c) {
        const auto tuned = tune_asymmetric_range(p.r_min[c], p.r_max[c], p.bits);
        low[c] = tuned.r_min;
        high[c] = tuned.r_max;
    }
    return fake_quant_asymmetric(r, straight_through_replace(p.r_min, std::move(low)),
                                 straight_through_replace(p.r_max, std::move(high)), p.bits, p.per_channel_axis);
}

FakeQuantGrads fake_quant_backward(std::span<const double> upstream, const Tensor& r, const QuantizerParams& p) {
    if (upstream.size() != r.numel()) throw ShapeError("fake_quant_backward: upstream length does not match input");
    FakeQuantGrads grads;
    grads.grad_r.resize(r.numel());
    const auto layout = layout_for(r, p.per_channel_axis, p.channels(), "fake_quant_backward");
    if (p.mode == QuantMode::Symmetric) {
        const auto pass = symmetric_pass(r, p.scale.data(), p.bits, p.role, p.per_channel_axis);
        grads.grad_scale.assign(p.channels(), 0.0);
        for (std::size_t i = 0; i < r.numel(); ++i) {
            grads.grad_r[i] = upstream[i] * pass.mask[i];
            grads.grad_scale[layout.channel(i)] += upstream[i] * pass.coeff_scale[i];
        }
    } else {
        const auto pass = asymmetric_pass(r, p.r_min.data(), p.r_max.data(), p.bits, p.per_channel_axis);
        grads.grad_r_min.assign(p.channels(), 0.0);
        grads.grad_r_max.assign(p.channels(), 0.0);
        for (std::size_t i = 0; i < r.numel(); ++i) {
            grads.grad_r[i] = upstream[i] * pass.mask[i];
            grads.grad_r_min[layout.channel(i)] += upstream[i] * pass.coeff_min[i];
            grads.grad_r_max[layout.channel(i)] += upstream[i] * pass.coeff_max[i];
        }
    }
    return grads;
}

// ---------------------------------------------------------------------------

FakeQuantize::FakeQuantize(QuantizerParams params) : params_(std::move(params)) {
    quant_range_for(params_.bits, params_.role);
    if (params_.mode == QuantMode::Symmetric) {
        if (!params_.scale.defined()) params_.scale = Tensor::ones({1});
        params_.scale.set_requires_grad(true);
    } else {
        if (!params_.r_min.defined()) params_.r_min = Tensor::scalar(-1.0);
        if (!params_.r_max.defined()) params_.r_max = Tensor::scalar(1.0);
        if (params_.r_min.shape() != params_.r_max.shape()) throw ShapeError("FakeQuantize: r_min/r_max shapes differ");
        params_.r_min.set_requires_grad(true);
        params_.r_max.set_requires_grad(true);
    }
}

Tensor FakeQuantize::apply(const Tensor& x, const RunContext&) {
    if (collecting_) {
        observe(x);
        return x;
    }
    if (!enabled_) return x;
    return fake_quant(x, params_);
}

std::vector<Tensor> FakeQuantize::trainable() const {
    if (params_.mode == QuantMode::Symmetric) return {params_.scale};
    return {params_.r_min, params_.r_max};
}

std::vector<NamedTensor> FakeQuantize::tensors() const {
    if (params_.mode == QuantMode::Symmetric) return {{"scale", params_.scale}};
    return {{"r_min", params_.r_min}, {"r_max", params_.r_max}};
}

nlohmann::json FakeQuantize::attrs() const {
    nlohmann::json j = {{"mode", std::string(to_string(params_.mode))},
                        {"bits", params_.bits},
                        {"role", std::string(to_string(params_.role))},
                        {"enabled", enabled_}};
    j["per_channel_axis"] = params_.per_channel_axis ? nlohmann::json(*params_.per_channel_axis) : nlohmann::json();
    std::vector<std::int64_t> zero_points;
    for (std::size_t c = 0; c < params_.channels(); ++c) zero_points.push_back(params_.zero_point(c));
    j["zero_point"] = zero_points;
    return j;
}

TransformPtr FakeQuantize::clone() const {
    QuantizerParams copy = params_;
    if (copy.scale.defined()) copy.scale = copy.scale.clone();
    if (copy.r_min.defined()) copy.r_min = copy.r_min.clone();
    if (copy.r_max.defined()) copy.r_max = copy.r_max.clone();
    auto out = std::make_shared<FakeQuantize>(std::move(copy));
    out->enabled_ = enabled_;
    return out;
}

namespace {

Tensor slice_vector(const Tensor& t, const std::vector<bool>& keep) {
    std::vector<double> kept;
    for (std::size_t i = 0; i < keep.size(); ++i)
        if (keep[i]) kept.push_back(t[i]);
    const Shape shape{kept.size()};
    Tensor out(shape, std::move(kept));
    out.set_requires_grad(t.requires_grad());
    return out;
}

} // namespace

void FakeQuantize::slice_channels(ChannelAxis axis, const std::vector<bool>& keep) {
    if (!params_.per_channel_axis || axis != ChannelAxis::Output || *params_.per_channel_axis != 0) return;
    if (keep.size() != params_.channels())
        throw ShapeError("FakeQuantize: channel mask of length " + std::to_string(keep.size()) + " for " +
                         std::to_string(params_.channels()) + " channels");
    if (params_.mode == QuantMode::Symmetric) {
        params_.scale = slice_vector(params_.scale, keep);
    } else {
        params_.r_min = slice_vector(params_.r_min, keep);
        params_.r_max = slice_vector(params_.r_max, keep);
    }
}

void FakeQuantize::begin_collecting(std::optional<double> percentile) {
    collecting_ = true;
    percentile_ = percentile;
    observed_.assign(params_.channels(), {});
}

void FakeQuantize::observe(const Tensor& x) {
    const auto layout = layout_for(x, params_.per_channel_axis, params_.channels(), "FakeQuantize");
    for (std::size_t i = 0; i < x.numel(); ++i) observed_[layout.channel(i)].push_back(x[i]);
}

void FakeQuantize::finish_collecting() {
    collecting_ = false;
    for (const auto& channel : observed_)
        if (channel.empty()) throw ConfigError("range initialization observed no values");
    set_range_from(observed_, percentile_);
    observed_.clear();
}

void FakeQuantize::init_from(const Tensor& values, std::optional<double> percentile) {
    std::vector<std::vector<double>> samples(params_.channels());
    const auto layout = layout_for(values, params_.per_channel_axis, params_.channels(), "FakeQuantize");
    for (std::size_t i = 0; i < values.numel(); ++i) samples[layout.channel(i)].push_back(values[i]);
    set_range_from(samples, percentile);
}

namespace {

// p-th percentile (0..100) by nearest rank on a copy.
double percentile_of(std::vector<double> values, double p) {
    const double rank = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
    const auto k = static_cast<std::size_t>(std::llround(rank));
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end());
    return values[k];
}

} // namespace

void FakeQuantize::set_range_from(const std::vector<std::vector<double>>& samples, std::optional<double> percentile) {
    const std::size_t channels = samples.size();
    if (params_.mode == QuantMode::Symmetric) {
        std::vector<double> scale(channels);
        for (std::size_t c = 0; c < channels; ++c) {
            double m = 0.0;
            if (percentile) {
                std::vector<double> mags(samples[c].size());
                std::transform(samples[c].begin(), samples[c].end(), mags.begin(), [](double v) { return std::fabs(v); });
                m = percentile_of(std::move(mags), *percentile);
            } else {
                for (double v : samples[c]) m = std::max(m, std::fabs(v));
            }
            scale[c] = std::max(m, kMinQuantScale);
        }
        std::copy(scale.begin(), scale.end(), params_.scale.data().begin());
        return;
    }
    for (std::size_t c = 0; c < channels; ++c) {
        double lo, hi;
        if (percentile) {
            lo = percentile_of(samples[c], 100.0 - *percentile);
            hi = percentile_of(samples[c], *percentile);
        } else {
            const auto [mn, mx] = std::minmax_element(samples[c].begin(), samples[c].end());
            lo = *mn;
            hi = *mx;
        }
        const auto tuned = tune_asymmetric_range(lo, hi, params_.bits);
        params_.r_min[c] = tuned.r_min;
        params_.r_max[c] = tuned.r_max;
    }
}

// ---------------------------------------------------------------------------

namespace {

bool sole_consumer_is(const ModelGraph& graph, const std::string& id, LayerKind kind, std::string* consumer = nullptr) {
    const auto consumers = graph.consumers(id);
    if (consumers.size() != 1 || graph.output() == id) return false;
    if (graph.node(consumers[0]).kind != kind) return false;
    if (consumer) *consumer = consumers[0];
    return true;
}

std::shared_ptr<FakeQuantize> make_quantizer(const QuantizationSettings& s, QuantRole role, std::size_t channels,
                                             std::optional<std::size_t> axis) {
    QuantizerParams p;
    p.mode = s.mode;
    p.bits = s.bits;
    p.role = role;
    p.per_channel_axis = axis;
    if (s.mode == QuantMode::Symmetric) {
        p.scale = Tensor::ones({channels});
    } else {
        p.r_min = Tensor({channels}, -1.0);
        p.r_max = Tensor({channels}, 1.0);
    }
    return std::make_shared<FakeQuantize>(std::move(p));
}

} // namespace

std::vector<InsertedQuantizer> insert_quantizers(ModelGraph& graph, const QuantizationSettings& settings) {
    std::vector<InsertedQuantizer> inserted;
    // Interior nodes of fusion patterns produce no separately quantized output.
    std::vector<std::string> fused;
    for (const auto& n : graph.nodes()) {
        if (n.kind != LayerKind::Conv2D) continue;
        std::string next, last;
        if (sole_consumer_is(graph, n.id, LayerKind::ReLU)) {
            fused.push_back(n.id);
        } else if (sole_consumer_is(graph, n.id, LayerKind::BatchNorm, &next) &&
                   sole_consumer_is(graph, next, LayerKind::ReLU, &last)) {
            fused.push_back(n.id);
            fused.push_back(next);
        }
    }

    const std::string input(ModelGraph::kInput);
    auto input_q = make_quantizer(settings, QuantRole::SignedActivation, 1, std::nullopt);
    graph.insert_hook(HookPoint::post_output(input), input_q);
    inserted.push_back({HookPoint::post_output(input), input, false, input_q});

    for (const auto& n : graph.nodes()) {
        if (n.kind == LayerKind::Conv2D || n.kind == LayerKind::FullyConnected) {
            const std::size_t out = n.param("weight").dim(0);
            auto q = settings.per_channel ? make_quantizer(settings, QuantRole::Weights, out, 0)
                                          : make_quantizer(settings, QuantRole::Weights, 1, std::nullopt);
            auto point = HookPoint::pre_param(n.id, "weight");
            graph.insert_hook(point, q);
            inserted.push_back({point, n.id, true, q});
        }
        if (n.kind == LayerKind::MaxPool2D || n.kind == LayerKind::Flatten) continue;
        if (std::find(fused.begin(), fused.end(), n.id) != fused.end()) continue;
        const QuantRole role = n.kind == LayerKind::ReLU ? QuantRole::UnsignedActivation : QuantRole::SignedActivation;
        auto q = make_quantizer(settings, role, 1, std::nullopt);
        auto point = HookPoint::post_output(n.id);
        graph.insert_hook(point, q);
        inserted.push_back({point, n.id, false, q});
    }
    return inserted;
}

void initialize_quantizer_ranges(ModelGraph& graph, const std::vector<InsertedQuantizer>& quantizers,
                                 const std::vector<Tensor>& batches, const RangeInitOptions& options) {
    if (batches.empty() || options.num_batches == 0)
        throw ConfigError("quantizer range initialization needs at least one data batch");
    for (const auto& q : quantizers) {
        if (q.is_weight) q.quantizer->init_from(graph.node(q.point.node).param(q.point.param), options.percentile);
    }
    bool any_activation = false;
    for (const auto& q : quantizers)
        if (!q.is_weight) {
            q.quantizer->begin_collecting(options.percentile);
            any_activation = true;
        }
    if (!any_activation) return;
    {
        NoGradGuard no_grad;
        const std::size_t n = std::min(options.num_batches, batches.size());
        for (std::size_t i = 0; i < n; ++i) run_graph(graph, batches[i], RunMode::Eval);
    }
    for (const auto& q : quantizers)
        if (!q.is_weight) q.quantizer->finish_collecting();
}

} // namespace ck
