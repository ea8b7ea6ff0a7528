#include "ck/mixed_precision.hpp"

#include <algorithm>
#include <numeric>
#include <optional>

#include "ck/error.hpp"
#include "ck/ops.hpp"
#include "ck/rng.hpp"

namespace ck {

double estimate_hessian_trace(const std::function<Tensor()>& loss_fn, std::span<const Tensor> params,
                              std::size_t n_samples, std::uint64_t seed) {
    if (n_samples < 1) throw ConfigError("Hessian trace estimation needs at least one sample");
    Tensor loss = loss_fn();
    const std::vector<Tensor> g = grad(loss, params, /*create_graph=*/true);
    Rng rng(seed);
    double total = 0.0;
    for (std::size_t k = 0; k < n_samples; ++k) {
        std::vector<Tensor> probes;
        probes.reserve(params.size());
        Tensor gv;
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor v(params[i].shape());
            for (auto& x : v.data()) x = rng.rademacher();
            Tensor term = sum(mul(g[i], v));
            gv = gv.defined() ? add(gv, term) : term;
            probes.push_back(std::move(v));
        }
        if (!gv.defined()) return 0.0;
        const std::vector<Tensor> hv = grad(gv, params);
        for (std::size_t i = 0; i < params.size(); ++i)
            for (std::size_t j = 0; j < hv[i].numel(); ++j) total += probes[i][j] * hv[i][j];
    }
    return total / static_cast<double>(n_samples);
}

QuantizerParams weight_quantizer_for(const Tensor& weight, const QuantizationSettings& settings, int bits) {
    QuantizerParams p;
    p.mode = settings.mode;
    p.bits = bits;
    p.role = QuantRole::Weights;
    const std::size_t channels = settings.per_channel ? weight.dim(0) : 1;
    if (settings.per_channel) p.per_channel_axis = 0;
    if (settings.mode == QuantMode::Symmetric) {
        p.scale = Tensor::ones({channels});
    } else {
        p.r_min = Tensor({channels}, -1.0);
        p.r_max = Tensor({channels}, 1.0);
    }
    FakeQuantize q(std::move(p));
    q.init_from(weight);
    return q.params();
}

double quantization_perturbation(const Tensor& weight, const QuantizerParams& q) {
    NoGradGuard no_grad;
    const Tensor quantized = fake_quant(weight.detach(), q);
    double total = 0.0;
    for (std::size_t i = 0; i < weight.numel(); ++i) {
        const double d = quantized[i] - weight[i];
        total += d * d;
    }
    return total;
}

double layer_sensitivity(double avg_trace, const Tensor& weight, const QuantizerParams& q) {
    return avg_trace * quantization_perturbation(weight, q);
}

RatioDirection ratio_direction_from_string(std::string_view name) {
    if (name == "at_least") return RatioDirection::AtLeast;
    if (name == "at_most") return RatioDirection::AtMost;
    throw ConfigError("unknown ratio direction '" + std::string(name) + "' (expected at_least or at_most)");
}

std::string_view to_string(RatioDirection direction) {
    return direction == RatioDirection::AtLeast ? "at_least" : "at_most";
}

double compression_ratio(std::span<const double> flops, std::span<const int> bits) {
    double reference = 0.0, mixed = 0.0;
    for (std::size_t i = 0; i < flops.size(); ++i) {
        reference += flops[i] * 8.0;
        mixed += flops[i] * bits[i];
    }
    return mixed > 0.0 ? reference / mixed : 1.0;
}

void for_each_monotone_config(std::span<const double> traces, std::span<const int> candidate_bits,
                              const std::function<void(const std::vector<int>&)>& visit) {
    std::vector<std::size_t> order(traces.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return traces[a] < traces[b]; });
    std::vector<int> bits(traces.size(), 0);
    std::vector<int> sorted_candidates(candidate_bits.begin(), candidate_bits.end());
    std::sort(sorted_candidates.begin(), sorted_candidates.end());

    // floor: max bits over layers with strictly smaller trace;
    // group_max: max bits inside the current equal-trace group.
    std::function<void(std::size_t, int, int)> recurse = [&](std::size_t pos, int floor, int group_max) {
        if (pos == order.size()) {
            visit(bits);
            return;
        }
        const std::size_t layer = order[pos];
        if (pos > 0 && traces[layer] != traces[order[pos - 1]]) {
            floor = std::max(floor, group_max);
            group_max = 0;
        }
        for (int b : sorted_candidates) {
            if (b < floor) continue;
            bits[layer] = b;
            recurse(pos + 1, floor, std::max(group_max, b));
        }
    };
    recurse(0, 0, 0);
}

MixedPrecisionPlan select_bitwidth_config(const std::vector<BitwidthSearchLayer>& layers,
                                          const MixedPrecisionOptions& options) {
    if (layers.empty()) throw ConfigError("mixed precision search needs at least one layer");
    if (options.candidate_bits.empty()) throw ConfigError("mixed precision candidate bit set is empty");
    for (int b : options.candidate_bits) {
        quant_range_for(b, QuantRole::Weights);
        for (const auto& l : layers)
            if (!l.perturbation.count(b))
                throw ConfigError("layer '" + l.name + "' has no perturbation for " + std::to_string(b) + " bits");
    }
    std::vector<double> traces, flops;
    for (const auto& l : layers) {
        traces.push_back(l.avg_trace);
        flops.push_back(l.flops);
    }

    std::optional<MixedPrecisionPlan> best;
    for_each_monotone_config(traces, options.candidate_bits, [&](const std::vector<int>& bits) {
        const double ratio = compression_ratio(flops, bits);
        const bool feasible = options.direction == RatioDirection::AtLeast ? ratio >= options.ratio_threshold
                                                                           : ratio <= options.ratio_threshold;
        if (!feasible) return;
        MixedPrecisionPlan plan;
        plan.bits = bits;
        plan.compression_ratio = ratio;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const double s = layers[i].avg_trace * layers[i].perturbation.at(bits[i]);
            plan.sensitivities.push_back(s);
            plan.metric += s;
            plan.bit_complexity += layers[i].flops * bits[i];
        }
        if (best) {
            if (plan.metric > best->metric) return;
            if (plan.metric == best->metric) {
                if (plan.bit_complexity < best->bit_complexity) return;
                if (plan.bit_complexity == best->bit_complexity && plan.bits <= best->bits) return;
            }
        }
        best = std::move(plan);
    });
    if (!best)
        throw ConfigError("no bit-width configuration satisfies compression ratio " +
                          std::string(to_string(options.direction)) + " " + std::to_string(options.ratio_threshold));
    for (const auto& l : layers) {
        best->layers.push_back(l.name);
        best->avg_traces.push_back(l.avg_trace);
    }
    return *best;
}

std::map<std::string, double> layer_flops(const ModelGraph& graph) {
    std::map<std::string, double> out;
    for (const auto& [id, shape] : infer_output_shapes(graph)) {
        const auto& n = graph.node(id);
        if (n.kind == LayerKind::Conv2D) {
            const auto& a = n.as<Conv2dAttrs>();
            out[id] = static_cast<double>(shape_numel(shape) * a.in_channels * a.kernel * a.kernel);
        } else if (n.kind == LayerKind::FullyConnected) {
            const auto& a = n.as<LinearAttrs>();
            out[id] = static_cast<double>(a.in_features * a.out_features);
        }
    }
    return out;
}

namespace {

// Activation quantizer whose output reaches `node`'s input without passing
// another quantizer.
std::shared_ptr<FakeQuantize> input_quantizer(const ModelGraph& graph, const std::vector<InsertedQuantizer>& quantizers,
                                              const NodeSpec& node) {
    std::string src = node.inputs.at(0);
    while (true) {
        for (const auto& q : quantizers)
            if (!q.is_weight && q.layer == src) return q.quantizer;
        if (src == ModelGraph::kInput) return nullptr;
        const auto& n = graph.node(src);
        if (n.inputs.size() != 1) return nullptr;
        src = n.inputs[0];
    }
}

} // namespace

MixedPrecisionPlan assign_mixed_precision(ModelGraph& graph, const std::vector<InsertedQuantizer>& quantizers,
                                          const QuantizationSettings& settings, const DataBatch& batch,
                                          const MixedPrecisionOptions& options) {
    std::vector<std::pair<bool, std::shared_ptr<FakeQuantize>>> saved;
    for (const auto& q : quantizers) {
        saved.emplace_back(q.quantizer->enabled(), q.quantizer);
        q.quantizer->set_enabled(false);
    }
    const auto flops = layer_flops(graph);
    std::vector<BitwidthSearchLayer> layers;
    std::vector<const InsertedQuantizer*> weight_quantizers;
    try {
        std::uint64_t index = 0;
        for (const auto& q : quantizers) {
            if (!q.is_weight) continue;
            const Tensor weight = graph.node(q.layer).param("weight");
            auto loss_fn = [&] { return cross_entropy(run_graph(graph, batch.inputs, RunMode::Eval), batch.labels); };
            const Tensor params[] = {weight};
            const double trace = estimate_hessian_trace(loss_fn, params, options.trace_samples, options.seed + index++);
            BitwidthSearchLayer layer{q.layer, trace / static_cast<double>(weight.numel()), flops.at(q.layer), {}};
            for (int b : options.candidate_bits)
                layer.perturbation[b] = quantization_perturbation(weight, weight_quantizer_for(weight, settings, b));
            layers.push_back(std::move(layer));
            weight_quantizers.push_back(&q);
        }
    } catch (...) {
        for (auto& [on, q] : saved) q->set_enabled(on);
        throw;
    }
    for (auto& [on, q] : saved) q->set_enabled(on);

    MixedPrecisionPlan plan = select_bitwidth_config(layers, options);
    std::map<FakeQuantize*, int> activation_bits;
    for (std::size_t i = 0; i < weight_quantizers.size(); ++i) {
        weight_quantizers[i]->quantizer->params().bits = plan.bits[i];
        if (auto aq = input_quantizer(graph, quantizers, graph.node(weight_quantizers[i]->layer))) {
            int& b = activation_bits[aq.get()];
            b = std::max(b, plan.bits[i]);
        }
    }
    for (auto& [q, b] : activation_bits) q->params().bits = b;
    return plan;
}

} // namespace ck
