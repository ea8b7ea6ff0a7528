#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ck/data.hpp"
#include "ck/quantization.hpp"

namespace ck {

/// Hutchinson estimate (1/n) sum_k v_k^T H v_k of the Hessian trace of
/// loss_fn() with respect to `params`, using Rademacher probes and
/// Hessian-vector products by double backward. Deterministic given seed.
double estimate_hessian_trace(const std::function<Tensor()>& loss_fn, std::span<const Tensor> params,
                              std::size_t n_samples, std::uint64_t seed);

/// Symmetric per-tensor (or per-channel) weight quantizer at `bits`, ranged
/// from the weight itself.
QuantizerParams weight_quantizer_for(const Tensor& weight, const QuantizationSettings& settings, int bits);

/// ||Q(W) - W||^2 for the quantizer `q`.
double quantization_perturbation(const Tensor& weight, const QuantizerParams& q);

/// avg_trace * ||Q(W) - W||^2.
double layer_sensitivity(double avg_trace, const Tensor& weight, const QuantizerParams& q);

enum class RatioDirection { AtLeast, AtMost };

RatioDirection ratio_direction_from_string(std::string_view name);
std::string_view to_string(RatioDirection direction);

struct MixedPrecisionOptions {
    std::vector<int> candidate_bits{4, 8};
    double ratio_threshold = 1.0;
    RatioDirection direction = RatioDirection::AtLeast;
    std::size_t trace_samples = 64;
    std::uint64_t seed = 0;
};

/// Search input for one layer: the perturbation ||Q_b(W) - W||^2 is given for
/// each candidate bit-width b.
struct BitwidthSearchLayer {
    std::string name;
    double avg_trace = 0.0;
    double flops = 0.0;
    std::map<int, double> perturbation;
};

struct MixedPrecisionPlan {
    std::vector<std::string> layers;
    std::vector<int> bits;
    std::vector<double> avg_traces;
    std::vector<double> sensitivities;  // at the chosen bits
    double metric = 0.0;                // sum of sensitivities
    double bit_complexity = 0.0;        // sum FLOPs * bits
    double compression_ratio = 1.0;     // sum FLOPs * 8 / bit_complexity
};

double compression_ratio(std::span<const double> flops, std::span<const int> bits);

/// Calls `visit` with every assignment in which a layer with a strictly
/// smaller trace never gets more bits than one with a larger trace.
void for_each_monotone_config(std::span<const double> traces, std::span<const int> candidate_bits,
                              const std::function<void(const std::vector<int>&)>& visit);

/// Among monotone configurations whose compression ratio satisfies the
/// threshold, the one with the smallest metric. Ties go to the larger bit
/// complexity, then to the lexicographically larger bits vector.
/// Throws ConfigError when nothing is feasible.
MixedPrecisionPlan select_bitwidth_config(const std::vector<BitwidthSearchLayer>& layers,
                                          const MixedPrecisionOptions& options);

/// Multiply-accumulate count per Conv2D / FullyConnected node for one sample.
std::map<std::string, double> layer_flops(const ModelGraph& graph);

/// Full pass over a quantized graph: per-layer average Hessian traces (with
/// quantizers disabled, eval mode, seed + layer index), bit-width search, and
/// assignment of the chosen bits to each layer's weight quantizer and to the
/// activation quantizer feeding that layer.
MixedPrecisionPlan assign_mixed_precision(ModelGraph& graph, const std::vector<InsertedQuantizer>& quantizers,
                                          const QuantizationSettings& settings, const DataBatch& batch,
                                          const MixedPrecisionOptions& options);

} // namespace ck
