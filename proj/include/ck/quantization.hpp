#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ck/graph.hpp"
#include "ck/tensor.hpp"
#include "ck/transform.hpp"

namespace ck {

enum class QuantMode { Symmetric, Asymmetric };
enum class QuantRole { Weights, SignedActivation, UnsignedActivation };

std::string_view to_string(QuantMode mode);
std::string_view to_string(QuantRole role);
QuantMode quant_mode_from_string(std::string_view name);
QuantRole quant_role_from_string(std::string_view name);

struct QuantRange {
    std::int64_t q_min = 0;
    std::int64_t q_max = 0;
};

/// Integer range of the symmetric mode per bit-width and tensor role:
/// weights use a restricted (sign-symmetric) range, signed activations the
/// full two's complement range, unsigned activations [0, 2^bits - 1].
QuantRange quant_range_for(int bits, QuantRole role);

/// Round half to even (the "bankers" rounding of the quantizer).
double round_half_even(double x);

struct TunedRange {
    double r_min = 0.0;
    double r_max = 0.0;
    std::int64_t zero_point = 0;
};

/// Adjusts [r_min, r_max] so that 0.0 lands exactly on an integer level of an
/// asymmetric `bits`-bit grid. The returned zero point is that integer.
TunedRange tune_asymmetric_range(double r_min, double r_max, int bits);

/// Floor applied to symmetric scales and degenerate asymmetric ranges.
inline constexpr double kMinQuantScale = 1e-8;

/// Parameters of one fake quantizer. Per-tensor quantizers hold one-element
/// range tensors; per-channel quantizers hold one entry per slice along
/// per_channel_axis.
struct QuantizerParams {
    QuantMode mode = QuantMode::Symmetric;
    int bits = 8;
    QuantRole role = QuantRole::SignedActivation;
    std::optional<std::size_t> per_channel_axis;
    Tensor scale;  // symmetric
    Tensor r_min;  // asymmetric
    Tensor r_max;  // asymmetric

    std::size_t channels() const;
    QuantRange range() const;  // (q_min, q_max); asymmetric is [0, 2^bits - 1]
    /// Step s of channel c: scale/q_max (symmetric) or (r_max - r_min)/(2^bits - 1).
    double step(std::size_t c) const;
    /// Zero point of channel c: 0 (symmetric) or round(-r_min/s) (asymmetric).
    std::int64_t zero_point(std::size_t c) const;
};

/// Symmetric fake quantization s * round(clamp(r/s; q_min, q_max)), s = scale/q_max,
/// recorded on the tape with straight-through gradient for r and the
/// step-size gradient for scale.
Tensor fake_quant_symmetric(const Tensor& r, const Tensor& scale, int bits, QuantRole role,
                            std::optional<std::size_t> axis = std::nullopt);
Tensor fake_quant_symmetric(const Tensor& r, const QuantizerParams& p);

/// Asymmetric fake quantization s * (round(clamp(r; r_min, r_max)/s + z) - z).
/// The range must already be tuned (see tune_asymmetric_range); z is taken as
/// round(-r_min/s).
Tensor fake_quant_asymmetric(const Tensor& r, const Tensor& r_min, const Tensor& r_max, int bits,
                             std::optional<std::size_t> axis = std::nullopt);
Tensor fake_quant_asymmetric(const Tensor& r, const QuantizerParams& p);

/// Dispatches on p.mode; asymmetric ranges are tuned on the fly.
Tensor fake_quant(const Tensor& r, const QuantizerParams& p);

struct FakeQuantGrads {
    std::vector<double> grad_r;
    std::vector<double> grad_scale;  // symmetric, one per channel
    std::vector<double> grad_r_min;  // asymmetric, one per channel
    std::vector<double> grad_r_max;  // asymmetric, one per channel
};

/// Gradients of a fake quantizer for an upstream gradient. grad_r is the
/// clamp mask (straight-through inside the range). Range parameters receive
/// d(out)/d(step) * (round(v) - v) inside the range and the derivative of
/// the clamped boundary value outside it.
FakeQuantGrads fake_quant_backward(std::span<const double> upstream, const Tensor& r, const QuantizerParams& p);

/// Fake-quantize hook. While `collecting`, it passes values through and
/// records statistics for range initialization.
class FakeQuantize : public Transform {
public:
    explicit FakeQuantize(QuantizerParams params);

    std::string family() const override { return "quantization"; }
    std::string type() const override { return "FakeQuantize"; }
    Tensor apply(const Tensor& x, const RunContext& ctx) override;
    std::vector<Tensor> trainable() const override;
    std::vector<NamedTensor> tensors() const override;
    nlohmann::json attrs() const override;
    TransformPtr clone() const override;
    void slice_channels(ChannelAxis axis, const std::vector<bool>& keep) override;

    const QuantizerParams& params() const { return params_; }
    QuantizerParams& params() { return params_; }

    void set_enabled(bool on) { enabled_ = on; }
    bool enabled() const { return enabled_; }

    void begin_collecting(std::optional<double> percentile = std::nullopt);
    /// Sets the range from the observed statistics. Throws if nothing was observed.
    void finish_collecting();
    bool collecting() const { return collecting_; }
    /// Range from a known tensor (weights): max|.| or tuned min/max per slice.
    void init_from(const Tensor& values, std::optional<double> percentile = std::nullopt);

private:
    void observe(const Tensor& x);
    void set_range_from(const std::vector<std::vector<double>>& samples, std::optional<double> percentile);

    QuantizerParams params_;
    bool enabled_ = true;
    bool collecting_ = false;
    std::optional<double> percentile_;
    std::vector<std::vector<double>> observed_;  // per channel
};

struct QuantizationSettings {
    QuantMode mode = QuantMode::Symmetric;
    int bits = 8;
    bool per_channel = false;
};

struct InsertedQuantizer {
    HookPoint point;
    std::string layer;  // node whose weight or output is quantized ("input" for the network input)
    bool is_weight = false;
    std::shared_ptr<FakeQuantize> quantizer;
};

/// Weight quantizers before every Conv2D/FullyConnected; activation
/// quantizers on the network input and after every value-producing node
/// except the interior of Conv->ReLU and Conv->BatchNorm->ReLU patterns.
/// MaxPool2D and Flatten keep the quantized grid of their input and get none.
std::vector<InsertedQuantizer> insert_quantizers(ModelGraph& graph, const QuantizationSettings& settings);

struct RangeInitOptions {
    std::size_t num_batches = 1;
    std::optional<double> percentile;  // e.g. 99.9; plain min/max when unset
};

/// Weight quantizers from their weights, activation quantizers from the
/// first num_batches batches of `batches` (eval-mode forward passes).
void initialize_quantizer_ranges(ModelGraph& graph, const std::vector<InsertedQuantizer>& quantizers,
                                 const std::vector<Tensor>& batches, const RangeInitOptions& options);

} // namespace ck
