#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "ck/graph.hpp"
#include "ck/transform.hpp"

namespace ck {

enum class WeightBinarization { XNOR, DoReFa };

std::string_view to_string(WeightBinarization scheme);
WeightBinarization weight_binarization_from_string(std::string_view name);

/// alpha * sign(W) with sign(0) = +1. DoReFa: alpha = mean|W| over the whole
/// tensor. XNOR: alpha_c = mean|W[:, c, :, :]| per input channel. The sign is
/// straight-through in backward; alpha is differentiated normally.
Tensor binarize_weights(const Tensor& w, WeightBinarization scheme);

/// Per-group scales applied by binarize_weights (one for DoReFa, one per
/// input channel for XNOR).
std::vector<double> binarization_scales(const Tensor& w, WeightBinarization scheme);

/// s * H(in - s * t_c) over channel axis 1 of `in`, H(x) = [x > 0]. The step
/// has a unit-slope surrogate in backward, so d/din = s, d/ds = H - s*t and
/// d/dt_c = -s^2.
Tensor binarize_activations(const Tensor& in, const Tensor& s, const Tensor& t);

struct BinarizationStage {
    int stage = 1;
    bool activations = false;
    bool weights = false;
    double lr_factor = 1.0;  // multiplier on the base learning rate
    bool weight_decay = true;
};

/// Stage 1: no binarization. Stage 2: activations only. Stage 3: both.
/// Stage 4: both, learning rate lr * (1 - progress)^2 and no weight decay.
/// Epochs past the last stage stay in stage 4 with the rate at zero.
BinarizationStage binarization_stage_at(std::size_t epoch, const std::array<int, 4>& stage_epochs);

class WeightBinarize : public Transform {
public:
    explicit WeightBinarize(WeightBinarization scheme) : scheme_(scheme) {}

    std::string family() const override { return "binarization"; }
    std::string type() const override { return "WeightBinarize"; }
    Tensor apply(const Tensor& x, const RunContext& ctx) override;
    nlohmann::json attrs() const override;
    TransformPtr clone() const override;

    WeightBinarization scheme() const { return scheme_; }
    void set_enabled(bool on) { enabled_ = on; }
    bool enabled() const { return enabled_; }

private:
    WeightBinarization scheme_;
    bool enabled_ = true;
};

class ActivationBinarize : public Transform {
public:
    /// scale: [1]; thresholds: one per channel of the hooked activation.
    ActivationBinarize(Tensor scale, Tensor thresholds);

    std::string family() const override { return "binarization"; }
    std::string type() const override { return "ActivationBinarize"; }
    Tensor apply(const Tensor& x, const RunContext& ctx) override;
    std::vector<Tensor> trainable() const override { return {scale_, thresholds_}; }
    std::vector<NamedTensor> tensors() const override { return {{"scale", scale_}, {"thresholds", thresholds_}}; }
    nlohmann::json attrs() const override;
    TransformPtr clone() const override;
    void slice_channels(ChannelAxis axis, const std::vector<bool>& keep) override;

    const Tensor& scale() const { return scale_; }
    const Tensor& thresholds() const { return thresholds_; }
    void set_enabled(bool on) { enabled_ = on; }
    bool enabled() const { return enabled_; }

    /// scale <- 2 * mean|x|, thresholds <- 0.5 (the step sits at mean|x|).
    void init_from(const Tensor& x);
    /// The next apply() initializes from its input and passes it through.
    void begin_calibration() { calibrating_ = true; }

private:
    Tensor scale_;
    Tensor thresholds_;
    bool enabled_ = true;
    bool calibrating_ = false;
};

struct BinarizationSettings {
    WeightBinarization scheme = WeightBinarization::XNOR;
    std::optional<std::vector<std::string>> allowlist;  // all convolutions when unset
    std::optional<std::vector<std::string>> denylist;   // default_binarization_denylist() when unset
};

/// The first convolution and every convolution whose output reaches a
/// FullyConnected layer without passing through another convolution.
std::vector<std::string> default_binarization_denylist(const ModelGraph& graph);

/// Convolutions whose output reaches a FullyConnected node through
/// BatchNorm/ReLU/Pool/Flatten/Add only.
std::vector<std::string> head_feeding_convolutions(const ModelGraph& graph);

/// Shell-style name match ('*' and '?').
bool layer_name_matches(const std::string& name, const std::string& pattern);

struct BinarizedLayer {
    std::string layer;
    std::shared_ptr<WeightBinarize> weights;
    std::shared_ptr<ActivationBinarize> activations;
};

/// Adds a weight binarizer (pre_param "weight") and an activation binarizer
/// (pre_input 0) to each selected Conv2D.
std::vector<BinarizedLayer> apply_binarization(ModelGraph& graph, const BinarizationSettings& settings);

} // namespace ck
