#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ck/graph.hpp"
#include "ck/rng.hpp"
#include "ck/transform.hpp"

namespace ck {

struct MagnitudeMasks {
    double threshold = 0.0;                 // largest zeroed importance (0 when nothing is zeroed)
    std::vector<std::vector<double>> masks; // one per input weight tensor, entries 0 or 1
};

/// Importance |w| / ||W_layer||_2; zeroes the k = round(level * total) least
/// important weights over all layers together. Equal importances zero the
/// earlier weight first (layer order, then flat index).
MagnitudeMasks magnitude_threshold(const std::vector<Tensor>& weights, double level);

enum class ScheduleMode { Polynomial, Exponential, Adaptive, Multistep };

std::string_view to_string(ScheduleMode mode);
ScheduleMode schedule_mode_from_string(std::string_view name);

struct SparsityScheduleSpec {
    ScheduleMode mode = ScheduleMode::Polynomial;
    double init = 0.0;
    double target = 0.5;
    std::size_t epochs = 10;
    double power = 1.0;                                 // polynomial
    std::vector<std::pair<std::size_t, double>> steps;  // multistep: (epoch, level), ascending
    std::size_t patience = 1;                           // adaptive
    double step = 0.05;                                 // adaptive
    double min_delta = 1e-3;                            // adaptive

    /// Throws ConfigError on inconsistent values.
    void validate() const;
};

/// Scheduled level after `epoch` completed epochs. Adaptive mode replays
/// `metrics` (one monitored loss per completed epoch): after `patience`
/// consecutive epochs improving the best loss by less than min_delta the level
/// rises by `step`. Every mode returns the target once epoch >= epochs.
double sparsity_level_at_epoch(const SparsityScheduleSpec& spec, std::size_t epoch,
                               std::span<const double> metrics = {});

/// Bernoulli gates z = [sigmoid(s + logit(u)) > 0.5], u ~ U(0, 1).
std::vector<double> sample_gates(std::span<const double> scores, Rng& rng);

/// (sum sigmoid(s) / |theta| - (1 - level))^2 over all score tensors.
Tensor rb_regularizer_loss(const std::vector<Tensor>& scores, double level);

/// [s > 0], the deterministic test-time mask.
std::vector<double> rb_eval_mask(std::span<const double> scores);

/// Fixed 0/1 multiplier on a weight; the gradient is masked too.
class BinaryMask : public Transform {
public:
    explicit BinaryMask(Tensor mask) : mask_(std::move(mask)) {}

    std::string family() const override { return "sparsity"; }
    std::string type() const override { return "BinaryMask"; }
    Tensor apply(const Tensor& x, const RunContext& ctx) override;
    std::vector<NamedTensor> tensors() const override { return {{"mask", mask_}}; }
    TransformPtr clone() const override { return std::make_shared<BinaryMask>(mask_.clone()); }
    void slice_channels(ChannelAxis axis, const std::vector<bool>& keep) override;

    Tensor& mask() { return mask_; }
    const Tensor& mask() const { return mask_; }

private:
    Tensor mask_;
};

/// Stochastic gate with trainable scores: sampled gates in train mode
/// (straight-through on the indicator), [s > 0] in eval mode.
class RBGate : public Transform {
public:
    explicit RBGate(Tensor scores);

    std::string family() const override { return "sparsity"; }
    std::string type() const override { return "RBGate"; }
    Tensor apply(const Tensor& x, const RunContext& ctx) override;
    std::vector<Tensor> trainable() const override { return {scores_}; }
    std::vector<NamedTensor> tensors() const override { return {{"scores", scores_}}; }
    TransformPtr clone() const override { return std::make_shared<RBGate>(scores_.clone()); }
    void slice_channels(ChannelAxis axis, const std::vector<bool>& keep) override;

    const Tensor& scores() const { return scores_; }

private:
    Tensor scores_;
};

/// Slices a weight-shaped tensor along axis 0 (Output) or 1 (Input).
Tensor slice_weight_channels(const Tensor& t, ChannelAxis axis, const std::vector<bool>& keep);

/// Conv2D and FullyConnected weights, in graph order.
std::vector<std::string> sparsifiable_layers(const ModelGraph& graph);

} // namespace ck
