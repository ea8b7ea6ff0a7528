#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ck/data.hpp"
#include "ck/graph.hpp"
#include "json.hpp"

namespace ck {

/// Runtime handle of one compression algorithm inside a training loop.
class CompressionController {
public:
    virtual ~CompressionController() = default;

    /// Algorithm name as written in the config ("quantization", ...).
    virtual std::string name() const = 0;

    /// Auxiliary loss term; a zero scalar when the algorithm defines none.
    virtual Tensor loss() const;

    /// Per-batch scheduler tick.
    virtual void step() {}
    /// Per-epoch scheduler tick. `metric` is the monitored validation loss.
    virtual void epoch_step(std::optional<double> metric = std::nullopt) { (void)metric; }

    /// Read-only snapshot of algorithm statistics.
    virtual nlohmann::json statistics() const = 0;

    /// Called between backward() and the optimizer step.
    virtual void after_backward() {}
    /// Called right after the optimizer step.
    virtual void after_optimizer_step() {}

    /// Learning-rate multiplier and weight-decay switch requested by the schedule.
    virtual double lr_factor() const { return 1.0; }
    virtual bool weight_decay_enabled() const { return true; }

    /// Scheduler state for checkpoints (hook tensors are saved with the graph).
    virtual nlohmann::json state() const = 0;
    virtual void load_state(const nlohmann::json& state) = 0;
};

using ControllerPtr = std::unique_ptr<CompressionController>;

/// Validated compression config. `sections` holds one object per algorithm,
/// in config order, with every default filled in.
struct CompressionConfig {
    std::uint64_t seed = 0;
    std::optional<Shape> input_shape;
    std::size_t init_batches = 1;
    std::vector<nlohmann::json> sections;

    nlohmann::json to_json() const;
};

/// Throws ConfigError naming the offending key path.
CompressionConfig parse_compression_config(const nlohmann::json& j);
CompressionConfig load_compression_config(const std::filesystem::path& path);

struct CompressedModel {
    ModelGraph graph;
    std::vector<ControllerPtr> controllers;
    CompressionConfig config;
};

/// Applies the builder of every config section in order, then runs the
/// data-dependent initialization (quantizer ranges, activation binarizer
/// scales, mixed precision) on `init_data`.
CompressedModel create_compressed_model(ModelGraph graph, const CompressionConfig& config,
                                        const std::vector<DataBatch>& init_data);

/// Rebuilds controllers over a graph that already carries their hooks.
CompressedModel restore_compressed_model(ModelGraph graph, const CompressionConfig& config,
                                         const nlohmann::json& controller_states);

Tensor total_compression_loss(const std::vector<ControllerPtr>& controllers);
void scheduler_step(const std::vector<ControllerPtr>& controllers);
void scheduler_epoch_step(const std::vector<ControllerPtr>& controllers, std::optional<double> metric = std::nullopt);

/// Multi-process training is not supported; kept for interface parity.
inline void distributed(CompressedModel&) {}

/// Inference graph: sparsity masks multiplied into weights, pruned filters
/// physically removed; quantizer and binarizer hooks are kept.
ModelGraph export_graph(const ModelGraph& graph);

/// Writes export_graph(model.graph) to `path` (+ ".bin").
void export_model(const CompressedModel& model, const std::filesystem::path& path);

/// Checkpoint = graph with hooks plus config and controller states in the
/// manifest metadata. `extra` is stored alongside.
void save_checkpoint(const CompressedModel& model, const std::filesystem::path& path,
                     const nlohmann::json& extra = nlohmann::json::object());
CompressedModel load_checkpoint(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

} // namespace ck
