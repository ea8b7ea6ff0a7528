#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ck/compression.hpp"
#include "ck/data.hpp"
#include "ck/graph.hpp"
#include "json.hpp"

namespace ck {

/// In-memory labelled dataset; `inputs` is [N, ...input_shape].
struct Dataset {
    Tensor inputs;
    std::vector<int> labels;
    std::size_t classes = 0;

    std::size_t size() const { return labels.size(); }
    Shape input_shape() const { return Shape(inputs.shape().begin() + 1, inputs.shape().end()); }
};

/// Two Gaussian blobs in 4 dimensions, centered at +-1 with stddev 0.5.
Dataset make_blobs(std::size_t n, std::uint64_t seed);

/// 1x8x8 images holding one horizontal (class 0) or vertical (class 1) bar
/// of random position and polarity-free intensity, plus Gaussian noise.
Dataset make_bars(std::size_t n, std::uint64_t seed);

/// Numeric CSV with a header row. The label column is named "label", or the
/// last column if none is. Labels must be integers in [0, classes).
Dataset load_csv_dataset(const std::filesystem::path& path);

/// Rows [begin, end) of `data`.
Dataset subset(const Dataset& data, std::size_t begin, std::size_t end);

struct DatasetSplit {
    Dataset train;
    Dataset validation;
};

/// "blobs", "bars" or a CSV path. Synthetic sets draw validation data from an
/// independent stream; CSV files keep their last fifth for validation.
DatasetSplit resolve_dataset(const std::string& source, std::uint64_t seed);

/// Minibatches in order, or shuffled with `rng` when given.
std::vector<DataBatch> make_batches(const Dataset& data, std::size_t batch_size, Rng* rng = nullptr);

/// "mlp-small", "cnn-small" or "cnn-residual".
ModelGraph make_preset(const std::string& name, const Shape& input_shape, std::size_t classes, Rng& rng);
std::vector<std::string> preset_names();

/// Per-tensor settings of one optimized tensor.
struct ParamGroup {
    Tensor param;
    bool decay = false;
    bool momentum = true;
};

/// SGD with classical momentum. Layer weights take decay; tensors owned by
/// compression hooks are stepped without momentum.
class SgdOptimizer {
public:
    SgdOptimizer(std::vector<ParamGroup> params, double momentum);

    void zero_grad();
    void step(double lr, double weight_decay);

private:
    std::vector<ParamGroup> params_;
    std::vector<std::vector<double>> velocity_;
    double momentum_;
};

struct TrainOptions {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
};

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
    std::size_t samples = 0;
};

/// Eval-mode pass over `data`.
EvalResult evaluate(const ModelGraph& graph, const Dataset& data, std::size_t batch_size = 64);

struct EpochMetrics {
    std::size_t epoch = 0;
    double task_loss = 0.0;
    double compression_loss = 0.0;
    double train_accuracy = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
    double lr = 0.0;
    nlohmann::json compression = nlohmann::json::array();

    nlohmann::json to_json() const;
};

/// Fine-tunes `model` for options.epochs. Each batch: forward, task loss plus
/// compression loss, backward, SGD step, scheduler step; each epoch ends with
/// a validation pass and an epoch step fed with the validation loss.
/// Throws NumericError on a non-finite loss.
std::vector<EpochMetrics> train_model(CompressedModel& model, const DatasetSplit& data, const TrainOptions& options,
                                      const std::function<void(const EpochMetrics&)>& on_epoch = {});

} // namespace ck
