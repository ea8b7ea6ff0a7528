#include "ck/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ck/error.hpp"
#include "ck/ops.hpp"

namespace ck {

Dataset make_blobs(std::size_t n, std::uint64_t seed) {
    constexpr std::size_t dims = 4;
    Rng rng(seed);
    Dataset d;
    d.classes = 2;
    std::vector<double> x(n * dims);
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(rng.index(2));
        const double center = label == 0 ? -1.0 : 1.0;
        for (std::size_t k = 0; k < dims; ++k) x[i * dims + k] = rng.normal(center, 0.5);
        d.labels.push_back(label);
    }
    d.inputs = Tensor(Shape{n, dims}, std::move(x));
    return d;
}

Dataset make_bars(std::size_t n, std::uint64_t seed) {
    constexpr std::size_t side = 8;
    Rng rng(seed);
    Dataset d;
    d.classes = 2;
    std::vector<double> x(n * side * side);
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(rng.index(2));
        const std::size_t pos = rng.index(side);
        const double level = rng.uniform(0.6, 1.4);
        double* img = x.data() + i * side * side;
        for (std::size_t r = 0; r < side; ++r)
            for (std::size_t c = 0; c < side; ++c) {
                const bool on = label == 0 ? r == pos : c == pos;
                img[r * side + c] = (on ? level : 0.0) + rng.normal(0.0, 0.3);
            }
        d.labels.push_back(label);
    }
    d.inputs = Tensor(Shape{n, 1, side, side}, std::move(x));
    return d;
}

Dataset load_csv_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open dataset '" + path.string() + "'");
    auto split = [](const std::string& line) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            cell.erase(0, cell.find_first_not_of(" \t\r"));
            cell.erase(cell.find_last_not_of(" \t\r") + 1);
            cells.push_back(cell);
        }
        return cells;
    };
    std::string line;
    if (!std::getline(in, line)) throw FormatError("dataset '" + path.string() + "' is empty");
    const auto header = split(line);
    if (header.size() < 2) throw FormatError("dataset '" + path.string() + "' needs a label and at least one feature column");
    const auto it = std::find(header.begin(), header.end(), "label");
    const std::size_t label_col = it != header.end() ? static_cast<std::size_t>(it - header.begin()) : header.size() - 1;

    Dataset d;
    std::vector<double> x;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto cells = split(line);
        const std::string where = path.string() + ":" + std::to_string(row);
        if (cells.size() != header.size())
            throw FormatError(where + ": expected " + std::to_string(header.size()) + " columns, got " + std::to_string(cells.size()));
        for (std::size_t c = 0; c < cells.size(); ++c) {
            double v = 0.0;
            std::size_t used = 0;
            try {
                v = std::stod(cells[c], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != cells[c].size() || !std::isfinite(v))
                throw FormatError(where + ": '" + cells[c] + "' is not a finite number");
            if (c == label_col) {
                if (v < 0.0 || v != std::floor(v)) throw FormatError(where + ": label must be a nonnegative integer");
                d.labels.push_back(static_cast<int>(v));
            } else {
                x.push_back(v);
            }
        }
    }
    if (d.labels.empty()) throw FormatError("dataset '" + path.string() + "' has no rows");
    d.classes = static_cast<std::size_t>(*std::max_element(d.labels.begin(), d.labels.end())) + 1;
    if (d.classes < 2) throw FormatError("dataset '" + path.string() + "' needs at least two classes");
    d.inputs = Tensor(Shape{d.labels.size(), header.size() - 1}, std::move(x));
    return d;
}

Dataset subset(const Dataset& data, std::size_t begin, std::size_t end) {
    end = std::min(end, data.size());
    if (begin > end) begin = end;
    const std::size_t row = data.inputs.numel() / std::max<std::size_t>(data.size(), 1);
    Shape shape = data.inputs.shape();
    shape[0] = end - begin;
    Dataset out;
    out.classes = data.classes;
    out.labels.assign(data.labels.begin() + static_cast<std::ptrdiff_t>(begin),
                      data.labels.begin() + static_cast<std::ptrdiff_t>(end));
    out.inputs = Tensor(shape, std::vector<double>(data.inputs.values().begin() + static_cast<std::ptrdiff_t>(begin * row),
                                                   data.inputs.values().begin() + static_cast<std::ptrdiff_t>(end * row)));
    return out;
}

DatasetSplit resolve_dataset(const std::string& source, std::uint64_t seed) {
    if (source == "blobs") return {make_blobs(512, seed), make_blobs(256, seed + 1000003)};
    if (source == "bars") return {make_bars(512, seed), make_bars(256, seed + 1000003)};
    if (source.size() > 4 && source.ends_with(".csv")) {
        Dataset all = load_csv_dataset(source);
        if (all.size() < 2) throw FormatError("dataset '" + source + "' needs at least two rows");
        const std::size_t cut = all.size() - std::max<std::size_t>(1, all.size() / 5);
        return {subset(all, 0, cut), subset(all, cut, all.size())};
    }
    throw ConfigError("unknown dataset '" + source + "' (expected blobs, bars or a .csv path)");
}

std::vector<DataBatch> make_batches(const Dataset& data, std::size_t batch_size, Rng* rng) {
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (rng) std::shuffle(order.begin(), order.end(), rng->engine());
    const std::size_t row = data.size() ? data.inputs.numel() / data.size() : 0;
    std::vector<DataBatch> out;
    for (std::size_t b = 0; b < order.size(); b += batch_size) {
        const std::size_t n = std::min(batch_size, order.size() - b);
        std::vector<double> x;
        x.reserve(n * row);
        DataBatch batch;
        for (std::size_t i = b; i < b + n; ++i) {
            const auto* src = data.inputs.values().data() + order[i] * row;
            x.insert(x.end(), src, src + row);
            batch.labels.push_back(data.labels[order[i]]);
        }
        Shape shape = data.inputs.shape();
        shape[0] = n;
        batch.inputs = Tensor(shape, std::move(x));
        out.push_back(std::move(batch));
    }
    return out;
}

// ---------------------------------------------------------------------------

std::vector<std::string> preset_names() { return {"mlp-small", "cnn-small", "cnn-residual"}; }

namespace {

void conv_bn_relu(ModelGraph& g, const std::string& n, const std::string& input, std::size_t in, std::size_t out, Rng& rng) {
    g.add(make_conv2d("conv" + n, input, {in, out, 3, 1, 1}, rng));
    g.add(make_batchnorm("bn" + n, "conv" + n, out));
    g.add(make_relu("relu" + n, "bn" + n));
}

} // namespace

ModelGraph make_preset(const std::string& name, const Shape& input_shape, std::size_t classes, Rng& rng) {
    if (classes < 2) throw ConfigError("a model needs at least two classes");
    ModelGraph g(input_shape);
    if (name == "mlp-small") {
        if (input_shape.size() != 1) throw ShapeError("mlp-small expects flat feature vectors, got " + shape_str(input_shape));
        g.add(make_linear("fc1", "input", {input_shape[0], 16}, rng));
        g.add(make_relu("relu1", "fc1"));
        g.add(make_linear("fc2", "relu1", {16, 16}, rng));
        g.add(make_relu("relu2", "fc2"));
        g.add(make_linear("fc3", "relu2", {16, classes}, rng));
        return g;
    }
    if (name != "cnn-small" && name != "cnn-residual") throw ConfigError("unknown model preset '" + name + "'");
    if (input_shape.size() != 3 || input_shape[1] % 4 != 0 || input_shape[2] % 4 != 0)
        throw ShapeError(name + " expects [C, H, W] images with H and W divisible by 4, got " + shape_str(input_shape));
    const std::size_t c = input_shape[0], spatial = input_shape[1] * input_shape[2] / 16;
    if (name == "cnn-small") {
        conv_bn_relu(g, "1", "input", c, 8, rng);
        conv_bn_relu(g, "2", "relu1", 8, 16, rng);
        g.add(make_maxpool("pool1", "relu2"));
        conv_bn_relu(g, "3", "pool1", 16, 16, rng);
        g.add(make_maxpool("pool2", "relu3"));
        g.add(make_flatten("flatten", "pool2"));
        g.add(make_linear("fc", "flatten", {16 * spatial, classes}, rng));
        return g;
    }
    conv_bn_relu(g, "1", "input", c, 8, rng);
    conv_bn_relu(g, "2", "relu1", 8, 8, rng);
    g.add(make_conv2d("conv3", "relu2", {8, 8, 3, 1, 1}, rng));
    g.add(make_batchnorm("bn3", "conv3", 8));
    g.add(make_add("add", "bn3", "relu1"));
    g.add(make_relu("relu3", "add"));
    g.add(make_maxpool("pool1", "relu3"));
    conv_bn_relu(g, "4", "pool1", 8, 16, rng);
    g.add(make_maxpool("pool2", "relu4"));
    g.add(make_flatten("flatten", "pool2"));
    g.add(make_linear("fc", "flatten", {16 * spatial, classes}, rng));
    return g;
}

// ---------------------------------------------------------------------------

SgdOptimizer::SgdOptimizer(std::vector<ParamGroup> params, double momentum)
    : params_(std::move(params)), momentum_(momentum) {
    for (const auto& p : params_) velocity_.emplace_back(p.param.numel(), 0.0);
}

void SgdOptimizer::zero_grad() {
    for (auto& p : params_) p.param.zero_grad();
}

void SgdOptimizer::step(double lr, double weight_decay) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i].param;
        const auto g = p.grad();
        if (g.empty()) continue;
        auto& v = velocity_[i];
        const double wd = params_[i].decay ? weight_decay : 0.0;
        const double mu = params_[i].momentum ? momentum_ : 0.0;
        for (std::size_t j = 0; j < p.numel(); ++j) {
            v[j] = mu * v[j] + g[j] + wd * p[j];
            p[j] -= lr * v[j];
        }
    }
}

void TrainOptions::validate() const {
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("weight decay must be nonnegative");
}

nlohmann::json TrainOptions::to_json() const {
    return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr},
            {"momentum", momentum}, {"weight_decay", weight_decay}, {"seed", seed}};
}

EvalResult evaluate(const ModelGraph& graph, const Dataset& data, std::size_t batch_size) {
    const Shape sig = graph.input_shape();
    if (data.input_shape() != sig)
        throw ShapeError("dataset samples are " + shape_str(data.input_shape()) + " but the model expects " + shape_str(sig));
    NoGradGuard no_grad;
    EvalResult r;
    double loss = 0.0;
    std::size_t correct = 0;
    for (const auto& b : make_batches(data, batch_size)) {
        const Tensor out = run_graph(graph, b.inputs, RunMode::Eval);
        loss += cross_entropy(out, b.labels).item() * static_cast<double>(b.labels.size());
        const std::size_t k = out.dim(1);
        for (std::size_t i = 0; i < b.labels.size(); ++i) {
            const auto row = out.data().subspan(i * k, k);
            correct += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == b.labels[i];
        }
        r.samples += b.labels.size();
    }
    if (r.samples) {
        r.loss = loss / static_cast<double>(r.samples);
        r.accuracy = static_cast<double>(correct) / static_cast<double>(r.samples);
    }
    return r;
}

nlohmann::json EpochMetrics::to_json() const {
    return {{"epoch", epoch},
            {"task_loss", task_loss},
            {"compression_loss", compression_loss},
            {"train_accuracy", train_accuracy},
            {"val_loss", val_loss},
            {"val_accuracy", val_accuracy},
            {"lr", lr},
            {"compression", compression}};
}

std::vector<EpochMetrics> train_model(CompressedModel& model, const DatasetSplit& data, const TrainOptions& options,
                                      const std::function<void(const EpochMetrics&)>& on_epoch) {
    options.validate();
    ModelGraph& graph = model.graph;
    if (data.train.input_shape() != graph.input_shape())
        throw ShapeError("dataset samples are " + shape_str(data.train.input_shape()) + " but the model expects " +
                         shape_str(graph.input_shape()));

    std::vector<ParamGroup> params;
    for (const auto& n : graph.nodes())
        for (const auto& p : n.params)
            if (is_trainable_param(n.kind, p.name)) params.push_back({p.value, p.name == "weight", true});
    for (const auto& h : graph.hooks())
        for (const auto& t : h.transform->trainable()) params.push_back({t, false, false});
    SgdOptimizer sgd(std::move(params), options.momentum);

    Rng rng(options.seed);
    RunContext ctx{RunMode::Train, &rng};
    std::vector<EpochMetrics> history;
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        double lr_factor = 1.0;
        bool use_decay = true;
        for (const auto& c : model.controllers) {
            lr_factor *= c->lr_factor();
            use_decay = use_decay && c->weight_decay_enabled();
        }
        EpochMetrics m;
        m.epoch = epoch + 1;
        m.lr = options.lr * lr_factor;
        std::size_t seen = 0, correct = 0;
        for (const auto& batch : make_batches(data.train, options.batch_size, &rng)) {
            sgd.zero_grad();
            const Tensor out = run_graph(graph, batch.inputs, ctx);
            const Tensor task = cross_entropy(out, batch.labels);
            const Tensor comp = total_compression_loss(model.controllers);
            const Tensor loss = add(task, comp);
            if (!std::isfinite(loss.item()))
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch + 1));
            backward(loss);
            for (const auto& c : model.controllers) c->after_backward();
            sgd.step(m.lr, use_decay ? options.weight_decay : 0.0);
            for (const auto& c : model.controllers) c->after_optimizer_step();
            scheduler_step(model.controllers);

            const std::size_t n = batch.labels.size(), k = out.dim(1);
            m.task_loss += task.item() * static_cast<double>(n);
            m.compression_loss += comp.item() * static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const auto row = out.data().subspan(i * k, k);
                correct += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == batch.labels[i];
            }
            seen += n;
        }
        if (seen) {
            m.task_loss /= static_cast<double>(seen);
            m.compression_loss /= static_cast<double>(seen);
            m.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
        }
        const auto val = evaluate(graph, data.validation, options.batch_size);
        m.val_loss = val.loss;
        m.val_accuracy = val.accuracy;
        if (!std::isfinite(m.val_loss)) throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch + 1));
        scheduler_epoch_step(model.controllers, val.loss);
        for (const auto& c : model.controllers) m.compression.push_back(c->statistics());
        if (on_epoch) on_epoch(m);
        history.push_back(std::move(m));
    }
    return history;
}

} // namespace ck
