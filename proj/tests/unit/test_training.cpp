#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "ck/error.hpp"
#include "ck/training.hpp"
#include "support/test_support.hpp"

using namespace ck;

namespace {

std::filesystem::path write_csv(const std::string& name, const std::string& body) {
    const auto dir = std::filesystem::temp_directory_path() / "ck_test_training";
    std::filesystem::create_directories(dir);
    const auto path = dir / name;
    std::ofstream(path) << body;
    return path;
}

CompressedModel plain_model(const DatasetSplit& data, const std::string& preset, std::uint64_t seed) {
    Rng rng(seed);
    return create_compressed_model(make_preset(preset, data.train.input_shape(), data.train.classes, rng), {}, {});
}

} // namespace

TEST(Datasets, BlobsAreSeededAndCentered) {
    const Dataset a = make_blobs(400, 1), b = make_blobs(400, 1), c = make_blobs(400, 2);
    EXPECT_EQ(a.inputs.shape(), (Shape{400, 4}));
    EXPECT_EQ(a.inputs.values(), b.inputs.values());
    EXPECT_NE(a.inputs.values(), c.inputs.values());
    double mean[2] = {0, 0};
    std::size_t count[2] = {0, 0};
    for (std::size_t i = 0; i < a.size(); ++i) {
        ASSERT_TRUE(a.labels[i] == 0 || a.labels[i] == 1);
        for (std::size_t k = 0; k < 4; ++k) mean[a.labels[i]] += a.inputs[i * 4 + k];
        ++count[a.labels[i]];
    }
    // 4 * count samples of stddev 0.5 per class mean
    EXPECT_NEAR(mean[0] / (4.0 * count[0]), -1.0, 0.1);
    EXPECT_NEAR(mean[1] / (4.0 * count[1]), 1.0, 0.1);
}

TEST(Datasets, BarsAreRecoverableFromRowAndColumnProfiles) {
    const Dataset d = make_bars(300, 4);
    EXPECT_EQ(d.inputs.shape(), (Shape{300, 1, 8, 8}));
    std::size_t agree = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        double best_row = -1e9, best_col = -1e9;
        for (std::size_t r = 0; r < 8; ++r) {
            double row = 0.0, col = 0.0;
            for (std::size_t k = 0; k < 8; ++k) {
                row += d.inputs[i * 64 + r * 8 + k];
                col += d.inputs[i * 64 + k * 8 + r];
            }
            best_row = std::max(best_row, row);
            best_col = std::max(best_col, col);
        }
        agree += (best_row > best_col ? 0 : 1) == d.labels[i];
    }
    EXPECT_GE(agree, 285u);
}

TEST(Datasets, CsvLoadingAndErrors) {
    const auto ok = write_csv("ok.csv", "a,label,b\n1,0,2\n3,1,4\n\n5,1,6\n7,0,8\n9,1,10\n");
    const Dataset d = load_csv_dataset(ok);
    EXPECT_EQ(d.size(), 5u);
    EXPECT_EQ(d.classes, 2u);
    EXPECT_EQ(d.labels, (std::vector<int>{0, 1, 1, 0, 1}));
    EXPECT_EQ(d.inputs.values(), (std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}));
    const auto last = write_csv("last.csv", "x,y,cls\n0.5,1,2\n1.5,2,0\n");
    EXPECT_EQ(load_csv_dataset(last).labels, (std::vector<int>{2, 0}));
    EXPECT_EQ(load_csv_dataset(last).classes, 3u);
    const auto split = resolve_dataset(ok.string(), 0);
    EXPECT_EQ(split.train.size(), 4u);
    EXPECT_EQ(split.validation.labels, (std::vector<int>{1}));

    EXPECT_THROW(load_csv_dataset(write_csv("ragged.csv", "a,label\n1,0\n2\n")), FormatError);
    EXPECT_THROW(load_csv_dataset(write_csv("text.csv", "a,label\n1,0\nx,1\n")), FormatError);
    EXPECT_THROW(load_csv_dataset(write_csv("neg.csv", "a,label\n1,-1\n2,0\n")), FormatError);
    EXPECT_THROW(load_csv_dataset(write_csv("frac.csv", "a,label\n1,0.5\n2,0\n")), FormatError);
    EXPECT_THROW(load_csv_dataset(write_csv("one.csv", "a,label\n1,0\n2,0\n")), FormatError);
    EXPECT_THROW(load_csv_dataset(write_csv("empty.csv", "")), FormatError);
    EXPECT_THROW(load_csv_dataset("/nonexistent.csv"), ConfigError);
    EXPECT_THROW(resolve_dataset("mnist", 0), ConfigError);
}

TEST(Datasets, BatchesCoverEveryRowOnce) {
    const Dataset d = make_blobs(70, 3);
    const auto plain = make_batches(d, 32);
    ASSERT_EQ(plain.size(), 3u);
    EXPECT_EQ(plain[2].labels.size(), 6u);
    EXPECT_EQ(std::vector<double>(plain[1].inputs.values().begin(), plain[1].inputs.values().begin() + 4),
              std::vector<double>(d.inputs.values().begin() + 128, d.inputs.values().begin() + 132));
    Rng rng(9);
    std::multiset<double> seen, all(d.inputs.values().begin(), d.inputs.values().end());
    for (const auto& b : make_batches(d, 16, &rng)) seen.insert(b.inputs.values().begin(), b.inputs.values().end());
    EXPECT_EQ(seen, all);
    EXPECT_THROW(make_batches(d, 0), ConfigError);
}

TEST(Presets, BuildAndRunOnTheirInputs) {
    Rng rng(1);
    for (const auto& name : preset_names()) {
        const Shape in = name == "mlp-small" ? Shape{4} : Shape{1, 8, 8};
        const ModelGraph g = make_preset(name, in, 3, rng);
        EXPECT_EQ(g.input_shape(), in);
        const Tensor y = run_graph(g, ck::testing::random_batch(g, 5, rng));
        EXPECT_EQ(y.shape(), (Shape{5, 3})) << name;
    }
    EXPECT_THROW(make_preset("resnet50", {1, 8, 8}, 2, rng), ConfigError);
    EXPECT_THROW(make_preset("mlp-small", {1, 8, 8}, 2, rng), ShapeError);
    EXPECT_THROW(make_preset("cnn-small", {1, 8, 8}, 1, rng), ConfigError);
}

TEST(Optimizer, MomentumDecayAndHookParams) {
    Tensor w = Tensor::vector({1.0, -2.0});
    Tensor h = Tensor::vector({0.5});
    w.set_requires_grad(true);
    h.set_requires_grad(true);
    SgdOptimizer sgd({{w, true, true}, {h, false, false}}, 0.9);
    // hand-rolled: v = mu v + g + wd p ; p -= lr v
    double vw[2] = {0, 0}, pw[2] = {1.0, -2.0}, ph = 0.5;
    for (int step = 0; step < 3; ++step) {
        sgd.zero_grad();
        backward(add(sum(mul(w, w)), scale(sum(h), 3.0)));
        const double gw[2] = {2 * pw[0], 2 * pw[1]};
        sgd.step(0.1, 0.01);
        for (int k = 0; k < 2; ++k) {
            vw[k] = 0.9 * vw[k] + gw[k] + 0.01 * pw[k];
            pw[k] -= 0.1 * vw[k];
            EXPECT_NEAR(w[k], pw[k], 1e-15);
        }
        ph -= 0.1 * 3.0;
        EXPECT_NEAR(h[0], ph, 1e-15);
    }
}

TEST(Training, OptionsAreValidated) {
    TrainOptions o;
    EXPECT_NO_THROW(o.validate());
    o.lr = 0.0;
    EXPECT_THROW(o.validate(), ConfigError);
    o = {};
    o.momentum = 1.0;
    EXPECT_THROW(o.validate(), ConfigError);
    o = {};
    o.batch_size = 0;
    EXPECT_THROW(o.validate(), ConfigError);
    o = {};
    o.weight_decay = -1.0;
    EXPECT_THROW(o.validate(), ConfigError);
}

TEST(Training, LearnsBlobsDeterministically) {
    const DatasetSplit data = resolve_dataset("blobs", 5);
    TrainOptions opt;
    opt.epochs = 3;
    auto a = plain_model(data, "mlp-small", 2);
    auto b = plain_model(data, "mlp-small", 2);
    const auto ha = train_model(a, data, opt);
    const auto hb = train_model(b, data, opt);
    ASSERT_EQ(ha.size(), 3u);
    for (std::size_t e = 0; e < 3; ++e) EXPECT_EQ(ha[e].to_json(), hb[e].to_json());
    EXPECT_GE(ha.back().val_accuracy, 0.95);
    const auto eval = evaluate(a.graph, data.validation);
    EXPECT_EQ(eval.accuracy, ha.back().val_accuracy);
    EXPECT_EQ(eval.samples, data.validation.size());
}

TEST(Training, EvaluateOnConstantModelMatchesLabelFrequency) {
    const DatasetSplit data = resolve_dataset("blobs", 6);
    auto m = plain_model(data, "mlp-small", 3);
    // zeroing the last layer makes every logit equal, so argmax is class 0
    for (auto& n : m.graph.nodes())
        if (n.kind == LayerKind::FullyConnected && n.id == m.graph.output())
            for (auto& p : n.params) for (double& v : p.value.data()) v = 0.0;
    const auto r = evaluate(m.graph, data.validation, 7);
    const double zeros = static_cast<double>(std::count(data.validation.labels.begin(), data.validation.labels.end(), 0));
    EXPECT_DOUBLE_EQ(r.accuracy, zeros / static_cast<double>(data.validation.size()));
    EXPECT_NEAR(r.loss, std::log(2.0), 1e-12);
}

TEST(Training, NonFiniteLossAndShapeMismatchAreReported) {
    const DatasetSplit data = resolve_dataset("blobs", 7);
    auto m = plain_model(data, "mlp-small", 4);
    for (auto& n : m.graph.nodes())
        if (n.has_param("weight")) n.param("weight")[0] = std::nan("");
    TrainOptions opt;
    opt.epochs = 1;
    EXPECT_THROW(train_model(m, data, opt), NumericError);
    const DatasetSplit bars = resolve_dataset("bars", 7);
    auto fresh = plain_model(data, "mlp-small", 4);
    EXPECT_THROW(train_model(fresh, bars, opt), ShapeError);
    EXPECT_THROW(evaluate(fresh.graph, bars.validation), ShapeError);
}
