#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "ck/compression.hpp"
#include "ck/error.hpp"
#include "ck/pruning.hpp"
#include "ck/serialization.hpp"
#include "ck/sparsity.hpp"
#include "ck/training.hpp"
#include "support/test_support.hpp"

using namespace ck;
using ck::testing::max_abs_diff;
using nlohmann::json;

namespace {

struct Fixture {
    DatasetSplit data = resolve_dataset("bars", 3);
    ModelGraph graph;
    std::vector<DataBatch> init;

    Fixture() {
        Rng rng(11);
        graph = make_preset("cnn-small", data.train.input_shape(), data.train.classes, rng);
        init = make_batches(subset(data.train, 0, 64), 32);
    }
};

std::string config_error(const json& j) {
    try {
        parse_compression_config(j);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

CompressedModel compress(const Fixture& f, const json& cfg) {
    return create_compressed_model(f.graph.clone(), parse_compression_config(cfg), f.init);
}

std::filesystem::path temp_path(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "ck_test_compression";
    std::filesystem::create_directories(dir);
    return dir / name;
}

} // namespace

TEST(CompressionConfig, RejectsInvalidInputWithKeyPath) {
    EXPECT_NE(config_error({{"compression", {{"algorithm", "quantization"}, {"bitz", 8}}}}).find("config.compression[0].bitz"),
              std::string::npos);
    EXPECT_NE(config_error({{"compression", {{"algorithm", "quantization"}, {"bits", 1}}}}).find("config.compression[0]"),
              std::string::npos);
    EXPECT_NE(config_error({{"compression", {{"algorithm", "pruning"}}}}).find("unknown algorithm"), std::string::npos);
    EXPECT_NE(config_error({{"compression", json::array({{{"algorithm", "quantization"}}, {{"algorithm", "binarization"}}})}})
                  .find("cannot be combined"),
              std::string::npos);
    EXPECT_NE(config_error({{"compression", json::array({{{"algorithm", "magnitude_sparsity"}}, {{"algorithm", "rb_sparsity"}}})}})
                  .find("second 'sparsity'"),
              std::string::npos);
    EXPECT_NE(config_error({{"compression", {{"algorithm", "magnitude_sparsity"}, {"schedule", {{"target", 1.5}}}}}})
                  .find("config.compression[0].schedule"),
              std::string::npos);
    EXPECT_NE(config_error({{"compression", {{"algorithm", "filter_pruning"}, {"pruning_rate", 1.0}}}}), "");
    EXPECT_NE(config_error({{"compression", {{"algorithm", "binarization"}, {"stage_epochs", {1, 2}}}}}).find("stage_epochs"),
              std::string::npos);
    EXPECT_NE(config_error({{"input_shape", {1, 0}}}).find("config.input_shape"), std::string::npos);
    EXPECT_NE(config_error({{"compression", {{"algorithm", "quantization"}, {"init", {{"percentile", 40}}}}}}), "");
    EXPECT_NE(config_error({{"seed", "x"}}), "");
    EXPECT_THROW(load_compression_config("/nonexistent/config.json"), ConfigError);
    const auto bad_json = temp_path("bad.json");
    std::ofstream(bad_json) << "{ not json";
    EXPECT_THROW(load_compression_config(bad_json), ConfigError);
}

TEST(CompressionConfig, DefaultsAreFilledAndStable) {
    const auto c = parse_compression_config({{"compression", {{"algorithm", "filter_pruning"}}}});
    ASSERT_EQ(c.sections.size(), 1u);
    EXPECT_EQ(c.sections[0]["criterion"], "geometric_median");
    EXPECT_EQ(c.sections[0]["pruning_rate"], 0.3);
    EXPECT_EQ(c.sections[0]["scheduler"]["mode"], "baseline");
    EXPECT_EQ(parse_compression_config(c.to_json()).to_json(), c.to_json());
    EXPECT_TRUE(parse_compression_config(json::object()).sections.empty());
    for (const auto& entry : std::filesystem::directory_iterator(CK_SOURCE_DIR "/configs"))
        EXPECT_NO_THROW(load_compression_config(entry.path())) << entry.path();
}

TEST(CompressionModel, InputShapeMismatchIsAConfigError) {
    Fixture f;
    auto cfg = parse_compression_config({{"input_shape", {1, 4, 4}}});
    EXPECT_THROW(create_compressed_model(f.graph.clone(), cfg, f.init), ConfigError);
    cfg = parse_compression_config({{"input_shape", {1, 8, 8}}});
    EXPECT_NO_THROW(create_compressed_model(f.graph.clone(), cfg, f.init));
}

TEST(CompressionModel, MagnitudeControllerTracksScheduledLevel) {
    Fixture f;
    auto m = compress(f, {{"compression", {{"algorithm", "magnitude_sparsity"},
                                           {"schedule", {{"mode", "polynomial"}, {"target", 0.6}, {"epochs", 3}}}}}});
    ASSERT_EQ(m.controllers.size(), 1u);
    auto& c = *m.controllers[0];
    std::size_t total = 0;
    for (const auto& id : sparsifiable_layers(m.graph)) total += m.graph.node(id).param("weight").numel();
    for (int e = 0; e <= 4; ++e) {
        const json s = c.statistics();
        const double expected = std::min(0.6, 0.6 * e / 3.0);
        EXPECT_NEAR(s["scheduled_level"].get<double>(), expected, 1e-12);
        EXPECT_LE(std::fabs(s["sparsity"].get<double>() - expected), 1.0 / static_cast<double>(total) + 1e-12);
        // count zeros of the effective weights directly
        const ModelGraph exported = export_graph(m.graph);
        std::size_t zeros = 0;
        for (const auto& id : sparsifiable_layers(exported))
            for (double v : exported.node(id).param("weight").values()) zeros += v == 0.0;
        EXPECT_LE(std::fabs(static_cast<double>(zeros) / static_cast<double>(total) - expected), 1.0 / static_cast<double>(total) + 1e-12);
        c.epoch_step(1.0);
    }
    EXPECT_EQ(total_compression_loss(m.controllers).item(), 0.0);
}

TEST(CompressionModel, RBSparsityContributesALoss) {
    Fixture f;
    auto m = compress(f, {{"compression", {{"algorithm", "rb_sparsity"}, {"schedule", {{"mode", "multistep"}, {"steps", {{0, 0.5}}}}}}}});
    const Tensor loss = total_compression_loss(m.controllers);
    EXPECT_GT(loss.item(), 0.0);
    EXPECT_TRUE(std::isfinite(loss.item()));
}

TEST(CompressionModel, FrozenPrunedWeightsStayUnchangedThroughTraining) {
    Fixture f;
    auto m = compress(f, {{"compression", {{"algorithm", "filter_pruning"}, {"pruning_rate", 0.5}}}});
    const json s = m.controllers[0]->statistics();
    ASSERT_TRUE(s["frozen"].get<bool>());
    ASSERT_FALSE(s["layers"].empty());
    std::map<std::string, std::vector<double>> before;
    for (const auto& l : s["layers"]) before[l["layer"]] = m.graph.node(l["layer"].get<std::string>()).param("weight").values();
    TrainOptions opt;
    opt.epochs = 1;
    opt.batch_size = 32;
    DatasetSplit small{subset(f.data.train, 0, 128), subset(f.data.validation, 0, 64)};
    train_model(m, small, opt);
    bool some_kept_changed = false;
    for (const auto& l : s["layers"]) {
        const auto& w = m.graph.node(l["layer"].get<std::string>()).param("weight");
        const auto& old = before[l["layer"]];
        const std::size_t n = l["filters"], inner = w.numel() / n;
        std::vector<bool> pruned(n, false);
        for (std::size_t c : l["pruned_filters"].get<std::vector<std::size_t>>()) pruned[c] = true;
        for (std::size_t i = 0; i < w.numel(); ++i) {
            if (pruned[i / inner]) ASSERT_EQ(w[i], old[i]);
            else some_kept_changed |= w[i] != old[i];
        }
    }
    EXPECT_TRUE(some_kept_changed);
}

TEST(CompressionModel, ExportMatchesHookedModel) {
    Fixture f;
    for (const char* cfg : {"int8_sparsity50.json", "prune30_gm.json", "binarize_xnor.json", "int8.json"}) {
        auto m = create_compressed_model(f.graph.clone(), load_compression_config(std::string(CK_SOURCE_DIR "/configs/") + cfg), f.init);
        for (int e = 0; e < 5; ++e) scheduler_epoch_step(m.controllers, 1.0);
        const ModelGraph exported = export_graph(m.graph);
        for (const auto& h : exported.hooks()) {
            EXPECT_NE(h.transform->family(), "sparsity") << cfg;
            EXPECT_NE(h.transform->family(), "pruning") << cfg;
        }
        const Tensor x = subset(f.data.validation, 0, 50).inputs;
        EXPECT_LE(max_abs_diff(run_graph(m.graph, x).values(), run_graph(exported, x).values()), 1e-9) << cfg;
        if (std::string(cfg) == "prune30_gm.json") {
            EXPECT_LT(exported.parameter_count(), m.graph.parameter_count());
        }
        const auto path = temp_path(std::string("export_") + cfg);
        export_model(m, path);
        json meta;
        const ModelGraph loaded = load_model(path, &meta);
        EXPECT_EQ(meta["kind"], "exported");
        EXPECT_EQ(run_graph(loaded, x).values(), run_graph(exported, x).values()) << cfg;
    }
}

TEST(CompressionModel, CheckpointRoundTripRestoresControllers) {
    Fixture f;
    for (const char* cfg : {"int8_sparsity50.json", "prune30_gm.json", "binarize_xnor.json", "rb50.json", "mixed_precision.json"}) {
        auto m = create_compressed_model(f.graph.clone(), load_compression_config(std::string(CK_SOURCE_DIR "/configs/") + cfg), f.init);
        for (int e = 0; e < 2; ++e) scheduler_epoch_step(m.controllers, 1.0 - 0.1 * e);
        const auto path = temp_path(std::string("ckpt_") + cfg);
        save_checkpoint(m, path, {{"epoch", 2}});
        json extra;
        auto back = load_checkpoint(path, &extra);
        EXPECT_EQ(extra["epoch"], 2);
        EXPECT_EQ(back.config.to_json(), m.config.to_json());
        ASSERT_EQ(back.controllers.size(), m.controllers.size());
        for (std::size_t i = 0; i < m.controllers.size(); ++i) {
            EXPECT_EQ(back.controllers[i]->state(), m.controllers[i]->state()) << cfg;
            EXPECT_EQ(back.controllers[i]->statistics(), m.controllers[i]->statistics()) << cfg;
        }
        const Tensor x = subset(f.data.validation, 0, 40).inputs;
        EXPECT_LE(max_abs_diff(run_graph(back.graph, x).values(), run_graph(m.graph, x).values()), 1e-9) << cfg;
        // the restored schedule continues exactly like the original
        scheduler_epoch_step(m.controllers, 0.5);
        scheduler_epoch_step(back.controllers, 0.5);
        for (std::size_t i = 0; i < m.controllers.size(); ++i)
            EXPECT_EQ(back.controllers[i]->statistics(), m.controllers[i]->statistics()) << cfg;
        EXPECT_EQ(run_graph(back.graph, x).values(), run_graph(m.graph, x).values()) << cfg;
    }
    const auto exported = temp_path("not_a_checkpoint");
    auto m = compress(f, json::object());
    export_model(m, exported);
    EXPECT_THROW(load_checkpoint(exported), FormatError);
}
