// compresskit: train, export, evaluate and inspect compressed toy models.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "ck/compression.hpp"
#include "ck/error.hpp"
#include "ck/serialization.hpp"
#include "ck/training.hpp"

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

struct TrainArgs {
    std::string config, model = "cnn-small", dataset = "bars", out;
    ck::TrainOptions options;
    bool seed_given = false;
};

std::uint64_t env_seed(std::uint64_t fallback) {
    const char* v = std::getenv("CK_SEED");
    if (!v || !*v) return fallback;
    char* end = nullptr;
    const auto seed = std::strtoull(v, &end, 10);
    if (*end != '\0') throw ck::ConfigError(std::string("CK_SEED must be an unsigned integer, got '") + v + "'");
    return seed;
}

int cmd_train(TrainArgs a) {
    if (!a.seed_given) a.options.seed = env_seed(a.options.seed);
    ck::CompressionConfig config;
    if (!a.config.empty()) config = ck::load_compression_config(a.config);
    const auto data = ck::resolve_dataset(a.dataset, a.options.seed);
    ck::Rng init_rng(a.options.seed);
    ck::ModelGraph graph = ck::make_preset(a.model, data.train.input_shape(), data.train.classes, init_rng);

    auto init = ck::make_batches(data.train, a.options.batch_size);
    init.resize(std::min(init.size(), config.init_batches));
    auto model = ck::create_compressed_model(std::move(graph), config, init);

    fs::create_directories(a.out);
    std::ofstream log(fs::path(a.out) / "metrics.log");
    if (!log) throw ck::ConfigError("cannot write to output directory '" + a.out + "'");
    const auto history = ck::train_model(model, data, a.options, [&](const ck::EpochMetrics& m) {
        const std::string line = m.to_json().dump();
        std::cout << line << '\n' << std::flush;
        log << line << '\n' << std::flush;
    });
    json extra = {{"train", a.options.to_json()}, {"model", a.model}, {"dataset", a.dataset}};
    if (!history.empty()) extra["final"] = history.back().to_json();
    const auto ckpt = fs::path(a.out) / "checkpoint.ckm";
    ck::save_checkpoint(model, ckpt, extra);
    spdlog::info("checkpoint written to {}", ckpt.string());
    return 0;
}

int cmd_export(const std::string& checkpoint, const std::string& out) {
    const auto model = ck::load_checkpoint(checkpoint);
    ck::export_model(model, out);
    const auto exported = ck::load_model(out);
    std::cout << json{{"parameters_before", model.graph.parameter_count()},
                      {"parameters_after", exported.parameter_count()},
                      {"path", out}}
                     .dump()
              << '\n';
    return 0;
}

int cmd_eval(const std::string& model_path, const std::string& dataset, std::uint64_t seed, const std::string& split) {
    const auto graph = ck::load_model(model_path);
    const auto data = ck::resolve_dataset(dataset, seed);
    const auto& part = split == "train" ? data.train : data.validation;
    const auto start = std::chrono::steady_clock::now();
    const auto r = ck::evaluate(graph, part);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << json{{"accuracy", r.accuracy},
                      {"loss", r.loss},
                      {"samples", r.samples},
                      {"samples_per_second", seconds > 0 ? static_cast<double>(r.samples) / seconds : 0.0}}
                     .dump()
              << '\n';
    return 0;
}

// Merges controller statistics into one row per weighted layer.
int cmd_stats(const std::string& checkpoint, bool as_json) {
    const auto model = ck::load_checkpoint(checkpoint);
    json all = json::array();
    for (const auto& c : model.controllers) all.push_back(c->statistics());
    if (as_json) {
        std::cout << json{{"parameters", model.graph.parameter_count()}, {"algorithms", all}}.dump(2) << '\n';
        return 0;
    }
    struct Row {
        std::string bits = "fp", sparsity = "-", pruned = "-", binarized = "-";
    };
    std::map<std::string, Row> rows;
    for (const auto& s : all) {
        const std::string algo = s.at("algorithm");
        if (algo == "quantization") {
            for (const auto& q : s.at("quantizers"))
                if (q.at("target") == "weight") rows[q.at("layer")].bits = std::to_string(q.at("bits").get<int>());
        } else if (algo == "magnitude_sparsity" || algo == "rb_sparsity") {
            for (const auto& l : s.at("layers")) {
                char buf[32];
                std::snprintf(buf, sizeof buf, "%.3f", l.at("sparsity").get<double>());
                rows[l.at("layer")].sparsity = buf;
            }
        } else if (algo == "filter_pruning") {
            for (const auto& l : s.at("layers"))
                rows[l.at("layer")].pruned = std::to_string(l.at("pruned").get<std::size_t>()) + "/" +
                                             std::to_string(l.at("filters").get<std::size_t>());
        } else if (algo == "binarization") {
            for (const auto& l : s.at("layers")) rows[l.at("layer")].binarized = l.at("scheme");
        }
    }
    std::printf("%-12s %-16s %10s %6s %9s %8s %9s\n", "layer", "kind", "params", "bits", "sparsity", "pruned", "binarized");
    for (const auto& n : model.graph.nodes()) {
        if (n.kind != ck::LayerKind::Conv2D && n.kind != ck::LayerKind::FullyConnected) continue;
        std::size_t count = 0;
        for (const auto& p : n.params) count += p.value.numel();
        const Row r = rows.count(n.id) ? rows.at(n.id) : Row{};
        std::printf("%-12s %-16s %10zu %6s %9s %8s %9s\n", n.id.c_str(), std::string(ck::to_string(n.kind)).c_str(), count,
                    r.bits.c_str(), r.sparsity.c_str(), r.pruned.c_str(), r.binarized.c_str());
    }
    std::printf("total parameters: %zu\n", model.graph.parameter_count());
    for (const auto& s : all) {
        const std::string algo = s.at("algorithm");
        if (algo == "magnitude_sparsity" || algo == "rb_sparsity")
            std::printf("%s: sparsity %.4f (scheduled %.4f)\n", algo.c_str(), s.at("sparsity").get<double>(),
                        s.at("scheduled_level").get<double>());
        else if (algo == "filter_pruning")
            std::printf("filter_pruning: rate %.3f, %s\n", s.at("pruning_rate").get<double>(),
                        s.at("frozen").get<bool>() ? "frozen" : "not frozen");
        else if (algo == "binarization")
            std::printf("binarization: stage %d\n", s.at("stage").get<int>());
        else if (algo == "quantization" && !s.at("mixed_precision").is_null())
            std::printf("mixed precision: compression ratio %.4f\n",
                        s.at("mixed_precision").at("compression_ratio").get<double>());
    }
    return 0;
}

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("ck");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::warn);
    if (const char* level = std::getenv("CK_LOG_LEVEL"); level && *level) {
        const auto parsed = spdlog::level::from_str(level);
        if (parsed == spdlog::level::off && std::string(level) != "off")
            spdlog::warn("unknown CK_LOG_LEVEL '{}', keeping 'warn'", level);
        else
            spdlog::set_level(parsed);
    }
}

} // namespace

int main(int argc, char** argv) {
    setup_logging();
    CLI::App app{"Train, compress, export and evaluate small models"};
    app.require_subcommand(1);

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Fine-tune a model under a compression config");
    t->add_option("--config,-c", train.config, "Compression config (JSON); omit for an uncompressed run");
    t->add_option("--model,-m", train.model, "Model preset")
        ->check(CLI::IsMember(ck::preset_names()))
        ->capture_default_str();
    t->add_option("--dataset,-d", train.dataset, "blobs, bars or a CSV path")->capture_default_str();
    t->add_option("--epochs,-e", train.options.epochs)->capture_default_str();
    auto* seed_opt = t->add_option("--seed,-s", train.options.seed, "Seed (default from CK_SEED, else 0)");
    t->add_option("--batch-size", train.options.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
    t->add_option("--lr", train.options.lr)->capture_default_str();
    t->add_option("--momentum", train.options.momentum)->capture_default_str();
    t->add_option("--weight-decay", train.options.weight_decay)->capture_default_str();
    t->add_option("--out,-o", train.out, "Output directory")->required();

    std::string ckpt, out;
    auto* e = app.add_subcommand("export", "Write the inference model of a checkpoint");
    e->add_option("--checkpoint", ckpt)->required();
    e->add_option("--out,-o", out)->required();

    std::string model_path, dataset = "bars", split = "validation";
    std::uint64_t eval_seed = 0;
    auto* v = app.add_subcommand("eval", "Report accuracy and throughput of a model file");
    v->add_option("--model,-m", model_path)->required();
    v->add_option("--dataset,-d", dataset)->capture_default_str();
    auto* eval_seed_opt = v->add_option("--seed,-s", eval_seed, "Dataset seed (default from CK_SEED, else 0)");
    v->add_option("--split", split)->check(CLI::IsMember({"train", "validation"}))->capture_default_str();

    std::string stats_ckpt;
    bool stats_json = false;
    auto* st = app.add_subcommand("stats", "Print per-layer compression statistics of a checkpoint");
    st->add_option("--checkpoint", stats_ckpt)->required();
    st->add_flag("--json", stats_json, "Print the raw statistics as JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        app.exit(ex);
        return kExitData;
    }

    try {
        if (t->parsed()) {
            train.seed_given = seed_opt->count() > 0;
            return cmd_train(train);
        }
        if (e->parsed()) return cmd_export(ckpt, out);
        if (v->parsed()) return cmd_eval(model_path, dataset, eval_seed_opt->count() ? eval_seed : env_seed(0), split);
        if (st->parsed()) return cmd_stats(stats_ckpt, stats_json);
    } catch (const ck::NumericError& ex) {
        spdlog::error("{}", ex.what());
        return kExitNumeric;
    } catch (const ck::Error& ex) {
        spdlog::error("{}", ex.what());
        return kExitData;
    } catch (const std::exception& ex) {
        spdlog::error("{}", ex.what());
        return 1;
    }
    return 0;
}
