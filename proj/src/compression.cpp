#include "ck/compression.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <spdlog/spdlog.h>

#include "ck/binarization.hpp"
#include "ck/error.hpp"
#include "ck/mixed_precision.hpp"
#include "ck/ops.hpp"
#include "ck/pruning.hpp"
#include "ck/quantization.hpp"
#include "ck/serialization.hpp"
#include "ck/sparsity.hpp"

namespace ck {

using nlohmann::json;

Tensor CompressionController::loss() const { return Tensor::scalar(0.0); }

// ---------------------------------------------------------------------------
// Config parsing

namespace {

[[noreturn]] void bad(const std::string& path, const std::string& what) { throw ConfigError(path + ": " + what); }

void check_keys(const json& obj, const std::string& path, std::initializer_list<std::string_view> allowed) {
    if (!obj.is_object()) bad(path, "expected an object");
    for (const auto& [key, value] : obj.items())
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ConfigError("unknown config key '" + path + "." + key + "'");
}

double number(const json& obj, const char* key, const std::string& path, double fallback) {
    if (!obj.contains(key) || obj.at(key).is_null()) return fallback;
    if (!obj.at(key).is_number()) bad(path + "." + key, "expected a number");
    return obj.at(key).get<double>();
}

std::int64_t integer(const json& obj, const char* key, const std::string& path, std::int64_t fallback,
                     std::int64_t min_value = 0) {
    if (!obj.contains(key) || obj.at(key).is_null()) return fallback;
    const auto& v = obj.at(key);
    if (!v.is_number_integer()) bad(path + "." + key, "expected an integer");
    const auto i = v.get<std::int64_t>();
    if (i < min_value) bad(path + "." + key, "must be >= " + std::to_string(min_value));
    return i;
}

bool boolean(const json& obj, const char* key, const std::string& path, bool fallback) {
    if (!obj.contains(key) || obj.at(key).is_null()) return fallback;
    if (!obj.at(key).is_boolean()) bad(path + "." + key, "expected true or false");
    return obj.at(key).get<bool>();
}

std::string text(const json& obj, const char* key, const std::string& path, const std::string& fallback) {
    if (!obj.contains(key) || obj.at(key).is_null()) return fallback;
    if (!obj.at(key).is_string()) bad(path + "." + key, "expected a string");
    return obj.at(key).get<std::string>();
}

json string_list(const json& obj, const char* key, const std::string& path) {
    if (!obj.contains(key) || obj.at(key).is_null()) return nullptr;
    const auto& v = obj.at(key);
    if (!v.is_array()) bad(path + "." + key, "expected a list of strings");
    for (const auto& e : v)
        if (!e.is_string()) bad(path + "." + key, "expected a list of strings");
    return v;
}

json object_or_empty(const json& obj, const char* key, const std::string& path) {
    if (!obj.contains(key) || obj.at(key).is_null()) return json::object();
    if (!obj.at(key).is_object()) bad(path + "." + key, "expected an object");
    return obj.at(key);
}

// Re-raises domain validation failures with the section path attached.
template <class F>
void validated(const std::string& path, F&& check) {
    try {
        check();
    } catch (const ConfigError& e) {
        bad(path, e.what());
    }
}

json parse_sparsity_schedule(const json& j, const std::string& path) {
    check_keys(j, path, {"mode", "init", "target", "epochs", "power", "steps", "patience", "step", "min_delta"});
    json out = {{"mode", text(j, "mode", path, "polynomial")},
                {"init", number(j, "init", path, 0.0)},
                {"target", number(j, "target", path, 0.5)},
                {"epochs", integer(j, "epochs", path, 10)},
                {"power", number(j, "power", path, 1.0)},
                {"patience", integer(j, "patience", path, 1, 1)},
                {"step", number(j, "step", path, 0.05)},
                {"min_delta", number(j, "min_delta", path, 1e-3)}};
    json steps = json::array();
    if (j.contains("steps") && !j.at("steps").is_null()) {
        const auto& s = j.at("steps");
        if (!s.is_array()) bad(path + ".steps", "expected a list of [epoch, level] pairs");
        for (const auto& e : s) {
            if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number() || e[0].get<std::int64_t>() < 0)
                bad(path + ".steps", "expected a list of [epoch, level] pairs");
            steps.push_back(e);
        }
    }
    out["steps"] = steps;
    return out;
}

SparsityScheduleSpec sparsity_spec_from(const json& j) {
    SparsityScheduleSpec s;
    s.mode = schedule_mode_from_string(j.at("mode").get<std::string>());
    s.init = j.at("init");
    s.target = j.at("target");
    s.epochs = j.at("epochs");
    s.power = j.at("power");
    s.patience = j.at("patience");
    s.step = j.at("step");
    s.min_delta = j.at("min_delta");
    for (const auto& e : j.at("steps")) s.steps.emplace_back(e[0].get<std::size_t>(), e[1].get<double>());
    return s;
}

PruningScheduleSpec pruning_spec_from(const json& section) {
    const auto& s = section.at("scheduler");
    PruningScheduleSpec spec;
    spec.mode = pruning_scheduler_from_string(s.at("mode").get<std::string>());
    spec.target = section.at("pruning_rate");
    spec.init = s.at("init_rate");
    spec.warmup_epochs = s.at("warmup_epochs");
    spec.epochs = s.at("epochs");
    return spec;
}

std::string family_of(const std::string& algorithm) {
    if (algorithm == "magnitude_sparsity" || algorithm == "rb_sparsity") return "sparsity";
    return algorithm;
}

json parse_section(const json& j, const std::string& path, std::size_t global_batches, std::uint64_t seed) {
    if (!j.is_object()) bad(path, "expected an object");
    const std::string algorithm = text(j, "algorithm", path, "");
    if (algorithm.empty()) bad(path, "missing 'algorithm'");
    json out = {{"algorithm", algorithm}};

    if (algorithm == "quantization") {
        check_keys(j, path, {"algorithm", "mode", "bits", "per_channel", "init", "mixed_precision"});
        out["mode"] = text(j, "mode", path, "symmetric");
        out["bits"] = integer(j, "bits", path, 8);
        out["per_channel"] = boolean(j, "per_channel", path, false);
        const json init = object_or_empty(j, "init", path);
        check_keys(init, path + ".init", {"num_batches", "percentile"});
        out["init"] = {{"num_batches", integer(init, "num_batches", path + ".init", static_cast<std::int64_t>(global_batches), 1)},
                       {"percentile", init.contains("percentile") ? init.at("percentile") : json(nullptr)}};
        if (!out["init"]["percentile"].is_null()) {
            const double p = number(init, "percentile", path + ".init", 100.0);
            if (p <= 50.0 || p > 100.0) bad(path + ".init.percentile", "must be in (50, 100]");
        }
        out["mixed_precision"] = nullptr;
        if (j.contains("mixed_precision") && !j.at("mixed_precision").is_null()) {
            const auto& m = j.at("mixed_precision");
            const std::string mp = path + ".mixed_precision";
            check_keys(m, mp, {"candidate_bits", "ratio_threshold", "ratio_direction", "trace_samples", "seed"});
            json bits = json::array({4, 8});
            if (m.contains("candidate_bits")) {
                bits = m.at("candidate_bits");
                if (!bits.is_array() || bits.empty()) bad(mp + ".candidate_bits", "expected a non-empty list");
                for (const auto& b : bits)
                    if (!b.is_number_integer() || b.get<int>() < 2 || b.get<int>() > 8)
                        bad(mp + ".candidate_bits", "bit-widths must be integers in [2, 8]");
            }
            out["mixed_precision"] = {{"candidate_bits", bits},
                                      {"ratio_threshold", number(m, "ratio_threshold", mp, 1.0)},
                                      {"ratio_direction", text(m, "ratio_direction", mp, "at_least")},
                                      {"trace_samples", integer(m, "trace_samples", mp, 64, 1)},
                                      {"seed", integer(m, "seed", mp, static_cast<std::int64_t>(seed))}};
            validated(mp, [&] { ratio_direction_from_string(out["mixed_precision"]["ratio_direction"].get<std::string>()); });
        }
        validated(path, [&] {
            quant_mode_from_string(out["mode"].get<std::string>());
            quant_range_for(out["bits"].get<int>(), QuantRole::Weights);
        });
    } else if (algorithm == "binarization") {
        check_keys(j, path, {"algorithm", "weight_scheme", "stage_epochs", "allowlist", "denylist"});
        out["weight_scheme"] = text(j, "weight_scheme", path, "xnor");
        json stages = json::array({1, 1, 1, 1});
        if (j.contains("stage_epochs")) {
            stages = j.at("stage_epochs");
            if (!stages.is_array() || stages.size() != 4) bad(path + ".stage_epochs", "expected 4 epoch counts");
            for (const auto& s : stages)
                if (!s.is_number_integer() || s.get<std::int64_t>() < 0)
                    bad(path + ".stage_epochs", "epoch counts must be nonnegative integers");
        }
        out["stage_epochs"] = stages;
        out["allowlist"] = string_list(j, "allowlist", path);
        out["denylist"] = string_list(j, "denylist", path);
        validated(path, [&] { weight_binarization_from_string(out["weight_scheme"].get<std::string>()); });
    } else if (algorithm == "magnitude_sparsity" || algorithm == "rb_sparsity") {
        if (algorithm == "rb_sparsity")
            check_keys(j, path, {"algorithm", "schedule", "score_init", "regularization_weight", "density", "seed"});
        else
            check_keys(j, path, {"algorithm", "schedule"});
        out["schedule"] = parse_sparsity_schedule(object_or_empty(j, "schedule", path), path + ".schedule");
        validated(path + ".schedule", [&] { sparsity_spec_from(out["schedule"]).validate(); });
        if (algorithm == "rb_sparsity") {
            out["score_init"] = number(j, "score_init", path, 3.0);
            out["density"] = text(j, "density", path, "mask");
            out["seed"] = integer(j, "seed", path, static_cast<std::int64_t>(seed));
            if (out["density"] != "mask" && out["density"] != "expected")
                bad(path + ".density", "expected 'mask' or 'expected'");
            out["regularization_weight"] = j.contains("regularization_weight") ? j.at("regularization_weight") : json(nullptr);
            if (!out["regularization_weight"].is_null() && number(j, "regularization_weight", path, 0.0) < 0.0)
                bad(path + ".regularization_weight", "must be nonnegative");
        }
    } else if (algorithm == "filter_pruning") {
        check_keys(j, path, {"algorithm", "criterion", "pruning_rate", "scheduler", "exclude", "prune_last"});
        out["criterion"] = text(j, "criterion", path, "geometric_median");
        out["pruning_rate"] = number(j, "pruning_rate", path, 0.3);
        const json s = object_or_empty(j, "scheduler", path);
        const std::string sp = path + ".scheduler";
        check_keys(s, sp, {"mode", "warmup_epochs", "epochs", "init_rate"});
        out["scheduler"] = {{"mode", text(s, "mode", sp, "baseline")},
                            {"warmup_epochs", integer(s, "warmup_epochs", sp, 0)},
                            {"epochs", integer(s, "epochs", sp, 0)},
                            {"init_rate", number(s, "init_rate", sp, 0.0)}};
        out["exclude"] = string_list(j, "exclude", path);
        if (out["exclude"].is_null()) out["exclude"] = json::array();
        out["prune_last"] = boolean(j, "prune_last", path, false);
        validated(path, [&] {
            filter_criterion_from_string(out["criterion"].get<std::string>());
            pruning_spec_from(out).validate();
        });
    } else {
        bad(path + ".algorithm", "unknown algorithm '" + algorithm +
                                     "' (expected quantization, binarization, magnitude_sparsity, rb_sparsity or filter_pruning)");
    }
    return out;
}

} // namespace

CompressionConfig parse_compression_config(const json& j) {
    check_keys(j, "config", {"seed", "input_shape", "init", "compression"});
    CompressionConfig c;
    c.seed = static_cast<std::uint64_t>(integer(j, "seed", "config", 0));
    if (j.contains("input_shape") && !j.at("input_shape").is_null()) {
        const auto& s = j.at("input_shape");
        if (!s.is_array() || s.empty()) bad("config.input_shape", "expected a non-empty list of positive integers");
        Shape shape;
        for (const auto& d : s) {
            if (!d.is_number_integer() || d.get<std::int64_t>() < 1)
                bad("config.input_shape", "expected a non-empty list of positive integers");
            shape.push_back(d.get<std::size_t>());
        }
        c.input_shape = shape;
    }
    const json init = object_or_empty(j, "init", "config");
    check_keys(init, "config.init", {"num_batches"});
    c.init_batches = static_cast<std::size_t>(integer(init, "num_batches", "config.init", 1, 1));

    json sections = json::array();
    if (j.contains("compression") && !j.at("compression").is_null()) {
        sections = j.at("compression");
        if (sections.is_object()) sections = json::array({sections});
        if (!sections.is_array()) bad("config.compression", "expected a list of algorithm sections");
    }
    std::vector<std::string> families;
    for (std::size_t i = 0; i < sections.size(); ++i) {
        const std::string path = "config.compression[" + std::to_string(i) + "]";
        json section = parse_section(sections[i], path, c.init_batches, c.seed);
        const std::string family = family_of(section.at("algorithm"));
        if (std::find(families.begin(), families.end(), family) != families.end())
            bad(path, "a second '" + family + "' section is not allowed");
        families.push_back(family);
        c.sections.push_back(std::move(section));
    }
    const auto has = [&](const char* f) { return std::find(families.begin(), families.end(), f) != families.end(); };
    if (has("quantization") && has("binarization"))
        bad("config.compression", "binarization and quantization cannot be combined");
    return c;
}

CompressionConfig load_compression_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
    }
    return parse_compression_config(j);
}

json CompressionConfig::to_json() const {
    json j = {{"seed", seed}, {"init", {{"num_batches", init_batches}}}, {"compression", sections}};
    if (input_shape) j["input_shape"] = *input_shape;
    return j;
}

// ---------------------------------------------------------------------------
// Controllers

namespace {

template <class T>
std::vector<std::pair<HookPoint, std::shared_ptr<T>>> hooks_of_type(const ModelGraph& graph) {
    std::vector<std::pair<HookPoint, std::shared_ptr<T>>> out;
    for (const auto& h : graph.hooks())
        if (auto t = std::dynamic_pointer_cast<T>(h.transform)) out.emplace_back(h.point, t);
    return out;
}

json tensor_json(const Tensor& t) { return t.values(); }

class QuantizationController : public CompressionController {
public:
    QuantizationController(ModelGraph& graph, const json& section, const std::vector<DataBatch>* init_data) {
        settings_.mode = quant_mode_from_string(section.at("mode").get<std::string>());
        settings_.bits = section.at("bits");
        settings_.per_channel = section.at("per_channel");
        if (!init_data) {
            for (auto& [point, q] : hooks_of_type<FakeQuantize>(graph))
                quantizers_.push_back({point, point.node, point.position == HookPosition::PreParam, q});
            return;
        }
        quantizers_ = insert_quantizers(graph, settings_);
        RangeInitOptions options;
        options.num_batches = section.at("init").at("num_batches");
        if (!section.at("init").at("percentile").is_null()) options.percentile = section.at("init").at("percentile").get<double>();
        initialize_quantizer_ranges(graph, quantizers_, batch_inputs(*init_data), options);
        if (const auto& mp = section.at("mixed_precision"); !mp.is_null()) {
            MixedPrecisionOptions o;
            o.candidate_bits = mp.at("candidate_bits").get<std::vector<int>>();
            o.ratio_threshold = mp.at("ratio_threshold");
            o.direction = ratio_direction_from_string(mp.at("ratio_direction").get<std::string>());
            o.trace_samples = mp.at("trace_samples");
            o.seed = mp.at("seed");
            const auto plan = assign_mixed_precision(graph, quantizers_, settings_, init_data->front(), o);
            plan_ = {{"layers", plan.layers},
                     {"bits", plan.bits},
                     {"avg_traces", plan.avg_traces},
                     {"sensitivities", plan.sensitivities},
                     {"metric", plan.metric},
                     {"bit_complexity", plan.bit_complexity},
                     {"compression_ratio", plan.compression_ratio}};
        }
    }

    std::string name() const override { return "quantization"; }

    json statistics() const override {
        json list = json::array();
        std::size_t weights = 0;
        for (const auto& q : quantizers_) {
            const auto& p = q.quantizer->params();
            json e = {{"layer", q.layer},
                      {"target", q.is_weight ? "weight" : "activation"},
                      {"bits", p.bits},
                      {"mode", std::string(to_string(p.mode))},
                      {"role", std::string(to_string(p.role))},
                      {"per_channel", p.per_channel_axis.has_value()}};
            if (p.mode == QuantMode::Symmetric) {
                e["scale"] = tensor_json(p.scale);
            } else {
                e["r_min"] = tensor_json(p.r_min);
                e["r_max"] = tensor_json(p.r_max);
            }
            std::vector<std::int64_t> zp;
            for (std::size_t c = 0; c < p.channels(); ++c) zp.push_back(p.zero_point(c));
            e["zero_point"] = zp;
            weights += q.is_weight;
            list.push_back(std::move(e));
        }
        return {{"algorithm", name()},
                {"weight_quantizers", weights},
                {"activation_quantizers", quantizers_.size() - weights},
                {"quantizers", list},
                {"mixed_precision", plan_}};
    }

    json state() const override { return {{"mixed_precision", plan_}}; }
    void load_state(const json& s) override { plan_ = s.value("mixed_precision", json(nullptr)); }

private:
    QuantizationSettings settings_;
    std::vector<InsertedQuantizer> quantizers_;
    json plan_ = nullptr;
};

class BinarizationController : public CompressionController {
public:
    BinarizationController(ModelGraph& graph, const json& section, const std::vector<DataBatch>* init_data) {
        stage_epochs_ = section.at("stage_epochs").get<std::array<int, 4>>();
        if (!init_data) {
            std::map<std::string, BinarizedLayer> by_layer;
            for (auto& [point, w] : hooks_of_type<WeightBinarize>(graph)) by_layer[point.node].weights = w;
            for (auto& [point, a] : hooks_of_type<ActivationBinarize>(graph)) by_layer[point.node].activations = a;
            for (const auto& n : graph.nodes())
                if (auto it = by_layer.find(n.id); it != by_layer.end()) {
                    it->second.layer = n.id;
                    layers_.push_back(it->second);
                }
            apply_stage();
            return;
        }
        BinarizationSettings settings;
        settings.scheme = weight_binarization_from_string(section.at("weight_scheme").get<std::string>());
        if (!section.at("allowlist").is_null()) settings.allowlist = section.at("allowlist").get<std::vector<std::string>>();
        if (!section.at("denylist").is_null()) settings.denylist = section.at("denylist").get<std::vector<std::string>>();
        layers_ = apply_binarization(graph, settings);
        if (!layers_.empty()) {
            if (init_data->empty()) throw ConfigError("binarization initialization needs at least one data batch");
            for (auto& l : layers_) {
                l.weights->set_enabled(false);
                l.activations->set_enabled(false);
                l.activations->begin_calibration();
            }
            NoGradGuard no_grad;
            run_graph(graph, init_data->front().inputs, RunMode::Eval);
        }
        apply_stage();
    }

    std::string name() const override { return "binarization"; }

    void epoch_step(std::optional<double>) override {
        ++epoch_;
        apply_stage();
    }

    double lr_factor() const override { return stage().lr_factor; }
    bool weight_decay_enabled() const override { return stage().weight_decay; }

    json statistics() const override {
        const auto s = stage();
        json layers = json::array();
        for (const auto& l : layers_)
            layers.push_back({{"layer", l.layer},
                              {"scheme", std::string(to_string(l.weights->scheme()))},
                              {"activation_scale", l.activations->scale()[0]},
                              {"weights_enabled", l.weights->enabled()},
                              {"activations_enabled", l.activations->enabled()}});
        return {{"algorithm", name()},     {"epoch", epoch_},          {"stage", s.stage},
                {"activations", s.activations}, {"weights", s.weights}, {"lr_factor", s.lr_factor},
                {"weight_decay", s.weight_decay}, {"layers", layers}};
    }

    json state() const override { return {{"epoch", epoch_}}; }
    void load_state(const json& s) override {
        epoch_ = s.value("epoch", std::size_t{0});
        apply_stage();
    }

private:
    BinarizationStage stage() const { return binarization_stage_at(epoch_, stage_epochs_); }

    void apply_stage() {
        const auto s = stage();
        for (auto& l : layers_) {
            l.weights->set_enabled(s.weights);
            l.activations->set_enabled(s.activations);
        }
    }

    std::array<int, 4> stage_epochs_{};
    std::vector<BinarizedLayer> layers_;
    std::size_t epoch_ = 0;
};

// Shared schedule bookkeeping of both sparsity methods.
class SparsityControllerBase : public CompressionController {
public:
    explicit SparsityControllerBase(const json& section) : spec_(sparsity_spec_from(section.at("schedule"))) {
        level_ = sparsity_level_at_epoch(spec_, 0);
    }

    void epoch_step(std::optional<double> metric) override {
        if (metric) metrics_.push_back(*metric);
        ++epoch_;
        level_ = sparsity_level_at_epoch(spec_, epoch_, metrics_);
        on_level_change();
    }

    json state() const override { return {{"epoch", epoch_}, {"metrics", metrics_}, {"level", level_}}; }
    void load_state(const json& s) override {
        epoch_ = s.value("epoch", std::size_t{0});
        metrics_ = s.value("metrics", std::vector<double>{});
        level_ = s.value("level", sparsity_level_at_epoch(spec_, epoch_, metrics_));
    }

    double level() const { return level_; }

protected:
    virtual void on_level_change() {}

    SparsityScheduleSpec spec_;
    std::size_t epoch_ = 0;
    std::vector<double> metrics_;
    double level_ = 0.0;
};

class MagnitudeSparsityController : public SparsityControllerBase {
public:
    MagnitudeSparsityController(ModelGraph& graph, const json& section, bool attach) : SparsityControllerBase(section) {
        if (attach) {
            for (auto& [point, m] : hooks_of_type<BinaryMask>(graph))
                layers_.push_back({point.node, graph.node(point.node).param(point.param), m});
            return;
        }
        for (const auto& id : sparsifiable_layers(graph)) {
            const Tensor& w = graph.node(id).param("weight");
            auto mask = std::make_shared<BinaryMask>(Tensor::ones(w.shape()));
            graph.insert_hook(HookPoint::pre_param(id, "weight"), mask);
            layers_.push_back({id, w, mask});
        }
        on_level_change();
    }

    std::string name() const override { return "magnitude_sparsity"; }

    json statistics() const override {
        json layers = json::array();
        std::size_t zeros = 0, total = 0;
        for (const auto& l : layers_) {
            const auto& m = l.mask->mask();
            const auto z = static_cast<std::size_t>(std::count(m.values().begin(), m.values().end(), 0.0));
            zeros += z;
            total += m.numel();
            layers.push_back({{"layer", l.layer}, {"weights", m.numel()}, {"zeros", z},
                              {"sparsity", m.numel() ? static_cast<double>(z) / static_cast<double>(m.numel()) : 0.0}});
        }
        return {{"algorithm", name()},
                {"epoch", epoch_},
                {"scheduled_level", level_},
                {"threshold", threshold_},
                {"sparsity", total ? static_cast<double>(zeros) / static_cast<double>(total) : 0.0},
                {"layers", layers}};
    }

    json state() const override {
        json s = SparsityControllerBase::state();
        s["threshold"] = threshold_;
        return s;
    }
    void load_state(const json& s) override {
        SparsityControllerBase::load_state(s);
        threshold_ = s.value("threshold", 0.0);
    }

protected:
    void on_level_change() override {
        std::vector<Tensor> weights;
        for (const auto& l : layers_) weights.push_back(l.weight);
        const auto result = magnitude_threshold(weights, level_);
        threshold_ = result.threshold;
        for (std::size_t i = 0; i < layers_.size(); ++i)
            std::copy(result.masks[i].begin(), result.masks[i].end(), layers_[i].mask->mask().data().begin());
    }

private:
    struct Layer {
        std::string layer;
        Tensor weight;
        std::shared_ptr<BinaryMask> mask;
    };
    std::vector<Layer> layers_;
    double threshold_ = 0.0;
};

class RBSparsityController : public SparsityControllerBase {
public:
    RBSparsityController(ModelGraph& graph, const json& section, bool attach) : SparsityControllerBase(section) {
        if (attach) {
            for (auto& [point, g] : hooks_of_type<RBGate>(graph)) layers_.push_back({point.node, g});
        } else {
            const double init = section.at("score_init");
            for (const auto& id : sparsifiable_layers(graph)) {
                auto gate = std::make_shared<RBGate>(Tensor(graph.node(id).param("weight").shape(), init));
                graph.insert_hook(HookPoint::pre_param(id, "weight"), gate);
                layers_.push_back({id, gate});
            }
        }
        std::size_t count = 0;
        for (const auto& l : layers_) count += l.gate->scores().numel();
        // The regularizer averages over all gated weights, so each score's
        // gradient shrinks as 1/count; the default weight of 4 * count
        // cancels that.
        use_mask_density_ = section.value("density", "mask") == "mask";
        noise_ = Rng(section.value("seed", std::uint64_t{0}));
        weight_ = section.at("regularization_weight").is_null() ? 4.0 * static_cast<double>(count)
                                                                : section.at("regularization_weight").get<double>();
    }

    std::string name() const override { return "rb_sparsity"; }

    Tensor loss() const override {
        if (layers_.empty()) return Tensor::scalar(0.0);
        if (!use_mask_density_) return scale(rb_regularizer_loss(scores(), level_), weight_);
        // Value from the eval-mask density. The gradient flows through
        // sigmoid(s + logit(u)) with fresh noise, the same relaxation the
        // gates use, so scores do not move in lockstep.
        Tensor relaxed;
        std::size_t count = 0, on = 0;
        for (const auto& s : scores()) {
            std::vector<double> noise(s.numel());
            for (auto& v : noise) {
                const double u = noise_.uniform();
                v = std::log(u / (1.0 - u));
            }
            Tensor part = sum(sigmoid(add(s, Tensor(s.shape(), std::move(noise)))));
            relaxed = relaxed.defined() ? add(relaxed, part) : part;
            count += s.numel();
            for (double v : s.data()) on += v > 0.0;
        }
        relaxed = scale(relaxed, 1.0 / static_cast<double>(count));
        const double mask_density = static_cast<double>(on) / static_cast<double>(count);
        Tensor density = add_scalar(relaxed, mask_density - relaxed.item());
        Tensor gap = add_scalar(density, -(1.0 - level_));
        return scale(mul(gap, gap), weight_);
    }

    json statistics() const override {
        json layers = json::array();
        std::size_t zeros = 0, total = 0;
        for (const auto& l : layers_) {
            const auto mask = rb_eval_mask(l.gate->scores().data());
            const auto z = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 0.0));
            zeros += z;
            total += mask.size();
            layers.push_back({{"layer", l.layer}, {"weights", mask.size()}, {"zeros", z},
                              {"sparsity", mask.empty() ? 0.0 : static_cast<double>(z) / static_cast<double>(mask.size())}});
        }
        double prob = 0.0, smin = 0.0, smax = 0.0;
        for (const auto& l : layers_)
            for (double v : l.gate->scores().data()) {
                prob += 1.0 / (1.0 + std::exp(-v));
                smin = std::min(smin, v);
                smax = std::max(smax, v);
            }
        double reg = 0.0;
        if (!layers_.empty()) {
            NoGradGuard no_grad;
            reg = rb_regularizer_loss(scores(), level_).item();
        }
        return {{"algorithm", name()},
                {"epoch", epoch_},
                {"scheduled_level", level_},
                {"sparsity", total ? static_cast<double>(zeros) / static_cast<double>(total) : 0.0},
                {"regularizer", reg},
                {"expected_density", total ? prob / static_cast<double>(total) : 1.0},
                {"score_range", {smin, smax}},
                {"regularization_weight", weight_},
                {"density", use_mask_density_ ? "mask" : "expected"},
                {"layers", layers}};
    }

private:
    std::vector<Tensor> scores() const {
        std::vector<Tensor> out;
        for (const auto& l : layers_) out.push_back(l.gate->scores());
        return out;
    }

    struct Layer {
        std::string layer;
        std::shared_ptr<RBGate> gate;
    };
    std::vector<Layer> layers_;
    double weight_ = 1.0;
    bool use_mask_density_ = true;
    mutable Rng noise_;
};

class FilterPruningController : public CompressionController {
public:
    FilterPruningController(ModelGraph& graph, const json& section, bool attach)
        : spec_(pruning_spec_from(section)),
          criterion_(filter_criterion_from_string(section.at("criterion").get<std::string>())) {
        std::vector<std::string> convs;
        if (attach) {
            for (auto& [point, m] : hooks_of_type<FilterMask>(graph))
                if (point.position == HookPosition::PreParam && point.param == "weight") convs.push_back(point.node);
        } else {
            const auto candidates = pruning_candidates(graph, section.at("exclude").get<std::vector<std::string>>(),
                                                       section.at("prune_last"));
            const auto prunable = structurally_prunable(graph, candidates);
            for (const auto& id : candidates)
                if (prunable.count(id)) convs.push_back(id);
                else spdlog::info("filter pruning: '{}' skipped, its consumers cannot accept a pruned input", id);
        }
        for (const auto& id : convs) {
            Layer layer{id, {}, {}};
            auto bind = [&](const std::string& node, const std::string& param) {
                const HookPoint point = HookPoint::pre_param(node, param);
                std::shared_ptr<FilterMask> mask;
                for (const auto& t : graph.hooks_at(point))
                    if (auto m = std::dynamic_pointer_cast<FilterMask>(t)) mask = m;
                if (!mask && !attach) {
                    const std::size_t n = graph.node(id).as<Conv2dAttrs>().out_channels;
                    mask = std::make_shared<FilterMask>(Tensor::ones({n}));
                    graph.insert_hook(point, mask);
                }
                if (mask) layer.targets.push_back({graph.node(node).param(param), mask, {}});
            };
            bind(id, "weight");
            if (graph.node(id).has_param("bias")) bind(id, "bias");
            for (const auto& bn : following_batchnorms(graph, id)) {
                bind(bn, "gamma");
                bind(bn, "beta");
            }
            layers_.push_back(std::move(layer));
        }
        if (attach) {
            for (auto& l : layers_) l.keep = l.targets.front().mask->keep();
            frozen_ = !layers_.empty() && layers_.front().targets.front().mask->frozen();
            if (frozen_) take_snapshot();
        } else {
            apply_rate(pruning_rate_at_epoch(spec_, 0), true);
        }
    }

    std::string name() const override { return "filter_pruning"; }

    void epoch_step(std::optional<double>) override {
        ++epoch_;
        apply_rate(pruning_rate_at_epoch(spec_, epoch_), false);
    }

    void after_backward() override {
        if (!frozen_) return;
        for (auto& l : layers_)
            for (auto& t : l.targets) {
                auto g = t.param.grad();
                if (g.empty()) continue;
                const std::size_t inner = t.param.numel() / l.keep.size();
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (!l.keep[i / inner]) g[i] = 0.0;
            }
    }

    void after_optimizer_step() override {
        if (!frozen_) return;
        for (auto& l : layers_)
            for (auto& t : l.targets) {
                const std::size_t inner = t.param.numel() / l.keep.size();
                for (std::size_t i = 0; i < t.param.numel(); ++i)
                    if (!l.keep[i / inner]) t.param[i] = t.snapshot[i];
            }
    }

    json statistics() const override {
        json layers = json::array();
        for (const auto& l : layers_) {
            std::vector<std::size_t> pruned;
            for (std::size_t c = 0; c < l.keep.size(); ++c)
                if (!l.keep[c]) pruned.push_back(c);
            layers.push_back({{"layer", l.conv}, {"filters", l.keep.size()}, {"pruned", pruned.size()}, {"pruned_filters", pruned}});
        }
        return {{"algorithm", name()},
                {"epoch", epoch_},
                {"pruning_rate", rate_},
                {"frozen", frozen_},
                {"criterion", std::string(to_string(criterion_))},
                {"layers", layers}};
    }

    json state() const override { return {{"epoch", epoch_}, {"rate", rate_}, {"frozen", frozen_}}; }
    void load_state(const json& s) override {
        epoch_ = s.value("epoch", std::size_t{0});
        rate_ = s.value("rate", 0.0);
        frozen_ = s.value("frozen", false);
        for (auto& l : layers_)
            for (auto& t : l.targets) t.mask->set_frozen(frozen_);
        if (frozen_) take_snapshot();
    }

private:
    struct Target {
        Tensor param;
        std::shared_ptr<FilterMask> mask;
        std::vector<double> snapshot;
    };
    struct Layer {
        std::string conv;
        std::vector<Target> targets;  // weight first
        std::vector<bool> keep;
    };

    void apply_rate(PruningRate r, bool force) {
        if (force || r.rate != rate_) {
            for (auto& l : layers_) {
                const Tensor& w = l.targets.front().param;
                const auto scores = filter_importance(w, criterion_);
                if (!scores) {
                    spdlog::warn("filter pruning: geometric median undefined for single-filter layer '{}'", l.conv);
                    l.keep.assign(w.dim(0), true);
                } else {
                    l.keep = select_filters(*scores, r.rate);
                }
                for (auto& t : l.targets)
                    for (std::size_t c = 0; c < l.keep.size(); ++c) t.mask->mask()[c] = l.keep[c] ? 1.0 : 0.0;
            }
            rate_ = r.rate;
        }
        const bool newly_frozen = r.frozen && !frozen_;
        frozen_ = r.frozen;
        for (auto& l : layers_)
            for (auto& t : l.targets) t.mask->set_frozen(frozen_);
        if (newly_frozen || (frozen_ && force)) take_snapshot();
    }

    void take_snapshot() {
        for (auto& l : layers_)
            for (auto& t : l.targets) t.snapshot = t.param.values();
    }

    PruningScheduleSpec spec_;
    FilterCriterion criterion_;
    std::vector<Layer> layers_;
    std::size_t epoch_ = 0;
    double rate_ = 0.0;
    bool frozen_ = false;
};

ControllerPtr make_controller(ModelGraph& graph, const json& section, const std::vector<DataBatch>* init_data) {
    const std::string algorithm = section.at("algorithm");
    const bool attach = init_data == nullptr;
    if (algorithm == "quantization") return std::make_unique<QuantizationController>(graph, section, init_data);
    if (algorithm == "binarization") return std::make_unique<BinarizationController>(graph, section, init_data);
    if (algorithm == "magnitude_sparsity") return std::make_unique<MagnitudeSparsityController>(graph, section, attach);
    if (algorithm == "rb_sparsity") return std::make_unique<RBSparsityController>(graph, section, attach);
    if (algorithm == "filter_pruning") return std::make_unique<FilterPruningController>(graph, section, attach);
    throw ConfigError("unknown algorithm '" + algorithm + "'");
}

void check_signature(const ModelGraph& graph, const CompressionConfig& config) {
    if (config.input_shape && *config.input_shape != graph.input_shape())
        throw ConfigError("config input_shape " + shape_str(*config.input_shape) + " does not match the model input " +
                          shape_str(graph.input_shape()));
}

} // namespace

CompressedModel create_compressed_model(ModelGraph graph, const CompressionConfig& config,
                                        const std::vector<DataBatch>& init_data) {
    check_signature(graph, config);
    for (const auto& b : init_data) {
        const Shape& sig = graph.input_shape();
        if (b.inputs.rank() != sig.size() + 1 || !std::equal(sig.begin(), sig.end(), b.inputs.shape().begin() + 1))
            throw ShapeError("initialization batch " + shape_str(b.inputs.shape()) + " does not match model input " +
                             shape_str(sig));
    }
    CompressedModel model{std::move(graph), {}, config};
    for (const auto& section : config.sections)
        model.controllers.push_back(make_controller(model.graph, section, &init_data));
    return model;
}

CompressedModel restore_compressed_model(ModelGraph graph, const CompressionConfig& config, const json& states) {
    check_signature(graph, config);
    CompressedModel model{std::move(graph), {}, config};
    for (std::size_t i = 0; i < config.sections.size(); ++i) {
        model.controllers.push_back(make_controller(model.graph, config.sections[i], nullptr));
        if (states.is_array() && i < states.size()) model.controllers.back()->load_state(states[i]);
    }
    return model;
}

Tensor total_compression_loss(const std::vector<ControllerPtr>& controllers) {
    Tensor total = Tensor::scalar(0.0);
    for (const auto& c : controllers) total = add(total, c->loss());
    return total;
}

void scheduler_step(const std::vector<ControllerPtr>& controllers) {
    for (const auto& c : controllers) c->step();
}

void scheduler_epoch_step(const std::vector<ControllerPtr>& controllers, std::optional<double> metric) {
    for (const auto& c : controllers) c->epoch_step(metric);
}

ModelGraph export_graph(const ModelGraph& graph) {
    ModelGraph g = graph.clone();
    auto bake = [&](const HookPoint& point, const std::vector<double>& factor) {
        Tensor& p = g.node(point.node).param(point.param);
        const std::size_t inner = p.numel() / factor.size();
        for (std::size_t i = 0; i < p.numel(); ++i) p[i] *= factor[i / inner];
    };
    std::map<std::string, std::vector<bool>> filter_masks;
    for (const auto& h : g.hooks()) {
        if (h.point.position != HookPosition::PreParam) continue;
        if (auto m = std::dynamic_pointer_cast<BinaryMask>(h.transform)) {
            bake(h.point, m->mask().values());
        } else if (auto r = std::dynamic_pointer_cast<RBGate>(h.transform)) {
            bake(h.point, rb_eval_mask(r->scores().data()));
        } else if (auto f = std::dynamic_pointer_cast<FilterMask>(h.transform)) {
            bake(h.point, f->mask().values());
            if (h.point.param == "weight") filter_masks[h.point.node] = f->keep();
        }
    }
    g.remove_hooks([](const Hook& h) { return h.transform->family() == "sparsity"; });
    return strip_pruned_filters(g, filter_masks);
}

void export_model(const CompressedModel& model, const std::filesystem::path& path) {
    json meta = {{"kind", "exported"}, {"algorithms", json::array()}};
    for (const auto& c : model.controllers) meta["algorithms"].push_back(c->name());
    save_model(export_graph(model.graph), path, meta);
}

void save_checkpoint(const CompressedModel& model, const std::filesystem::path& path, const json& extra) {
    json states = json::array();
    for (const auto& c : model.controllers) states.push_back(c->state());
    save_model(model.graph, path,
               {{"kind", "checkpoint"}, {"config", model.config.to_json()}, {"controllers", states}, {"extra", extra}});
}

CompressedModel load_checkpoint(const std::filesystem::path& path, json* extra) {
    json meta;
    ModelGraph graph = load_model(path, &meta);
    if (meta.value("kind", "") != "checkpoint") throw FormatError("'" + path.string() + "' is not a checkpoint");
    if (extra) *extra = meta.value("extra", json::object());
    return restore_compressed_model(std::move(graph), parse_compression_config(meta.at("config")),
                                    meta.value("controllers", json::array()));
}

} // namespace ck
