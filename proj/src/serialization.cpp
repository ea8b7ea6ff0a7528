#include "ck/serialization.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ck/error.hpp"

namespace ck {

using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "blob writer assumes a little-endian host");

struct BlobWriter {
    std::vector<std::uint8_t> bytes;

    json append(const std::string& name, const Tensor& t) {
        json entry = {{"name", name}, {"shape", t.shape()}, {"offset", bytes.size()}, {"count", t.numel()}};
        const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data().data());
        bytes.insert(bytes.end(), raw, raw + t.numel() * sizeof(double));
        return entry;
    }
};

Tensor read_tensor(const json& entry, const std::vector<std::uint8_t>& blob) {
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto count = entry.at("count").get<std::size_t>();
    if (count != shape_numel(shape))
        throw FormatError("param '" + entry.at("name").get<std::string>() + "': count does not match shape");
    if (offset + count * sizeof(double) > blob.size())
        throw FormatError("weight blob truncated: param '" + entry.at("name").get<std::string>() + "' needs bytes up to " +
                          std::to_string(offset + count * sizeof(double)) + ", blob has " + std::to_string(blob.size()));
    std::vector<double> values(count);
    std::memcpy(values.data(), blob.data() + offset, count * sizeof(double));
    return Tensor(shape, std::move(values));
}

std::uint32_t checksum(const std::vector<std::uint8_t>& blob) {
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, blob.data(), static_cast<uInt>(blob.size()));
    return static_cast<std::uint32_t>(crc);
}

json hook_point_to_json(const HookPoint& p) {
    json j = {{"node", p.node}, {"position", std::string(to_string(p.position))}};
    if (p.position == HookPosition::PreParam) j["param"] = p.param;
    if (p.position == HookPosition::PreInput) j["input_index"] = p.input_index;
    return j;
}

HookPoint hook_point_from_json(const json& j) {
    HookPoint p;
    p.node = j.at("node").get<std::string>();
    p.position = hook_position_from_string(j.at("position").get<std::string>());
    if (p.position == HookPosition::PreParam) p.param = j.at("param").get<std::string>();
    if (p.position == HookPosition::PreInput) p.input_index = j.at("input_index").get<std::size_t>();
    return p;
}

} // namespace

json attrs_to_json(const LayerAttrs& attrs) {
    return std::visit(
        [](const auto& a) -> json {
            using A = std::decay_t<decltype(a)>;
            if constexpr (std::is_same_v<A, Conv2dAttrs>)
                return {{"in_channels", a.in_channels}, {"out_channels", a.out_channels}, {"kernel", a.kernel},
                        {"stride", a.stride}, {"padding", a.padding}};
            else if constexpr (std::is_same_v<A, LinearAttrs>)
                return {{"in_features", a.in_features}, {"out_features", a.out_features}};
            else if constexpr (std::is_same_v<A, BatchNormAttrs>)
                return {{"channels", a.channels}, {"eps", a.eps}, {"momentum", a.momentum}};
            else if constexpr (std::is_same_v<A, PoolAttrs>)
                return {{"kernel", a.kernel}, {"stride", a.stride}};
            else
                return json::object();
        },
        attrs);
}

LayerAttrs attrs_from_json(LayerKind kind, const json& j) {
    switch (kind) {
    case LayerKind::Conv2D:
        return Conv2dAttrs{j.at("in_channels"), j.at("out_channels"), j.at("kernel"), j.at("stride"), j.at("padding")};
    case LayerKind::FullyConnected:
        return LinearAttrs{j.at("in_features"), j.at("out_features")};
    case LayerKind::BatchNorm:
        return BatchNormAttrs{j.at("channels"), j.at("eps"), j.at("momentum")};
    case LayerKind::MaxPool2D:
        return PoolAttrs{j.at("kernel"), j.at("stride")};
    default:
        return std::monostate{};
    }
}

SerializedModel serialize_model(const ModelGraph& graph, const json& metadata) {
    BlobWriter blob;
    json nodes = json::array();
    for (const auto& n : graph.nodes()) {
        json params = json::array();
        for (const auto& p : n.params) params.push_back(blob.append(p.name, p.value));
        nodes.push_back({{"id", n.id},
                         {"kind", std::string(to_string(n.kind))},
                         {"inputs", n.inputs},
                         {"attrs", attrs_to_json(n.attrs)},
                         {"params", std::move(params)}});
    }
    std::size_t index = 0;
    for (const auto& h : graph.hooks()) {
        json params = json::array();
        for (const auto& t : h.transform->tensors()) params.push_back(blob.append(t.name, t.value));
        nodes.push_back({{"id", "hook" + std::to_string(index++) + ":" + h.transform->type()},
                         {"kind", h.transform->type()},
                         {"attach", hook_point_to_json(h.point)},
                         {"attrs", h.transform->attrs()},
                         {"params", std::move(params)}});
    }
    json manifest = {{"format", kModelFormatName},
                     {"version", kModelFormatVersion},
                     {"input_shape", graph.input_shape()},
                     {"output", graph.nodes().empty() ? std::string() : graph.output()},
                     {"nodes", std::move(nodes)},
                     {"blob", {{"bytes", blob.bytes.size()}, {"crc32", checksum(blob.bytes)}}},
                     {"metadata", metadata}};
    return {manifest.dump(2) + "\n", std::move(blob.bytes)};
}

ModelGraph deserialize_model(const SerializedModel& model, json* metadata) {
    json manifest;
    try {
        manifest = json::parse(model.manifest);
    } catch (const json::exception& e) {
        throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
    }
    try {
        if (manifest.value("format", "") != kModelFormatName) throw FormatError("not a compresskit model manifest");
        const int version = manifest.at("version").get<int>();
        if (version != kModelFormatVersion)
            throw FormatError("unsupported model format version " + std::to_string(version) + " (expected " +
                              std::to_string(kModelFormatVersion) + ")");
        const auto expected_bytes = manifest.at("blob").at("bytes").get<std::size_t>();
        if (model.blob.size() < expected_bytes)
            throw FormatError("weight blob truncated: " + std::to_string(model.blob.size()) + " of " +
                              std::to_string(expected_bytes) + " bytes");
        if (model.blob.size() > expected_bytes) throw FormatError("weight blob has trailing bytes");
        if (checksum(model.blob) != manifest.at("blob").at("crc32").get<std::uint32_t>())
            throw FormatError("weight blob checksum mismatch");

        ModelGraph graph(manifest.at("input_shape").get<Shape>());
        std::vector<std::pair<HookPoint, TransformPtr>> hooks;
        for (const auto& jn : manifest.at("nodes")) {
            std::vector<NamedTensor> params;
            for (const auto& jp : jn.at("params")) params.push_back({jp.at("name").get<std::string>(), read_tensor(jp, model.blob)});
            const auto kind_name = jn.at("kind").get<std::string>();
            if (jn.contains("attach")) {
                hooks.emplace_back(hook_point_from_json(jn.at("attach")),
                                   make_transform(kind_name, jn.at("attrs"), params));
                continue;
            }
            NodeSpec spec;
            spec.id = jn.at("id").get<std::string>();
            spec.kind = layer_kind_from_string(kind_name);
            spec.attrs = attrs_from_json(spec.kind, jn.at("attrs"));
            spec.inputs = jn.at("inputs").get<std::vector<std::string>>();
            for (auto& p : params) {
                if (is_trainable_param(spec.kind, p.name)) p.value.set_requires_grad(true);
                spec.params.push_back(std::move(p));
            }
            graph.add(std::move(spec));
        }
        if (const auto out = manifest.at("output").get<std::string>(); !out.empty()) graph.set_output(out);
        for (auto& [point, transform] : hooks) graph.insert_hook(point, std::move(transform));
        if (metadata) *metadata = manifest.value("metadata", json::object());
        return graph;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed manifest: ") + e.what());
    }
}

void save_model(const ModelGraph& graph, const std::filesystem::path& path, const json& metadata) {
    const auto model = serialize_model(graph, metadata);
    std::ofstream manifest(path, std::ios::binary);
    std::ofstream blob(path.string() + ".bin", std::ios::binary);
    if (!manifest || !blob) throw ConfigError("cannot write model file '" + path.string() + "'");
    manifest << model.manifest;
    blob.write(reinterpret_cast<const char*>(model.blob.data()), static_cast<std::streamsize>(model.blob.size()));
    if (!manifest || !blob) throw ConfigError("failed writing model file '" + path.string() + "'");
}

ModelGraph load_model(const std::filesystem::path& path, json* metadata) {
    std::ifstream manifest(path, std::ios::binary);
    if (!manifest) throw ConfigError("cannot open model file '" + path.string() + "'");
    std::ifstream blob(path.string() + ".bin", std::ios::binary);
    if (!blob) throw FormatError("missing weight blob '" + path.string() + ".bin'");
    SerializedModel model;
    model.manifest.assign(std::istreambuf_iterator<char>(manifest), {});
    model.blob.assign(std::istreambuf_iterator<char>(blob), {});
    return deserialize_model(model, metadata);
}

} // namespace ck
