#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ck/graph.hpp"
#include "json.hpp"

namespace ck {

inline constexpr int kModelFormatVersion = 1;
inline constexpr const char* kModelFormatName = "compresskit-model";

/// A model as a human-readable JSON manifest plus a little-endian float64
/// weight blob. Layout is documented in docs/model_format.md.
struct SerializedModel {
    std::string manifest;
    std::vector<std::uint8_t> blob;
};

/// `metadata` is stored verbatim under the manifest's "metadata" key.
SerializedModel serialize_model(const ModelGraph& graph, const nlohmann::json& metadata = nlohmann::json::object());
ModelGraph deserialize_model(const SerializedModel& model, nlohmann::json* metadata = nullptr);

/// Writes `path` (manifest) and `path` + ".bin" (blob).
void save_model(const ModelGraph& graph, const std::filesystem::path& path,
                const nlohmann::json& metadata = nlohmann::json::object());
ModelGraph load_model(const std::filesystem::path& path, nlohmann::json* metadata = nullptr);

nlohmann::json attrs_to_json(const LayerAttrs& attrs);
LayerAttrs attrs_from_json(LayerKind kind, const nlohmann::json& j);

} // namespace ck
