#include "ck/transform.hpp"

#include <map>
#include <mutex>

#include "ck/error.hpp"

namespace ck {

void Transform::slice_channels(ChannelAxis, const std::vector<bool>&) {}

namespace {

struct Registry {
    std::mutex mutex;
    std::map<std::string, TransformFactory> factories;
};

Registry& registry() {
    static Registry r;
    return r;
}

} // namespace

void register_builtin_transforms();

void register_transform(const std::string& type, TransformFactory factory) {
    auto& r = registry();
    std::lock_guard lock(r.mutex);
    r.factories[type] = std::move(factory);
}

TransformPtr make_transform(const std::string& type, const nlohmann::json& attrs,
                            const std::vector<NamedTensor>& tensors) {
    static std::once_flag builtins;
    std::call_once(builtins, register_builtin_transforms);
    TransformFactory factory;
    {
        auto& r = registry();
        std::lock_guard lock(r.mutex);
        auto it = r.factories.find(type);
        if (it == r.factories.end()) throw FormatError("unknown transform type '" + type + "'");
        factory = it->second;
    }
    return factory(attrs, tensors);
}

} // namespace ck
