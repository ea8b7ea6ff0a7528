#include "ck/binarization.hpp"
#include "ck/error.hpp"
#include "ck/pruning.hpp"
#include "ck/quantization.hpp"
#include "ck/sparsity.hpp"
#include "ck/transform.hpp"

namespace ck {

namespace {

const Tensor* find_tensor(const std::vector<NamedTensor>& tensors, std::string_view name) {
    for (const auto& t : tensors)
        if (t.name == name) return &t.value;
    return nullptr;
}

TransformPtr make_fake_quantize(const nlohmann::json& attrs, const std::vector<NamedTensor>& tensors) {
    QuantizerParams p;
    p.mode = quant_mode_from_string(attrs.at("mode").get<std::string>());
    p.bits = attrs.at("bits").get<int>();
    p.role = quant_role_from_string(attrs.at("role").get<std::string>());
    if (attrs.contains("per_channel_axis") && !attrs.at("per_channel_axis").is_null())
        p.per_channel_axis = attrs.at("per_channel_axis").get<std::size_t>();
    if (const auto* t = find_tensor(tensors, "scale")) p.scale = t->clone();
    if (const auto* t = find_tensor(tensors, "r_min")) p.r_min = t->clone();
    if (const auto* t = find_tensor(tensors, "r_max")) p.r_max = t->clone();
    auto q = std::make_shared<FakeQuantize>(std::move(p));
    q->set_enabled(attrs.value("enabled", true));
    return q;
}

Tensor required_tensor(const std::vector<NamedTensor>& tensors, std::string_view name, std::string_view type) {
    const auto* t = find_tensor(tensors, name);
    if (!t) throw FormatError(std::string(type) + " hook is missing tensor '" + std::string(name) + "'");
    return t->clone();
}

TransformPtr make_weight_binarize(const nlohmann::json& attrs, const std::vector<NamedTensor>&) {
    auto w = std::make_shared<WeightBinarize>(weight_binarization_from_string(attrs.at("scheme").get<std::string>()));
    w->set_enabled(attrs.value("enabled", true));
    return w;
}

TransformPtr make_activation_binarize(const nlohmann::json& attrs, const std::vector<NamedTensor>& tensors) {
    auto a = std::make_shared<ActivationBinarize>(required_tensor(tensors, "scale", "ActivationBinarize"),
                                                  required_tensor(tensors, "thresholds", "ActivationBinarize"));
    a->set_enabled(attrs.value("enabled", true));
    return a;
}

TransformPtr make_binary_mask(const nlohmann::json&, const std::vector<NamedTensor>& tensors) {
    return std::make_shared<BinaryMask>(required_tensor(tensors, "mask", "BinaryMask"));
}

TransformPtr make_rb_gate(const nlohmann::json&, const std::vector<NamedTensor>& tensors) {
    return std::make_shared<RBGate>(required_tensor(tensors, "scores", "RBGate"));
}

TransformPtr make_filter_mask(const nlohmann::json& attrs, const std::vector<NamedTensor>& tensors) {
    return std::make_shared<FilterMask>(required_tensor(tensors, "mask", "FilterMask"), attrs.value("frozen", false));
}

} // namespace

void register_builtin_transforms() {
    register_transform("FakeQuantize", make_fake_quantize);
    register_transform("WeightBinarize", make_weight_binarize);
    register_transform("ActivationBinarize", make_activation_binarize);
    register_transform("BinaryMask", make_binary_mask);
    register_transform("RBGate", make_rb_gate);
    register_transform("FilterMask", make_filter_mask);
}

} // namespace ck
