#pragma once

#include <vector>

#include "ck/tensor.hpp"

namespace ck {

/// One minibatch: inputs [N, ...] and N integer class labels.
struct DataBatch {
    Tensor inputs;
    std::vector<int> labels;
};

inline std::vector<Tensor> batch_inputs(const std::vector<DataBatch>& batches) {
    std::vector<Tensor> out;
    out.reserve(batches.size());
    for (const auto& b : batches) out.push_back(b.inputs);
    return out;
}

} // namespace ck
