#pragma once

// Helpers shared by the unit tests and the acceptance runner: random data,
// central finite differences and a zoo of small graphs.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ck/graph.hpp"
#include "ck/ops.hpp"
#include "ck/rng.hpp"
#include "ck/tensor.hpp"

namespace ck::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor(shape, std::move(v));
}

inline Tensor random_param(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = random_tensor(shape, rng, lo, hi);
    t.set_requires_grad(true);
    return t;
}

/// d f / d x_i by central differences, f evaluated without taping.
inline std::vector<double> numeric_grad(const std::function<double()>& f, Tensor& x, double h = 1e-6) {
    std::vector<double> g(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double saved = x[i];
        x[i] = saved + h;
        const double up = f();
        x[i] = saved - h;
        const double down = f();
        x[i] = saved;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = a.size() == b.size() ? 0.0 : INFINITY;
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

/// Sum of out * probe for a fixed random probe, as a generic scalar loss.
inline Tensor probe_loss(const Tensor& out, const Tensor& probe) { return sum(mul(out, probe)); }

struct NamedGraph {
    std::string name;
    ModelGraph graph;
};

inline void randomize_batchnorm(ModelGraph& g, Rng& rng) {
    for (auto& n : g.nodes()) {
        if (n.kind != LayerKind::BatchNorm) continue;
        for (auto& p : n.params) {
            if (p.name == "running_var")
                for (auto& v : p.value.data()) v = rng.uniform(0.5, 2.0);
            else
                for (auto& v : p.value.data()) v = rng.uniform(-0.5, 0.5) + (p.name == "gamma" ? 1.0 : 0.0);
        }
    }
}

/// Small topologies with at least one prunable convolution each.
inline std::vector<NamedGraph> toy_graph_zoo(std::uint64_t seed) {
    Rng rng(seed);
    std::vector<NamedGraph> zoo;
    auto conv = [&](ModelGraph& g, const std::string& id, const std::string& in, std::size_t ci, std::size_t co,
                    std::size_t k = 3, std::size_t stride = 1, std::size_t pad = 1) {
        g.add(make_conv2d(id, in, {ci, co, k, stride, pad}, rng));
        // nonzero biases make masking mistakes visible
        for (auto& b : g.node(id).param("bias").data()) b = rng.uniform(-0.2, 0.2);
    };
    {
        ModelGraph g({2, 6, 6});
        conv(g, "c1", "input", 2, 6);
        conv(g, "c2", "c1", 6, 4);
        zoo.push_back({"conv_chain", std::move(g)});
    }
    {
        ModelGraph g({2, 6, 6});
        conv(g, "c1", "input", 2, 8);
        g.add(make_batchnorm("bn1", "c1", 8));
        g.add(make_relu("r1", "bn1"));
        conv(g, "c2", "r1", 8, 4);
        zoo.push_back({"conv_bn_relu_conv", std::move(g)});
    }
    {
        ModelGraph g({1, 8, 8});
        conv(g, "c1", "input", 1, 6);
        g.add(make_relu("r1", "c1"));
        g.add(make_maxpool("p1", "r1"));
        conv(g, "c2", "p1", 6, 5);
        g.add(make_relu("r2", "c2"));
        g.add(make_flatten("f", "r2"));
        g.add(make_linear("fc", "f", {5 * 4 * 4, 3}, rng));
        zoo.push_back({"conv_pool_conv_flatten_fc", std::move(g)});
    }
    {
        ModelGraph g({2, 4, 4});
        conv(g, "c1", "input", 2, 6);
        g.add(make_flatten("f", "c1"));
        g.add(make_linear("fc", "f", {6 * 16, 4}, rng));
        zoo.push_back({"conv_flatten_fc", std::move(g)});
    }
    {
        ModelGraph g({2, 6, 6});
        conv(g, "c1", "input", 2, 4);
        g.add(make_relu("r1", "c1"));
        conv(g, "c2", "r1", 4, 4);
        g.add(make_add("add", "c2", "r1"));
        conv(g, "c3", "add", 4, 3);
        zoo.push_back({"residual_identity", std::move(g)});
    }
    {
        ModelGraph g({2, 6, 6});
        conv(g, "c1", "input", 2, 6);
        g.add(make_batchnorm("bn1", "c1", 6));
        g.add(make_relu("r1", "bn1"));
        conv(g, "c2a", "r1", 6, 6);
        g.add(make_batchnorm("bn2", "c2a", 6));
        g.add(make_relu("r2", "bn2"));
        conv(g, "c2b", "r2", 6, 6);
        g.add(make_batchnorm("bn3", "c2b", 6));
        g.add(make_add("add", "bn3", "r1"));
        g.add(make_relu("r3", "add"));
        conv(g, "c3", "r3", 6, 4);
        zoo.push_back({"residual_block_bn", std::move(g)});
    }
    {
        ModelGraph g({2, 6, 6});
        conv(g, "a", "input", 2, 5);
        conv(g, "b", "input", 2, 5);
        g.add(make_add("add", "a", "b"));
        conv(g, "c", "add", 5, 3);
        zoo.push_back({"two_branch_add", std::move(g)});
    }
    {
        ModelGraph g({3, 8, 8});
        conv(g, "c1", "input", 3, 6, 3, 2, 1);
        conv(g, "c2", "c1", 6, 6, 1, 1, 0);
        g.add(make_relu("r2", "c2"));
        conv(g, "c3", "r2", 6, 4, 3, 1, 0);
        zoo.push_back({"strided_pointwise_chain", std::move(g)});
    }
    {
        ModelGraph g({2, 6, 6});
        conv(g, "c1", "input", 2, 6);
        g.add(make_relu("r1", "c1"));
        conv(g, "c2", "r1", 6, 4);
        conv(g, "c3", "r1", 6, 4);
        g.add(make_add("add", "c2", "c3"));
        g.add(make_flatten("f", "add"));
        g.add(make_linear("fc", "f", {4 * 36, 2}, rng));
        zoo.push_back({"fanout_add_fc", std::move(g)});
    }
    {
        ModelGraph g({1, 8, 8});
        conv(g, "c1", "input", 1, 8);
        g.add(make_batchnorm("bn1", "c1", 8));
        g.add(make_relu("r1", "bn1"));
        conv(g, "c2", "r1", 8, 8);
        g.add(make_batchnorm("bn2", "c2", 8));
        g.add(make_relu("r2", "bn2"));
        g.add(make_maxpool("p", "r2"));
        conv(g, "c3", "p", 8, 6);
        g.add(make_batchnorm("bn3", "c3", 6));
        g.add(make_relu("r3", "bn3"));
        g.add(make_maxpool("p2", "r3"));
        g.add(make_flatten("f", "p2"));
        g.add(make_linear("fc", "f", {6 * 4, 2}, rng));
        zoo.push_back({"small_cnn", std::move(g)});
    }
    {
        ModelGraph g({2, 5, 5});
        conv(g, "c1", "input", 2, 7, 3, 1, 1);
        g.add(make_relu("r1", "c1"));
        conv(g, "c2", "r1", 7, 5, 3, 1, 1);
        g.add(make_add("add", "c2", "c2"));
        conv(g, "c3", "add", 5, 2, 1, 1, 0);
        zoo.push_back({"self_add", std::move(g)});
    }
    for (auto& [name, g] : zoo) randomize_batchnorm(g, rng);
    return zoo;
}

/// Input batch [n, ...graph input].
inline Tensor random_batch(const ModelGraph& g, std::size_t n, Rng& rng) {
    Shape s{n};
    s.insert(s.end(), g.input_shape().begin(), g.input_shape().end());
    return random_tensor(s, rng);
}

} // namespace ck::testing
