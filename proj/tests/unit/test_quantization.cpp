#include <gtest/gtest.h>

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <set>

#include "ck/error.hpp"
#include "ck/quantization.hpp"
#include "support/test_support.hpp"

using namespace ck;
using ck::testing::random_tensor;

namespace {

// Scalar oracles written from the definitions, independent of the library.
std::int64_t pow2(int e) { return std::int64_t{1} << e; }

double oracle_round(double x) {
    std::fesetround(FE_TONEAREST);
    return std::nearbyint(x);
}

double oracle_symmetric(double r, double scale, std::int64_t q_min, std::int64_t q_max) {
    const double s = scale / static_cast<double>(q_max);
    const double v = std::min(std::max(r / s, static_cast<double>(q_min)), static_cast<double>(q_max));
    return s * oracle_round(v);
}

QuantizerParams symmetric(int bits, QuantRole role, double scale) {
    QuantizerParams p;
    p.mode = QuantMode::Symmetric;
    p.bits = bits;
    p.role = role;
    p.scale = Tensor::scalar(scale);
    return p;
}

QuantizerParams asymmetric(int bits, double lo, double hi) {
    QuantizerParams p;
    p.mode = QuantMode::Asymmetric;
    p.bits = bits;
    p.r_min = Tensor::scalar(lo);
    p.r_max = Tensor::scalar(hi);
    return p;
}

QuantizerParams random_quantizer(Rng& rng, std::size_t channels, std::optional<std::size_t> axis) {
    const int bits = std::array{2, 3, 4, 8}[rng.index(4)];
    QuantizerParams p;
    p.bits = bits;
    p.per_channel_axis = axis;
    if (rng.uniform() < 0.5) {
        p.mode = QuantMode::Symmetric;
        p.role = std::array{QuantRole::Weights, QuantRole::SignedActivation, QuantRole::UnsignedActivation}[rng.index(3)];
        p.scale = random_tensor({channels}, rng, 0.05, 3.0);
    } else {
        p.mode = QuantMode::Asymmetric;
        p.r_min = random_tensor({channels}, rng, -3.0, 0.5);
        p.r_max = random_tensor({channels}, rng, -0.5, 3.0);
        for (std::size_t c = 0; c < channels; ++c)
            if (p.r_max[c] <= p.r_min[c]) p.r_max[c] = p.r_min[c] + 0.5;
    }
    return p;
}

// Random quantizer with random data: per-tensor half of the time, per-channel along axis 0 otherwise.
std::pair<QuantizerParams, Tensor> random_case(Rng& rng) {
    const bool per_channel = rng.uniform() < 0.5;
    const std::size_t channels = per_channel ? 1 + rng.index(4) : 1;
    const Tensor r = random_tensor({channels, 1 + rng.index(6)}, rng, -4.0, 4.0);
    return {random_quantizer(rng, channels, per_channel ? std::optional<std::size_t>(0) : std::nullopt), r};
}

} // namespace

TEST(QuantRange, TableValuesForCommonWidths) {
    for (int b : {2, 4, 8}) {
        const auto w = quant_range_for(b, QuantRole::Weights);
        EXPECT_EQ(w.q_min, -pow2(b - 1) + 1);
        EXPECT_EQ(w.q_max, pow2(b - 1) - 1);
        const auto s = quant_range_for(b, QuantRole::SignedActivation);
        EXPECT_EQ(s.q_min, -pow2(b - 1));
        EXPECT_EQ(s.q_max, pow2(b - 1) - 1);
        const auto u = quant_range_for(b, QuantRole::UnsignedActivation);
        EXPECT_EQ(u.q_min, 0);
        EXPECT_EQ(u.q_max, pow2(b) - 1);
    }
    EXPECT_EQ(quant_range_for(8, QuantRole::Weights).q_min, -127);
    EXPECT_EQ(quant_range_for(8, QuantRole::UnsignedActivation).q_max, 255);
    EXPECT_EQ(quant_range_for(4, QuantRole::SignedActivation).q_min, -8);
    EXPECT_THROW(quant_range_for(1, QuantRole::Weights), ConfigError);
}

TEST(QuantRange, RoundHalfEven) {
    EXPECT_EQ(round_half_even(2.5), 2.0);
    EXPECT_EQ(round_half_even(3.5), 4.0);
    EXPECT_EQ(round_half_even(-2.5), -2.0);
    EXPECT_EQ(round_half_even(-0.4), 0.0);
    Rng rng(1);
    for (int i = 0; i < 10000; ++i) {
        const double x = rng.uniform(-300.0, 300.0);
        EXPECT_EQ(round_half_even(x), oracle_round(x));
    }
}

TEST(SymmetricQuant, WorkedValues) {
    const auto p = symmetric(8, QuantRole::Weights, 12.7);
    EXPECT_DOUBLE_EQ(fake_quant_symmetric(Tensor::scalar(0.25), p).item(), 0.2);
    EXPECT_DOUBLE_EQ(fake_quant_symmetric(Tensor::scalar(100.0), p).item(), 12.7);
    EXPECT_EQ(fake_quant_symmetric(Tensor::scalar(0.0), p).item(), 0.0);
    EXPECT_EQ(p.zero_point(0), 0);
    EXPECT_THROW(fake_quant_symmetric(Tensor::scalar(1.0), symmetric(8, QuantRole::Weights, 0.0)), Error);
}

TEST(SymmetricQuant, MatchesScalarOracle) {
    Rng rng(2);
    for (int i = 0; i < 2000; ++i) {
        const int bits = 2 + static_cast<int>(rng.index(7));
        const auto role = std::array{QuantRole::Weights, QuantRole::SignedActivation, QuantRole::UnsignedActivation}[rng.index(3)];
        const double scale = rng.uniform(0.01, 5.0);
        const Tensor r = random_tensor({8}, rng, -6.0, 6.0);
        const Tensor out = fake_quant_symmetric(r, symmetric(bits, role, scale));
        const auto range = quant_range_for(bits, role);
        for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(out[k], oracle_symmetric(r[k], scale, range.q_min, range.q_max));
    }
}

TEST(AsymmetricQuant, RangeTuningWorkedCases) {
    const auto t = tune_asymmetric_range(-1.0, 3.0, 8);
    EXPECT_EQ(t.zero_point, 64);
    EXPECT_EQ(t.r_max, 3.0);
    // h1 / t with t = (64 - 255) / 64
    EXPECT_DOUBLE_EQ(t.r_min, 3.0 / ((64.0 - 255.0) / 64.0));
    EXPECT_NEAR(t.r_min, -1.0052356, 1e-7);
    const double s = (t.r_max - t.r_min) / 255.0;
    EXPECT_NEAR(-t.r_min / s, 64.0, 1e-9);

    const auto a = tune_asymmetric_range(0.0, 1.0, 8);
    EXPECT_EQ(a.zero_point, 0);
    EXPECT_EQ(a.r_min, 0.0);
    EXPECT_EQ(a.r_max, 1.0);
    const auto b = tune_asymmetric_range(-1.0, 0.0, 8);
    EXPECT_EQ(b.zero_point, 255);
    EXPECT_EQ(b.r_min, -1.0);
    EXPECT_EQ(b.r_max, 0.0);
    const auto z = tune_asymmetric_range(0.0, 0.0, 8);
    EXPECT_EQ(z.r_min, 0.0);
    EXPECT_EQ(z.r_max, 1e-8);
}

TEST(AsymmetricQuant, TunedBoundaryAndClampValues) {
    const auto t = tune_asymmetric_range(-1.0, 3.0, 8);
    const auto p = asymmetric(8, t.r_min, t.r_max);
    EXPECT_NEAR(fake_quant_asymmetric(Tensor::scalar(3.0), p).item(), 3.0, 1e-12);
    EXPECT_NEAR(fake_quant_asymmetric(Tensor::scalar(-7.0), p).item(), t.r_min, 1e-12);
    EXPECT_EQ(fake_quant_asymmetric(Tensor::scalar(0.0), p).item(), 0.0);
    EXPECT_EQ(p.zero_point(0), 64);
    EXPECT_THROW(fake_quant_asymmetric(Tensor::scalar(0.0), asymmetric(8, 1.0, 1.0)), Error);
}

TEST(AsymmetricQuant, ZeroMapsToZeroAndZeroPointIsIntegral) {
    Rng rng(3);
    for (int i = 0; i < 10000; ++i) {
        const int bits = std::array{2, 4, 8}[rng.index(3)];
        double lo = rng.uniform(-5.0, 5.0), hi = rng.uniform(-5.0, 5.0);
        if (lo > hi) std::swap(lo, hi);
        const auto t = tune_asymmetric_range(lo, hi, bits);
        const double levels = static_cast<double>(pow2(bits) - 1);
        ASSERT_LE(t.r_min, 0.0);
        ASSERT_GE(t.r_max, 0.0);
        ASSERT_GE(t.zero_point, 0);
        ASSERT_LE(t.zero_point, pow2(bits) - 1);
        const double s = (t.r_max - t.r_min) / levels;
        ASSERT_NEAR(-t.r_min / s, static_cast<double>(t.zero_point), 1e-6);
        ASSERT_EQ(fake_quant(Tensor::scalar(0.0), asymmetric(bits, lo, hi)).item(), 0.0);
    }
}

TEST(FakeQuantInvariants, IdempotentMonotoneAndLevelBounded) {
    Rng rng(4);
    for (int i = 0; i < 10000; ++i) {
        auto [p, r] = random_case(rng);
        const Tensor once = fake_quant(r, p);
        const Tensor twice = fake_quant(once, p);
        ASSERT_EQ(once.values(), twice.values());
    }
    for (int i = 0; i < 10000; ++i) {
        const QuantizerParams p = random_quantizer(rng, 1, std::nullopt);
        std::vector<double> xs(64);
        for (auto& x : xs) x = rng.uniform(-5.0, 5.0);
        std::sort(xs.begin(), xs.end());
        const Tensor out = fake_quant(Tensor({64}, xs), p);
        for (std::size_t k = 1; k < 64; ++k) ASSERT_LE(out[k - 1], out[k]);
        const std::set<double> distinct(out.values().begin(), out.values().end());
        const auto range = p.range();
        ASSERT_LE(static_cast<std::int64_t>(distinct.size()), range.q_max - range.q_min + 1);
    }
}

TEST(FakeQuantInvariants, PerChannelActsSliceWise) {
    Rng rng(5);
    QuantizerParams p = symmetric(4, QuantRole::Weights, 1.0);
    p.per_channel_axis = 0;
    p.scale = Tensor::vector({0.5, 2.0, 4.0});
    const Tensor w = random_tensor({3, 2, 2, 2}, rng, -3.0, 3.0);
    const Tensor out = fake_quant(w, p);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t k = 0; k < 8; ++k)
            EXPECT_EQ(out[c * 8 + k], oracle_symmetric(w[c * 8 + k], p.scale[c], -7, 7));
    p.scale = Tensor::vector({0.5, 2.0});
    EXPECT_THROW(fake_quant(w, p), ShapeError);
}

TEST(FakeQuantGradients, ClampMaskAndBoundaryCases) {
    const auto p = symmetric(8, QuantRole::Weights, 12.7);
    // on-grid, in range
    const Tensor on_grid = Tensor::vector({0.1, -0.3, 1.2});
    const std::vector<double> up{1.0, -2.0, 0.5};
    auto g = fake_quant_backward(up, on_grid, p);
    EXPECT_NEAR(g.grad_scale[0], 0.0, 1e-12);
    EXPECT_EQ(g.grad_r, up);
    // all above range
    g = fake_quant_backward(up, Tensor::vector({20.0, 30.0, 13.0}), p);
    EXPECT_DOUBLE_EQ(g.grad_scale[0], -0.5);
    EXPECT_EQ(g.grad_r, (std::vector<double>{0, 0, 0}));
    // below range contributes q_min / q_max = -1 for weights
    const std::vector<double> two{2.0};
    g = fake_quant_backward(two, Tensor::scalar(-50.0), p);
    EXPECT_DOUBLE_EQ(g.grad_scale[0], -2.0);
}

TEST(FakeQuantGradients, SymmetricScaleMatchesFiniteDifferences) {
    Rng rng(6);
    int checked = 0;
    while (checked < 300) {
        const int bits = std::array{2, 4, 8}[rng.index(3)];
        const auto role = std::array{QuantRole::Weights, QuantRole::SignedActivation, QuantRole::UnsignedActivation}[rng.index(3)];
        const auto p = symmetric(bits, role, rng.uniform(0.5, 3.0));
        const Tensor r = random_tensor({6}, rng, -4.0, 4.0);
        const double s = p.scale[0] / static_cast<double>(p.range().q_max);
        // keep every element at least s/10 away from a rounding jump and the clamp edges
        bool ok = true;
        for (double x : r.values()) {
            const double v = x / s;
            if (std::fabs(v - std::floor(v) - 0.5) < 0.1) ok = false;
            if (std::fabs(v - static_cast<double>(p.range().q_max)) < 0.1 ||
                std::fabs(v - static_cast<double>(p.range().q_min)) < 0.1)
                ok = false;
        }
        if (!ok) continue;
        const std::vector<double> up{1.0, -0.5, 2.0, 0.25, -1.5, 0.75};
        const auto g = fake_quant_backward(up, r, p);
        auto f = [&](double scale) {
            const Tensor out = fake_quant_symmetric(r, Tensor::scalar(scale), bits, role);
            double acc = 0.0;
            for (std::size_t k = 0; k < 6; ++k) acc += up[k] * out[k];
            return acc;
        };
        // straight-through relaxation: inside the range the rounding residual is frozen at the base point
        const double q_min = static_cast<double>(p.range().q_min), q_max = static_cast<double>(p.range().q_max);
        std::vector<double> residual(6);
        for (std::size_t k = 0; k < 6; ++k) residual[k] = oracle_round(r[k] / s) - r[k] / s;
        auto relaxed = [&](double scale) {
            const double step = scale / q_max;
            double acc = 0.0;
            for (std::size_t k = 0; k < 6; ++k) {
                const double v = r[k] / step;
                const double out = v > q_max ? step * q_max : v < q_min ? step * q_min : r[k] + step * residual[k];
                acc += up[k] * out;
            }
            return acc;
        };
        const double h = 1e-6;
        const double fd = (relaxed(p.scale[0] + h) - relaxed(p.scale[0] - h)) / (2 * h);
        // the unrelaxed forward differs from the relaxed one only through the frozen residual
        const double fd_true = (f(p.scale[0] + h) - f(p.scale[0] - h)) / (2 * h);
        double through_v = 0.0;
        for (std::size_t k = 0; k < 6; ++k)
            if (r[k] / s >= q_min && r[k] / s <= q_max) through_v += up[k] * r[k] / p.scale[0];
        ASSERT_NEAR(fd_true - through_v, fd, 1e-4);
        ASSERT_NEAR(g.grad_scale[0], fd, 1e-4);

        // the tape agrees with the explicit backward
        Tensor scale = Tensor::scalar(p.scale[0]);
        scale.set_requires_grad(true);
        Tensor rr = r.clone();
        rr.set_requires_grad(true);
        backward(sum(mul(fake_quant_symmetric(rr, scale, bits, role), Tensor({6}, up))));
        ASSERT_NEAR(scale.grad()[0], g.grad_scale[0], 1e-12);
        for (std::size_t k = 0; k < 6; ++k) ASSERT_EQ(rr.grad()[k], g.grad_r[k]);
        ++checked;
    }
}

TEST(FakeQuantGradients, AsymmetricRangeMatchesFiniteDifferences) {
    Rng rng(7);
    int checked = 0;
    while (checked < 300) {
        const int bits = std::array{4, 8}[rng.index(2)];
        const auto t = tune_asymmetric_range(rng.uniform(-2.0, -0.2), rng.uniform(0.2, 2.0), bits);
        const auto p = asymmetric(bits, t.r_min, t.r_max);
        const Tensor r = random_tensor({6}, rng, -2.5, 2.5);
        const double levels = static_cast<double>(pow2(bits) - 1);
        const double s = (t.r_max - t.r_min) / levels;
        bool ok = true;
        for (double x : r.values()) {
            const double w = std::clamp(x, t.r_min, t.r_max) / s + static_cast<double>(t.zero_point);
            if (std::fabs(w - std::floor(w) - 0.5) < 0.1) ok = false;
            if (std::fabs(x - t.r_min) < s / 10 || std::fabs(x - t.r_max) < s / 10) ok = false;
        }
        if (!ok) continue;
        const std::vector<double> up{0.5, -1.0, 1.5, 2.0, -0.25, 1.0};
        const auto g = fake_quant_backward(up, r, p);
        auto f = [&](double lo, double hi) {
            const Tensor out = fake_quant_asymmetric(r, Tensor::scalar(lo), Tensor::scalar(hi), bits);
            double acc = 0.0;
            for (std::size_t k = 0; k < 6; ++k) acc += up[k] * out[k];
            return acc;
        };
        std::vector<double> residual(6);
        for (std::size_t k = 0; k < 6; ++k) {
            const double w = std::clamp(r[k], t.r_min, t.r_max) / s + static_cast<double>(t.zero_point);
            residual[k] = oracle_round(w) - w;
        }
        auto relaxed = [&](double lo, double hi) {
            const double step = (hi - lo) / levels;
            double acc = 0.0;
            for (std::size_t k = 0; k < 6; ++k) acc += up[k] * (std::clamp(r[k], lo, hi) + step * residual[k]);
            return acc;
        };
        const double h = 1e-7;
        ASSERT_NEAR(g.grad_r_min[0], (relaxed(t.r_min + h, t.r_max) - relaxed(t.r_min - h, t.r_max)) / (2 * h), 1e-4);
        ASSERT_NEAR(g.grad_r_max[0], (relaxed(t.r_min, t.r_max + h) - relaxed(t.r_min, t.r_max - h)) / (2 * h), 1e-4);
        // and the unrelaxed forward agrees with the relaxed one at the base point
        ASSERT_NEAR(f(t.r_min, t.r_max), relaxed(t.r_min, t.r_max), 1e-9);
        for (std::size_t k = 0; k < 6; ++k) {
            const bool inside = r[k] >= t.r_min && r[k] <= t.r_max;
            ASSERT_EQ(g.grad_r[k], inside ? up[k] : 0.0);
        }
        ++checked;
    }
}

TEST(QuantizerInsertion, FusionPatternsAndInput) {
    Rng rng(8);
    {
        ModelGraph g({1, 4, 4});
        g.add(make_conv2d("conv", "input", {1, 2, 3, 1, 1}, rng));
        g.add(make_batchnorm("bn", "conv", 2));
        g.add(make_relu("relu", "bn"));
        const auto qs = insert_quantizers(g, {});
        std::size_t weights = 0;
        std::vector<std::string> acts;
        for (const auto& q : qs) {
            if (q.is_weight)
                ++weights;
            else
                acts.push_back(q.layer);
        }
        EXPECT_EQ(weights, 1u);
        EXPECT_EQ(acts, (std::vector<std::string>{"input", "relu"}));
        for (const auto& q : qs)
            if (q.layer == "relu") { EXPECT_EQ(q.quantizer->params().role, QuantRole::UnsignedActivation); }
    }
    {
        ModelGraph g({1, 4, 4});
        g.add(make_conv2d("c1", "input", {1, 2, 3, 1, 1}, rng));
        g.add(make_conv2d("c2", "c1", {2, 2, 3, 1, 1}, rng));
        const auto qs = insert_quantizers(g, {});
        std::size_t weights = 0, acts = 0;
        for (const auto& q : qs) {
            if (q.is_weight) {
                ++weights;
                EXPECT_EQ(q.quantizer->params().role, QuantRole::Weights);
            } else if (q.layer != "input") {
                ++acts;
                EXPECT_EQ(q.quantizer->params().role, QuantRole::SignedActivation);
            }
        }
        EXPECT_EQ(weights, 2u);
        EXPECT_EQ(acts, 2u);
    }
}

TEST(QuantizerInsertion, InterfaceUnchanged) {
    Rng rng(9);
    for (auto& [name, g] : ck::testing::toy_graph_zoo(10)) {
        const Tensor x = ck::testing::random_batch(g, 2, rng);
        const Shape before = run_graph(g, x).shape();
        insert_quantizers(g, {QuantMode::Symmetric, 8, true});
        EXPECT_EQ(run_graph(g, x).shape(), before) << name;
    }
}

TEST(RangeInit, ConstantsWeightsAndDegenerateData) {
    Rng rng(11);
    ModelGraph g({2});
    g.add(make_relu("relu", "input"));
    auto qs = insert_quantizers(g, {});
    initialize_quantizer_ranges(g, qs, {Tensor({3, 2}, 5.0)}, {});
    for (const auto& q : qs) EXPECT_EQ(q.quantizer->params().scale[0], 5.0) << q.layer;

    ModelGraph z({2});
    z.add(make_relu("relu", "input"));
    auto zq = insert_quantizers(z, {});
    initialize_quantizer_ranges(z, zq, {Tensor({3, 2}, 0.0)}, {});
    for (const auto& q : zq) EXPECT_EQ(q.quantizer->params().scale[0], kMinQuantScale);
    EXPECT_THROW(initialize_quantizer_ranges(z, zq, {}, {}), ConfigError);

    FakeQuantize fq(asymmetric(8, -1.0, 1.0));
    const Tensor w({4}, std::vector<double>{-0.3, 0.1, 0.5, 0.9});
    fq.init_from(w);
    const auto t = tune_asymmetric_range(-0.3, 0.9, 8);
    EXPECT_EQ(fq.params().r_min[0], t.r_min);
    EXPECT_EQ(fq.params().r_max[0], t.r_max);
}

TEST(RangeInit, PerChannelWeightsUseSliceMaxima) {
    Rng rng(12);
    FakeQuantize fq(symmetric(8, QuantRole::Weights, 1.0));
    fq.params().per_channel_axis = 0;
    fq.params().scale = Tensor::ones({2});
    const Tensor w({2, 3}, std::vector<double>{0.1, -0.7, 0.2, 1.5, 0.0, -0.4});
    fq.init_from(w);
    EXPECT_EQ(fq.params().scale[0], 0.7);
    EXPECT_EQ(fq.params().scale[1], 1.5);
}
