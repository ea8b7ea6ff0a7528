#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ck/error.hpp"
#include "ck/sparsity.hpp"
#include "support/test_support.hpp"

using namespace ck;
using ck::testing::random_tensor;

namespace {

double sigmoid_of(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Sort-and-cut over explicitly normalized importances; stable order breaks ties.
std::vector<std::vector<double>> magnitude_oracle(const std::vector<Tensor>& ws, double level) {
    struct Entry {
        double importance;
        std::size_t layer, index;
    };
    std::vector<Entry> all;
    for (std::size_t l = 0; l < ws.size(); ++l) {
        double norm = 0.0;
        for (double v : ws[l].values()) norm += v * v;
        norm = std::sqrt(norm);
        for (std::size_t i = 0; i < ws[l].numel(); ++i) all.push_back({std::fabs(ws[l][i]) / norm, l, i});
    }
    std::stable_sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.importance < b.importance; });
    const auto k = static_cast<std::size_t>(std::llround(level * static_cast<double>(all.size())));
    std::vector<std::vector<double>> masks;
    for (const auto& w : ws) masks.emplace_back(w.numel(), 1.0);
    for (std::size_t j = 0; j < k; ++j) masks[all[j].layer][all[j].index] = 0.0;
    return masks;
}

SparsityScheduleSpec spec_of(ScheduleMode mode, double init, double target, std::size_t epochs) {
    SparsityScheduleSpec s;
    s.mode = mode;
    s.init = init;
    s.target = target;
    s.epochs = epochs;
    return s;
}

} // namespace

TEST(MagnitudeSparsity, WorkedExamples) {
    const Tensor w = Tensor::vector({0.1, -0.5, 0.2, 0.9});
    const auto half = magnitude_threshold({w}, 0.5);
    EXPECT_EQ(half.masks[0], (std::vector<double>{0, 1, 0, 1}));
    const auto none = magnitude_threshold({w}, 0.0);
    EXPECT_EQ(none.masks[0], (std::vector<double>{1, 1, 1, 1}));
    EXPECT_EQ(none.threshold, 0.0);
    EXPECT_THROW(magnitude_threshold({w}, 1.0), ConfigError);
}

TEST(MagnitudeSparsity, PerLayerNormalizationChangesGlobalOrder) {
    // raw magnitudes would prune all of layer a; normalized ones prune the small entry of each
    const Tensor a = Tensor::vector({0.01, 0.02});
    const Tensor b = Tensor::vector({1.0, 5.0});
    const auto m = magnitude_threshold({a, b}, 0.5);
    EXPECT_EQ(m.masks, magnitude_oracle({a, b}, 0.5));
    EXPECT_EQ(m.masks[0], (std::vector<double>{0, 1}));
    EXPECT_EQ(m.masks[1], (std::vector<double>{0, 1}));
}

TEST(MagnitudeSparsity, MatchesOracleAndHitsLevel) {
    Rng rng(1);
    for (int i = 0; i < 300; ++i) {
        std::vector<Tensor> ws;
        std::size_t total = 0;
        for (std::size_t l = 0, n = 1 + rng.index(4); l < n; ++l) {
            ws.push_back(random_tensor({1 + rng.index(30)}, rng, -rng.uniform(0.1, 3.0), rng.uniform(0.1, 3.0)));
            // occasional repeated values exercise tie breaking
            if (rng.uniform() < 0.3) ws.back()[0] = ws.back()[ws.back().numel() - 1];
            total += ws.back().numel();
        }
        const double level = rng.uniform(0.0, 0.99);
        const auto m = magnitude_threshold(ws, level);
        ASSERT_EQ(m.masks, magnitude_oracle(ws, level));
        double zeros = 0.0;
        for (const auto& mask : m.masks) zeros += static_cast<double>(std::count(mask.begin(), mask.end(), 0.0));
        ASSERT_LE(std::fabs(zeros / static_cast<double>(total) - level), 1.0 / static_cast<double>(total));
    }
}

TEST(MagnitudeSparsity, MaskIsIdempotent) {
    Rng rng(2);
    const Tensor w = random_tensor({3, 4}, rng);
    const auto m = magnitude_threshold({w}, 0.4);
    BinaryMask mask(Tensor(w.shape(), m.masks[0]));
    const Tensor once = mask.apply(w, {});
    EXPECT_EQ(mask.apply(once, {}).values(), once.values());
    // remasking the masked weights keeps the same zero set
    EXPECT_EQ(magnitude_threshold({once}, 0.4).masks[0], m.masks[0]);
}

TEST(SparsitySchedule, WorkedValues) {
    auto poly = spec_of(ScheduleMode::Polynomial, 0.0, 0.5, 10);
    poly.power = 1.0;
    EXPECT_DOUBLE_EQ(sparsity_level_at_epoch(poly, 5), 0.25);
    SparsityScheduleSpec multi = spec_of(ScheduleMode::Multistep, 0.0, 0.5, 10);
    multi.steps = {{0, 0.2}, {5, 0.5}};
    EXPECT_EQ(sparsity_level_at_epoch(multi, 4), 0.2);
    EXPECT_EQ(sparsity_level_at_epoch(multi, 5), 0.5);
    for (auto mode : {ScheduleMode::Polynomial, ScheduleMode::Exponential, ScheduleMode::Adaptive}) {
        const auto s = spec_of(mode, 0.1, 0.6, 4);
        for (std::size_t e : {4, 5, 100}) EXPECT_EQ(sparsity_level_at_epoch(s, e), 0.6);
    }
    EXPECT_EQ(sparsity_level_at_epoch(multi, 100), 0.5);
}

TEST(SparsitySchedule, PolynomialAndExponentialTrajectories) {
    auto poly = spec_of(ScheduleMode::Polynomial, 0.1, 0.7, 6);
    poly.power = 3.0;
    const auto expo = spec_of(ScheduleMode::Exponential, 0.1, 0.7, 6);
    for (std::size_t e = 0; e < 6; ++e) {
        const double x = static_cast<double>(e) / 6.0;
        EXPECT_NEAR(sparsity_level_at_epoch(poly, e), 0.1 + 0.6 * x * x * x, 1e-15);
        EXPECT_NEAR(sparsity_level_at_epoch(expo, e), 0.7 - 0.6 * std::exp(-5.0 * x), 1e-15);
    }
    EXPECT_EQ(sparsity_level_at_epoch(poly, 0), 0.1);
    EXPECT_EQ(sparsity_level_at_epoch(expo, 0), 0.1);
}

TEST(SparsitySchedule, AdaptiveRaisesLevelOnStalls) {
    auto s = spec_of(ScheduleMode::Adaptive, 0.0, 0.2, 100);
    s.patience = 2;
    s.step = 0.05;
    s.min_delta = 0.01;
    // improving, improving, stall, stall (+), stall, stall (+), improving
    const std::vector<double> losses{1.0, 0.8, 0.795, 0.794, 0.80, 0.81, 0.5};
    const std::vector<double> expected{0.0, 0.0, 0.0, 0.0, 0.05, 0.05, 0.1, 0.1};
    for (std::size_t e = 0; e <= losses.size(); ++e)
        EXPECT_NEAR(sparsity_level_at_epoch(s, e, losses), expected[e], 1e-15) << "epoch " << e;
    // the level never passes the target
    const std::vector<double> flat(50, 1.0);
    EXPECT_EQ(sparsity_level_at_epoch(s, 50, flat), 0.2);
}

TEST(SparsitySchedule, MonotoneAndBoundedForRandomSpecs) {
    Rng rng(3);
    for (int i = 0; i < 500; ++i) {
        const auto mode = std::array{ScheduleMode::Polynomial, ScheduleMode::Exponential, ScheduleMode::Multistep}[rng.index(3)];
        const double init = rng.uniform(0.0, 0.5);
        auto s = spec_of(mode, init, rng.uniform(init, 0.95), 1 + rng.index(12));
        s.power = rng.uniform(0.3, 4.0);
        if (mode == ScheduleMode::Multistep) {
            double level = init;
            std::size_t e = 0;
            for (int k = 0; k < 3; ++k) {
                e += 1 + rng.index(3);
                level = rng.uniform(level, s.target);
                s.steps.emplace_back(e, level);
            }
        }
        double prev = -1.0;
        for (std::size_t e = 0; e < 20; ++e) {
            const double l = sparsity_level_at_epoch(s, e);
            ASSERT_GE(l, prev);
            ASSERT_LE(l, s.target);
            prev = l;
        }
    }
}

TEST(SparsitySchedule, InvalidSpecsAreRejected) {
    EXPECT_THROW(sparsity_level_at_epoch(spec_of(ScheduleMode::Polynomial, 0.0, 0.5, 0), 0), ConfigError);
    EXPECT_THROW(sparsity_level_at_epoch(spec_of(ScheduleMode::Polynomial, 0.6, 0.5, 3), 0), ConfigError);
    EXPECT_THROW(sparsity_level_at_epoch(spec_of(ScheduleMode::Polynomial, 0.0, 1.0, 3), 0), ConfigError);
    EXPECT_THROW(sparsity_level_at_epoch(spec_of(ScheduleMode::Multistep, 0.0, 0.5, 3), 0), ConfigError);
    EXPECT_NO_THROW(sparsity_level_at_epoch(spec_of(ScheduleMode::Polynomial, 0.3, 0.3, 0), 0));
}

TEST(StochasticGates, FrequencyMatchesSigmoid) {
    Rng rng(4);
    const std::vector<double> scores{0.0, std::log(0.9 / 0.1), -1.5, 2.0, 40.0, -40.0};
    std::vector<double> on(scores.size(), 0.0);
    const int draws = 10000;
    for (int k = 0; k < draws; ++k) {
        const auto z = sample_gates(scores, rng);
        for (std::size_t j = 0; j < z.size(); ++j) {
            ASSERT_TRUE(z[j] == 0.0 || z[j] == 1.0);
            on[j] += z[j];
        }
    }
    for (std::size_t j = 0; j < scores.size(); ++j) {
        const double p = sigmoid_of(scores[j]);
        const double sigma = std::sqrt(p * (1.0 - p) / draws);
        EXPECT_LE(std::fabs(on[j] / draws - p), 3.0 * sigma + 1e-12) << "score " << scores[j];
    }
    EXPECT_NEAR(on[0] / draws, 0.5, 0.02);
    EXPECT_NEAR(on[1] / draws, 0.9, 0.02);
    EXPECT_EQ(on[4], draws);
}

TEST(RbRegularizer, ValuesMatchDefinition) {
    // mean sigmoid = 1 - level -> 0
    const Tensor zero = Tensor::vector({0.0, 0.0});
    EXPECT_NEAR(rb_regularizer_loss({zero}, 0.5).item(), 0.0, 1e-15);
    const Tensor on = Tensor::vector({60.0, 60.0, 60.0});
    EXPECT_NEAR(rb_regularizer_loss({on}, 0.5).item(), 0.25, 1e-15);
    // symmetric penalty around 1 - level
    const double d = 0.1;
    const double logit_hi = std::log((0.5 + d) / (0.5 - d)), logit_lo = -logit_hi;
    EXPECT_NEAR(rb_regularizer_loss({Tensor::vector({logit_hi})}, 0.5).item(), d * d, 1e-15);
    EXPECT_NEAR(rb_regularizer_loss({Tensor::vector({logit_lo})}, 0.5).item(), d * d, 1e-15);

    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        const std::vector<Tensor> s{random_tensor({4}, rng, -3, 3), random_tensor({2, 3}, rng, -3, 3)};
        const double level = rng.uniform(0.0, 0.9);
        double acc = 0.0;
        for (const auto& t : s)
            for (double v : t.values()) acc += sigmoid_of(v);
        const double expected = std::pow(acc / 10.0 - (1.0 - level), 2);
        ASSERT_NEAR(rb_regularizer_loss(s, level).item(), expected, 1e-15);
    }
}

TEST(RbRegularizer, GradientMatchesFiniteDifferences) {
    Rng rng(6);
    Tensor a = ck::testing::random_param({5}, rng, -2, 2), b = ck::testing::random_param({2, 2}, rng, -2, 2);
    backward(rb_regularizer_loss({a, b}, 0.3));
    for (Tensor* t : {&a, &b}) {
        const auto fd = ck::testing::numeric_grad([&] { return rb_regularizer_loss({a, b}, 0.3).item(); }, *t);
        EXPECT_LT(ck::testing::max_abs_diff(t->grad(), fd), 1e-6);
    }
    // closed form: 2 (mean p - (1 - SL)) p (1 - p) / |theta|
    double mean = 0.0;
    for (const Tensor* t : {&a, &b})
        for (double v : t->values()) mean += sigmoid_of(v) / 9.0;
    for (std::size_t j = 0; j < 5; ++j) {
        const double p = sigmoid_of(a[j]);
        EXPECT_NEAR(a.grad()[j], 2.0 * (mean - 0.7) * p * (1.0 - p) / 9.0, 1e-15);
    }
}

TEST(RbGate, EvalMaskIsDeterministicSignRule) {
    EXPECT_EQ(rb_eval_mask(std::vector<double>{-1, 2, 0}), (std::vector<double>{0, 1, 0}));
    RBGate gate(Tensor::vector({-1, 2, 0}));
    const Tensor w = Tensor::vector({0.5, -0.25, 3.0});
    EXPECT_EQ(gate.apply(w, {RunMode::Eval, nullptr}).values(), (std::vector<double>{0, -0.25, 0}));
    EXPECT_EQ(gate.apply(w, {RunMode::Eval, nullptr}).values(), gate.apply(w, {RunMode::Eval, nullptr}).values());
    RBGate dense(Tensor::vector({0.1, 0.2, 5}));
    EXPECT_EQ(dense.apply(w, {RunMode::Eval, nullptr}).values(), w.values());
}

TEST(RbGate, TrainModeSamplesAndPassesScoreGradient) {
    Rng rng(7);
    Tensor scores = Tensor::vector({0.0, 0.0, 0.0, 0.0});
    RBGate gate(scores);
    Tensor w = Tensor::vector({1.0, 2.0, 3.0, 4.0});
    w.set_requires_grad(true);
    std::vector<double> seen_on(4, 0.0);
    for (int k = 0; k < 400; ++k) {
        const Tensor out = gate.apply(w, {RunMode::Train, &rng});
        for (std::size_t j = 0; j < 4; ++j) {
            ASSERT_TRUE(out[j] == 0.0 || out[j] == w[j]);
            seen_on[j] += out[j] != 0.0;
        }
    }
    for (double c : seen_on) EXPECT_NEAR(c / 400.0, 0.5, 0.1);
    EXPECT_THROW(gate.apply(w, {RunMode::Train, nullptr}), Error);
    // scores receive gradient through the straight-through indicator
    for (auto& g : gate.scores().impl()->grad) g = 0.0;
    backward(sum(gate.apply(w, {RunMode::Train, &rng})));
    double total = 0.0;
    for (double g : gate.scores().grad()) total += std::fabs(g);
    EXPECT_GT(total, 0.0);
}

TEST(SparsifiableLayers, OnlyConvAndLinearWeights) {
    Rng rng(8);
    ModelGraph g({1, 4, 4});
    g.add(make_conv2d("conv", "input", {1, 2, 3, 1, 1}, rng));
    g.add(make_batchnorm("bn", "conv", 2));
    g.add(make_flatten("flat", "bn"));
    g.add(make_linear("fc", "flat", {32, 2}, rng));
    EXPECT_EQ(sparsifiable_layers(g), (std::vector<std::string>{"conv", "fc"}));
}
