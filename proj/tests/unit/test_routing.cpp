#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "gwmoe/errors.hpp"
#include "gwmoe/routing.hpp"

using namespace gwmoe;

namespace {

RouterScores scores_from(std::vector<std::vector<double>> rows) {
    const std::size_t n = rows.front().size();
    std::vector<double> flat;
    for (auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    return RouterScores{Tensor({rows.size(), n}, std::move(flat)), 0};
}

std::vector<double> random_row(Rng& rng, std::size_t n) {
    std::vector<double> r(n);
    double s = 0.0;
    for (auto& v : r) {
        v = std::exp(3.0 * rng.normal());
        s += v;
    }
    for (auto& v : r) v /= s;
    return r;
}

}  // namespace

TEST(Entropy, UniformAndOneHot) {
    for (std::size_t n : {2u, 4u, 8u, 64u}) {
        std::vector<double> uniform(n, 1.0 / static_cast<double>(n));
        std::vector<double> onehot(n, 0.0);
        onehot[n / 2] = 1.0;
        auto s = scores_from({uniform, onehot});
        Tensor h = entropy(s);
        Tensor hn = normalized_entropy(s);
        EXPECT_NEAR(h[0], std::log(static_cast<double>(n)), 1e-12);
        EXPECT_NEAR(hn[0], 1.0, 1e-12);
        EXPECT_EQ(h[1], 0.0);
        EXPECT_EQ(hn[1], 0.0);
    }
}

TEST(Entropy, MatchesDirectSummationOnRandomRows) {
    Rng rng(17);
    for (int i = 0; i < 1000; ++i) {
        const std::size_t n = 2 + rng.below(15);
        const auto row = random_row(rng, n);
        double oracle = 0.0;
        for (double g : row)
            if (g > 0) oracle += -g * std::log(g);
        const double h = row_entropy(row);
        EXPECT_NEAR(h, oracle, 1e-12);
        EXPECT_GE(h, 0.0);
        EXPECT_LE(h, std::log(static_cast<double>(n)));
    }
}

TEST(Entropy, RequiresTwoExpertsForNormalization) {
    auto s = scores_from({{1.0}});
    EXPECT_THROW(normalized_entropy(s), ConfigError);
}

TEST(Entropy, InvalidRowsAreDataErrors) {
    EXPECT_THROW(entropy(scores_from({{0.5, 0.6}})), DataError);
    EXPECT_THROW(entropy(scores_from({{1.2, -0.2}})), DataError);
}

TEST(RouteScores, RowsAreProbabilities) {
    Rng rng(3);
    Tensor w({4, 6}), x({5, 4});
    for (double& v : w.data()) v = rng.normal();
    for (double& v : x.data()) v = rng.normal();
    auto s = route_scores(w, x);
    EXPECT_EQ(s.tokens(), 5u);
    EXPECT_EQ(s.experts(), 6u);
    EXPECT_NO_THROW(validate_scores(s));
    EXPECT_THROW(route_scores(w, Tensor({5, 3})), DimensionError);
}

TEST(TopK, OrderTiesAndWeights) {
    std::vector<double> row{0.1, 0.3, 0.3, 0.2, 0.1};
    auto sel = top_k_row(row, 2, false);
    EXPECT_EQ(sel.indices, (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(sel.weights, (std::vector<double>{0.3, 0.3}));

    std::vector<double> flat(4, 0.25);
    EXPECT_EQ(top_k_row(flat, 3, false).indices, (std::vector<std::size_t>{0, 1, 2}));

    auto renorm = top_k_row(row, 2, true);
    EXPECT_DOUBLE_EQ(renorm.weights[0], 0.5);
    EXPECT_DOUBLE_EQ(renorm.weights[1], 0.5);

    EXPECT_THROW(top_k_row(row, 0, false), ConfigError);
    EXPECT_THROW(top_k_row(row, 6, false), ConfigError);
}

TEST(TopK, SelectAllIsWholeRow) {
    Rng rng(4);
    const auto row = random_row(rng, 6);
    auto sel = top_k_row(row, 6, false);
    std::set<std::size_t> ids(sel.indices.begin(), sel.indices.end());
    EXPECT_EQ(ids.size(), 6u);
    for (std::size_t i = 1; i < 6; ++i) EXPECT_GE(sel.weights[i - 1], sel.weights[i]);
}

TEST(Calibration, NearestRankQuantile) {
    std::vector<double> s;
    for (int i = 100; i >= 1; --i) s.push_back(i);  // unsorted input
    auto cal = calibrate_h_star(s, 0.05, 3);
    EXPECT_EQ(cal.h_star, 95.0);  // ceil(0.95 * 100) = 95th smallest
    EXPECT_EQ(cal.layer_id, 3);
    EXPECT_TRUE(std::is_sorted(cal.sample_entropies.begin(), cal.sample_entropies.end()));
    const auto flagged = std::count_if(s.begin(), s.end(), [&](double v) { return v >= cal.h_star; });
    EXPECT_NEAR(static_cast<double>(flagged) / 100.0, 0.05, 0.01 + 1e-12);
}

TEST(Calibration, FlaggedFractionOnRandomSample) {
    Rng rng(9);
    std::vector<double> s(4000);
    for (auto& v : s) v = rng.uniform() * std::log(8.0);
    auto cal = calibrate_h_star(s, 0.05);
    const auto flagged = std::count_if(s.begin(), s.end(), [&](double v) { return v >= cal.h_star; });
    EXPECT_NEAR(static_cast<double>(flagged) / 4000.0, 0.05, 1.0 / 4000.0 + 1e-12);
}

TEST(Calibration, BoundariesAndErrors) {
    std::vector<double> s(20);
    for (std::size_t i = 0; i < 20; ++i) s[i] = 0.1 * static_cast<double>(i);
    EXPECT_DOUBLE_EQ(calibrate_h_star(s, 0.0).h_star, 1.9);  // max observed
    EXPECT_THROW(calibrate_h_star(std::vector<double>(19, 0.5)), InsufficientDataError);
    EXPECT_THROW(calibrate_h_star(s, 1.0), ConfigError);
    EXPECT_THROW(calibrate_h_star(s, -0.1), ConfigError);
}

TEST(SlotBudget, CapsAndPrefersHighEntropyThenLowIndex) {
    std::vector<double> h{0.5, 0.9, 0.7, 0.9, 0.2, 0.7};
    auto mask = allocate_slots(h, 0.6, SlotBudget{3});
    EXPECT_EQ(mask, (std::vector<bool>{false, true, true, true, false, false}));
    auto all = allocate_slots(h, 0.6, SlotBudget{100});
    EXPECT_EQ(std::count(all.begin(), all.end(), true), 4);
    auto none = allocate_slots(h, 0.6, SlotBudget{0});
    EXPECT_EQ(std::count(none.begin(), none.end(), true), 0);
    auto inclusive = allocate_slots(h, 0.9, SlotBudget{10});
    EXPECT_EQ(inclusive, (std::vector<bool>{false, true, false, true, false, false}));
}

TEST(SlotBudget, NeverExceedsBudgetOnRandomInputs) {
    Rng rng(12);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> h(1 + rng.below(64));
        for (auto& v : h) v = rng.uniform();
        const std::size_t budget = rng.below(10);
        const double hs = rng.uniform();
        auto mask = allocate_slots(h, hs, SlotBudget{budget});
        std::size_t count = 0, qualifying = 0;
        for (std::size_t t = 0; t < h.size(); ++t) {
            if (h[t] >= hs) ++qualifying;
            if (mask[t]) {
                ++count;
                EXPECT_GE(h[t], hs);
            }
        }
        EXPECT_EQ(count, std::min(budget, qualifying));
    }
}

namespace {

std::vector<RouterDecision> decisions_with(const std::vector<double>& entropies, std::size_t k) {
    std::vector<RouterDecision> ds(entropies.size());
    for (std::size_t t = 0; t < ds.size(); ++t) {
        ds[t].token_index = t;
        ds[t].entropy = entropies[t];
        for (std::size_t j = 0; j < k; ++j) {
            ds[t].selected_experts.push_back(j);
            ds[t].combine_weights.push_back(0.3);
        }
    }
    return ds;
}

}  // namespace

TEST(Perturb, UncertainModeTouchesOnlyUncertainTokens) {
    std::vector<double> h{0.1, 1.5, 0.2, 1.9, 2.0, 0.3};
    auto ds = decisions_with(h, 2);
    Rng rng(1);
    const auto n = perturb_uncertain(ds, 8, 1.5, PerturbMode::uncertain, rng);
    EXPECT_EQ(n, 3u);
    for (std::size_t t = 0; t < ds.size(); ++t) {
        EXPECT_EQ(ds[t].perturbed, h[t] >= 1.5);
        if (!ds[t].perturbed) continue;
        ASSERT_EQ(ds[t].selected_experts.size(), 2u);
        EXPECT_NE(ds[t].selected_experts[0], ds[t].selected_experts[1]);
        EXPECT_EQ(ds[t].combine_weights, (std::vector<double>{0.5, 0.5}));
        for (auto e : ds[t].selected_experts) EXPECT_LT(e, 8u);
    }
}

TEST(Perturb, ControlModeMatchesCount) {
    Rng gen(5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> h(40);
        for (auto& v : h) v = gen.uniform();
        const double hs = gen.uniform();
        auto a = decisions_with(h, 2), b = decisions_with(h, 2);
        Rng r1(trial), r2(trial);
        const auto nu = perturb_uncertain(a, 8, hs, PerturbMode::uncertain, r1);
        const auto nc = perturb_uncertain(b, 8, hs, PerturbMode::control, r2);
        EXPECT_EQ(nu, nc);
        EXPECT_EQ(std::count_if(b.begin(), b.end(), [](const auto& d) { return d.perturbed; }),
                  static_cast<long>(nc));
    }
}

TEST(Perturb, ZeroWhenThresholdAboveEverything) {
    auto ds = decisions_with({0.1, 0.2}, 1);
    Rng rng(2);
    EXPECT_EQ(perturb_uncertain(ds, 4, 10.0, PerturbMode::uncertain, rng), 0u);
    EXPECT_EQ(perturb_uncertain(ds, 4, 10.0, PerturbMode::control, rng), 0u);
    EXPECT_FALSE(ds[0].perturbed);
}

TEST(Perturb, DeterministicGivenSeed) {
    auto a = decisions_with({2, 2, 2, 2}, 3), b = decisions_with({2, 2, 2, 2}, 3);
    Rng r1(77), r2(77);
    perturb_uncertain(a, 8, 1.0, PerturbMode::uncertain, r1);
    perturb_uncertain(b, 8, 1.0, PerturbMode::uncertain, r2);
    for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(a[t].selected_experts, b[t].selected_experts);
}

TEST(Examples, RouteScoresTwoExperts) {
    Tensor w = Tensor::matrix({{1.0, -1.0}});
    Tensor x = Tensor::matrix({{2.0}});
    auto s = route_scores(w, x);
    const double e2 = std::exp(2.0), em2 = std::exp(-2.0);
    EXPECT_NEAR(s.scores[0], e2 / (e2 + em2), 1e-15);
    EXPECT_NEAR(s.scores[0], 0.98201, 1e-5);
    EXPECT_NEAR(s.scores[1], 0.01799, 1e-5);
    auto zero = route_scores(Tensor({3, 4}), Tensor({2, 3}, 1.7));
    for (double g : zero.scores.data()) EXPECT_DOUBLE_EQ(g, 0.25);
}

TEST(Examples, EntropyValues) {
    std::vector<double> row{0.4, 0.3, 0.2, 0.1};
    double oracle = 0.0;
    for (double g : row) oracle -= g * std::log(g);
    EXPECT_NEAR(row_entropy(row), oracle, 1e-15);
    EXPECT_NEAR(row_entropy(row), 1.27985, 1e-5);
    std::vector<double> half{0.5, 0.5, 0, 0, 0, 0, 0, 0};
    auto s = scores_from({half});
    EXPECT_NEAR(normalized_entropy(s)[0], 1.0 / 3.0, 1e-15);
    std::vector<double> u(8, 0.125);
    EXPECT_NEAR(row_entropy(u), 2.07944, 1e-5);
}

TEST(Examples, TopKValues) {
    std::vector<double> a{0.1, 0.5, 0.2, 0.2};
    EXPECT_EQ(top_k_row(a, 2, false).indices, (std::vector<std::size_t>{1, 2}));
    std::vector<double> b{0.05, 0.7, 0.05, 0.2};
    auto raw = top_k_row(b, 1, false), norm = top_k_row(b, 1, true);
    EXPECT_EQ(raw.indices, (std::vector<std::size_t>{1}));
    EXPECT_EQ(raw.weights[0], 0.7);
    EXPECT_EQ(norm.weights[0], 1.0);
    auto all = top_k_row(a, 4, false);
    EXPECT_EQ(all.indices, (std::vector<std::size_t>{1, 2, 3, 0}));
}

TEST(Examples, CalibrationGrid) {
    std::vector<double> s;
    for (int i = 1; i <= 100; ++i) s.push_back(i / 100.0);
    EXPECT_DOUBLE_EQ(calibrate_h_star(s, 0.05).h_star, 0.95);
    EXPECT_EQ(calibrate_h_star(std::vector<double>(30, 0.7)).h_star, 0.7);
}

TEST(Examples, CalibrationMatchesSortOracle) {
    Rng rng(21);
    std::vector<double> s(1000);
    for (auto& v : s) v = rng.uniform() * 2.0;
    auto sorted = s;
    std::sort(sorted.begin(), sorted.end());
    // ceil(0.95 * 1000) - 1 = 949
    EXPECT_EQ(calibrate_h_star(s, 0.05).h_star, sorted[949]);
}

TEST(Examples, SlotAllocation) {
    std::vector<double> a{2.1, 0.3, 2.5};
    EXPECT_EQ(allocate_slots(a, 2.0, SlotBudget{3}), (std::vector<bool>{true, false, true}));
    std::vector<double> b{2.1, 2.2, 2.3};
    EXPECT_EQ(allocate_slots(b, 2.0, SlotBudget{1}), (std::vector<bool>{false, false, true}));
}

TEST(Examples, SlotAllocationMatchesSortOracle) {
    Rng rng(33);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> h(64);
        for (auto& v : h) v = std::floor(rng.uniform() * 20.0) / 10.0;  // coarse grid forces ties
        std::vector<std::pair<double, std::size_t>> q;
        for (std::size_t t = 0; t < h.size(); ++t)
            if (h[t] >= 1.0) q.push_back({-h[t], t});
        std::sort(q.begin(), q.end());
        std::vector<bool> oracle(64, false);
        for (std::size_t i = 0; i < std::min<std::size_t>(5, q.size()); ++i) oracle[q[i].second] = true;
        EXPECT_EQ(allocate_slots(h, 1.0, SlotBudget{5}), oracle);
        std::vector<bool> pred(64);
        for (std::size_t t = 0; t < 64; ++t) pred[t] = h[t] >= 1.0;
        EXPECT_EQ(allocate_slots(h, 1.0, SlotBudget{64}), pred);
    }
}

TEST(Examples, PerturbWeights) {
    for (std::size_t k : {1u, 2u, 4u}) {
        auto ds = decisions_with({3.0}, k);
        Rng rng(k);
        perturb_uncertain(ds, 8, 1.0, PerturbMode::uncertain, rng);
        for (double w : ds[0].combine_weights) EXPECT_EQ(w, 1.0 / static_cast<double>(k));
    }
}

TEST(Properties, EntropyPermutationInvariantExactly) {
    Rng rng(44);
    for (int trial = 0; trial < 200; ++trial) {
        auto row = random_row(rng, 2 + rng.below(20));
        const double h = row_entropy(row);
        rng.shuffle(std::span<double>(row));
        EXPECT_EQ(row_entropy(row), h);
    }
}

TEST(Properties, TopAllRenormalizedRecoversRow) {
    Rng rng(45);
    for (int trial = 0; trial < 100; ++trial) {
        const auto row = random_row(rng, 8);
        auto sel = top_k_row(row, 8, true);
        for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(sel.weights[i], row[sel.indices[i]], 1e-12);
    }
}
