#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "gradcheck.hpp"
#include "gwmoe/autograd.hpp"
#include "gwmoe/errors.hpp"
#include "gwmoe/ops.hpp"
#include "gwmoe/rng.hpp"

using namespace gwmoe;
using gwmoe::testing::check_gradients;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = scale * rng.normal();
    return t;
}

// weighted sum so every output element carries a distinct upstream gradient
Tensor probe(const Tensor& y, std::uint64_t seed = 99) {
    Tensor w = random_tensor(y.shape(), seed);
    return ops::sum(ops::mul(y, w));
}

constexpr double kTol = 1e-7;

}  // namespace

TEST(Tensor, ShapeAndAccess) {
    Tensor t = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
    EXPECT_EQ(t.rank(), 2u);
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.at(1, 2), 6.0);
    EXPECT_EQ(shape_str(t.shape()), "[2, 3]");
    EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Tensor, HandleSemanticsAndClone) {
    Tensor a = Tensor::vector({1, 2, 3});
    Tensor alias = a;
    Tensor copy = a.clone();
    alias[0] = 10;
    EXPECT_EQ(a[0], 10);
    EXPECT_EQ(copy[0], 1);
    EXPECT_TRUE(alias.same_as(a));
    EXPECT_FALSE(copy.same_as(a));
    Tensor d = a.detach();
    EXPECT_FALSE(d.requires_grad());
    d[1] = -1;
    EXPECT_EQ(a[1], 2);
}

TEST(Tensor, UndefinedUseIsContractError) {
    Tensor t;
    EXPECT_FALSE(t.defined());
    EXPECT_THROW(t.shape(), ContractError);
}

TEST(Ops, MatmulValuesAndShapeError) {
    Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    Tensor b = Tensor::matrix({{5, 6}, {7, 8}});
    Tensor c = ops::matmul(a, b);
    EXPECT_EQ(c.at(0, 0), 19);
    EXPECT_EQ(c.at(0, 1), 22);
    EXPECT_EQ(c.at(1, 0), 43);
    EXPECT_EQ(c.at(1, 1), 50);
    try {
        ops::matmul(Tensor({2, 3}), Tensor({2, 3}));
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2, 3] x [2, 3]"), std::string::npos) << msg;
    }
}

TEST(Ops, GeluMatchesTanhFormula) {
    Tensor x = Tensor::vector({-2.0, -0.5, 0.0, 1.0, 3.0});
    Tensor y = ops::gelu(x);
    const double c = std::sqrt(2.0 / std::numbers::pi);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double v = x[i];
        EXPECT_NEAR(y[i], 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))), 1e-15);
    }
}

TEST(Ops, SoftmaxRowsAndColumns) {
    Tensor x = random_tensor({4, 5}, 1, 3.0);
    Tensor rows = ops::softmax(x, -1);
    for (std::size_t r = 0; r < 4; ++r) {
        double z = 0.0;
        for (std::size_t c = 0; c < 5; ++c) z += std::exp(x.at(r, c));
        for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(rows.at(r, c), std::exp(x.at(r, c)) / z, 1e-15);
    }
    Tensor cols = ops::softmax(x, 0);
    for (std::size_t c = 0; c < 5; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < 4; ++r) s += cols.at(r, c);
        EXPECT_NEAR(s, 1.0, 1e-15);
    }
    Tensor big = Tensor::matrix({{1000.0, 1000.0}});
    Tensor sb = ops::softmax(big);
    EXPECT_DOUBLE_EQ(sb[0], 0.5);
}

TEST(Ops, ErrorKinds) {
    EXPECT_THROW(ops::softmax(Tensor::matrix({{1.0, std::nan("")}})), NumericError);
    EXPECT_THROW(ops::log(Tensor::vector({1.0, 0.0})), NumericError);
    EXPECT_THROW(ops::log(Tensor::vector({-1.0})), NumericError);
    Tensor table({4, 2});
    std::vector<int> bad{0, 4};
    EXPECT_THROW(ops::embedding(table, bad), IndexError);
    std::vector<int> tgt{2};
    EXPECT_THROW(ops::cross_entropy(Tensor({1, 2}), tgt), IndexError);
    std::vector<std::size_t> idx{5};
    EXPECT_THROW(ops::gather_rows(Tensor({2, 2}), idx), IndexError);
    EXPECT_THROW(ops::add(Tensor({2, 2}), Tensor({2, 3})), DimensionError);
}

TEST(Ops, CrossEntropyValue) {
    Tensor logits = Tensor::matrix({{0.0, std::log(3.0)}, {2.0, 2.0}});
    std::vector<int> t{1, 0};
    const double expected = (-std::log(0.75) - std::log(0.5)) / 2.0;
    EXPECT_NEAR(ops::cross_entropy(logits, t).item(), expected, 1e-15);
}

TEST(Ops, LayerNormNormalizesRows) {
    Tensor x = random_tensor({3, 8}, 4, 5.0);
    Tensor y = ops::layer_norm(x, Tensor({8}, 1.0), Tensor({8}), 0.0);
    for (std::size_t r = 0; r < 3; ++r) {
        double m = 0.0, v = 0.0;
        for (std::size_t c = 0; c < 8; ++c) m += y.at(r, c) / 8.0;
        for (std::size_t c = 0; c < 8; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m) / 8.0;
        EXPECT_NEAR(m, 0.0, 1e-12);
        EXPECT_NEAR(v, 1.0, 1e-12);
    }
}

TEST(Ops, AttentionCausalFirstPositionCopiesValue) {
    Tensor q = random_tensor({6, 4}, 5), k = random_tensor({6, 4}, 6), v = random_tensor({6, 4}, 7);
    Tensor y = ops::attention(q, k, v, 3, 2, true);
    // position 0 of each sequence can only attend to itself
    for (std::size_t s : {0u, 3u})
        for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(y.at(s, c), v.at(s, c), 1e-15);
}

TEST(Ops, AttentionMatchesNaiveSingleHead) {
    Tensor q = random_tensor({4, 3}, 11), k = random_tensor({4, 3}, 12), v = random_tensor({4, 3}, 13);
    Tensor y = ops::attention(q, k, v, 4, 1, false);
    for (std::size_t i = 0; i < 4; ++i) {
        std::vector<double> w(4);
        double z = 0.0;
        for (std::size_t j = 0; j < 4; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < 3; ++c) s += q.at(i, c) * k.at(j, c);
            w[j] = std::exp(s / std::sqrt(3.0));
            z += w[j];
        }
        for (std::size_t c = 0; c < 3; ++c) {
            double o = 0.0;
            for (std::size_t j = 0; j < 4; ++j) o += w[j] / z * v.at(j, c);
            EXPECT_NEAR(y.at(i, c), o, 1e-13);
        }
    }
}

TEST(Ops, ScatterAddAccumulatesInOrder) {
    Tensor p0 = Tensor::matrix({{1, 1}, {2, 2}});
    Tensor p1 = Tensor::matrix({{10, 10}});
    std::vector<Tensor> parts{p0, p1};
    std::vector<std::vector<std::size_t>> idx{{0, 2}, {2}};
    Tensor out = ops::scatter_add_rows(3, parts, idx);
    EXPECT_EQ(out.at(0, 0), 1);
    EXPECT_EQ(out.at(1, 0), 0);
    EXPECT_EQ(out.at(2, 1), 12);
}

TEST(Autograd, MatchesFiniteDifferencesPerOp) {
    Tensor a = random_tensor({3, 4}, 21), b = random_tensor({4, 5}, 22), c = random_tensor({3, 4}, 23);
    Tensor bias = random_tensor({4}, 24), gain = random_tensor({4}, 25);
    Tensor pos = Tensor({3, 4}, std::vector<double>(12, 0.0));
    for (std::size_t i = 0; i < 12; ++i) pos[i] = 0.5 + 0.1 * static_cast<double>(i);
    std::vector<int> ids{2, 0, 2, 1};
    std::vector<int> targets{1, 4, 0};
    std::vector<std::size_t> rows{2, 0, 2};
    Tensor w3 = random_tensor({3}, 26);

    struct Case {
        const char* name;
        std::function<Tensor()> fn;
        std::vector<Tensor> params;
    };
    std::vector<Case> cases{
        {"matmul", [&] { return probe(ops::matmul(a, b)); }, {a, b}},
        {"add", [&] { return probe(ops::add(a, c)); }, {a, c}},
        {"add_row", [&] { return probe(ops::add_row(a, bias)); }, {a, bias}},
        {"mul", [&] { return probe(ops::mul(a, c)); }, {a, c}},
        {"mul_self", [&] { return probe(ops::mul(a, a)); }, {a}},
        {"scale", [&] { return probe(ops::scale(a, -1.7)); }, {a}},
        {"gelu", [&] { return probe(ops::gelu(a)); }, {a}},
        {"softmax_rows", [&] { return probe(ops::softmax(a, -1)); }, {a}},
        {"softmax_cols", [&] { return probe(ops::softmax(a, 0)); }, {a}},
        {"log", [&] { return probe(ops::log(pos)); }, {pos}},
        {"sum", [&] { return ops::sum(ops::mul(a, a)); }, {a}},
        {"mean", [&] { return ops::mean(ops::mul(a, c)); }, {a, c}},
        {"embedding", [&] { return probe(ops::embedding(a, ids)); }, {a}},
        {"layer_norm", [&] { return probe(ops::layer_norm(a, gain, bias)); }, {a, gain, bias}},
        {"cross_entropy", [&] { return ops::cross_entropy(ops::matmul(a, b), targets); }, {a, b}},
        {"gather_rows", [&] { return probe(ops::gather_rows(a, rows)); }, {a}},
        {"scale_rows", [&] { return probe(ops::scale_rows(a, w3)); }, {a, w3}},
        {"scatter_add", [&] {
             std::vector<Tensor> parts{a, c};
             std::vector<std::vector<std::size_t>> idx{{0, 1, 3}, {3, 2, 0}};
             return probe(ops::scatter_add_rows(4, parts, idx));
         }, {a, c}},
    };
    for (auto& cs : cases) {
        auto r = check_gradients(cs.fn, cs.params);
        EXPECT_LT(r.worst_tensor_error, kTol) << cs.name;
    }
}

TEST(Autograd, AttentionAndPoolingGradients) {
    Tensor q = random_tensor({6, 4}, 31), k = random_tensor({6, 4}, 32), v = random_tensor({6, 4}, 33);
    for (bool causal : {false, true}) {
        auto r = check_gradients([&] { return probe(ops::attention(q, k, v, 3, 2, causal)); }, {q, k, v});
        EXPECT_LT(r.worst_tensor_error, kTol) << "causal=" << causal;
    }
    auto r = check_gradients([&] { return probe(ops::mean_pool(q, 3)); }, {q});
    EXPECT_LT(r.worst_tensor_error, kTol);
}

TEST(Autograd, GradientAccumulatesAcrossUses) {
    Tensor x = Tensor::vector({3.0});
    x.set_requires_grad(true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor y = ops::add(ops::mul(x, x), x);  // x^2 + x
        tape.backward(ops::sum(y));
    }
    EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Autograd, BackwardVisitsInReverseOrder) {
    Tensor x = Tensor::vector({1.0, 2.0});
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor y = ops::scale(x, 2.0);
    Tensor z = ops::gelu(y);
    Tensor s = ops::sum(z);
    EXPECT_EQ(tape.size(), 3u);
    EXPECT_TRUE(tape.topologically_ordered());
    tape.backward(s);
    ASSERT_EQ(tape.visit_log().size(), 3u);
    EXPECT_EQ(tape.visit_log()[0], "sum");
    EXPECT_EQ(tape.visit_log()[1], "gelu");
    EXPECT_EQ(tape.visit_log()[2], "scale");
    EXPECT_TRUE(tape.backward_done());
}

TEST(Autograd, ContractErrors) {
    Tensor x = Tensor::vector({1.0, 2.0});
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor y = ops::scale(x, 2.0);
    EXPECT_THROW(tape.backward(y), ContractError);  // not a scalar
    Tensor foreign = Tensor::scalar(1.0);
    EXPECT_THROW(tape.backward(foreign), ContractError);  // not on this tape
}

TEST(Autograd, NoGradScopeRecordsNothing) {
    Tensor x = Tensor::vector({1.0});
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    {
        NoGradScope off;
        ops::scale(x, 3.0);
    }
    EXPECT_EQ(tape.size(), 0u);
    ops::scale(x, 3.0);
    EXPECT_EQ(tape.size(), 1u);
}

TEST(Autograd, NothingRecordedWithoutGradInputs) {
    Tape tape;
    TapeScope scope(tape);
    ops::matmul(Tensor({2, 2}, 1.0), Tensor({2, 2}, 1.0));
    EXPECT_EQ(tape.size(), 0u);
}

TEST(CheckedMode, NonFiniteOutputsRaise) {
    set_checked_mode(true);
    EXPECT_THROW(ops::scale(Tensor::vector({1e308}), 10.0), NumericError);
    set_checked_mode(false);
    EXPECT_NO_THROW(ops::scale(Tensor::vector({1e308}), 10.0));
}

TEST(Rng, DeterministicAndInRange) {
    Rng a(5), b(5);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
    Rng r(6);
    for (int i = 0; i < 1000; ++i) {
        EXPECT_LT(r.below(7), 7u);
        const double u = r.uniform();
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
    }
    auto d = r.distinct(5, 8);
    std::sort(d.begin(), d.end());
    EXPECT_EQ(std::adjacent_find(d.begin(), d.end()), d.end());
    EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
    EXPECT_EQ(derive_seed(1, 2), derive_seed(1, 2));
}

TEST(Rng, NormalMoments) {
    Rng r(8);
    double m = 0.0, v = 0.0;
    const int n = 20000;
    std::vector<double> xs(n);
    for (auto& x : xs) { x = r.normal(); m += x / n; }
    for (double x : xs) v += (x - m) * (x - m) / n;
    EXPECT_NEAR(m, 0.0, 0.03);
    EXPECT_NEAR(v, 1.0, 0.05);
}
