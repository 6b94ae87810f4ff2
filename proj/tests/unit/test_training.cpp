#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "fixtures.hpp"
#include "gwmoe/errors.hpp"
#include "gwmoe/io.hpp"
#include "gwmoe/optim.hpp"
#include "gwmoe/training.hpp"

using namespace gwmoe;
using namespace gwmoe::testing;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / "gwmoe_test_training" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

ModelConfig small_config(HeadType head, std::size_t vocab) {
    MoELayerConfig layer;
    layer.n_experts = 4;
    layer.top_k = 2;
    layer.d_ff = 16;
    auto c = ModelConfig::uniform(vocab, 8, 2, 2, 8, layer, head);
    c.n_classes = 2;
    c.init_scale = 0.1;
    return c;
}

DatasetSplits small_task(TaskId task, std::size_t n, std::uint64_t seed = 0) {
    TaskSpec spec;
    spec.task = task;
    spec.n_examples = n;
    spec.seq_len = 8;
    spec.seed = seed;
    return generate(spec);
}

bool same_tensor(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

bool same_model(const Model& a, const Model& b) {
    auto pa = a.parameters(), pb = b.parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (!same_tensor(pa[i], pb[i])) return false;
    return true;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Adam, MatchesClosedFormUpdates) {
    Tensor w(Shape{3}, {0.5, -1.0, 2.0});
    w.set_requires_grad(true);
    Adam adam({w});
    const std::vector<std::vector<double>> grads{{0.1, -0.2, 0.0}, {0.3, 0.1, -0.5}, {-0.2, 0.0, 0.4}};
    std::vector<double> ref{0.5, -1.0, 2.0}, m(3, 0.0), v(3, 0.0);
    for (std::size_t t = 1; t <= grads.size(); ++t) {
        w.zero_grad();
        for (std::size_t j = 0; j < 3; ++j) w.grad_mut()[j] = grads[t - 1][j];
        adam.step(0.01);
        for (std::size_t j = 0; j < 3; ++j) {
            const double g = grads[t - 1][j];
            m[j] = 0.9 * m[j] + 0.1 * g;
            v[j] = 0.999 * v[j] + 0.001 * g * g;
            const double mh = m[j] / (1 - std::pow(0.9, t)), vh = v[j] / (1 - std::pow(0.999, t));
            ref[j] -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
            EXPECT_NEAR(w[j], ref[j], 1e-12);
        }
    }
    // first step moves every coordinate with nonzero gradient by exactly lr
    Tensor u(Shape{2}, {0.0, 0.0});
    u.set_requires_grad(true);
    Adam a2({u});
    u.zero_grad();
    u.grad_mut()[0] = 5.0;
    u.grad_mut()[1] = -1e-3;
    a2.step(0.1);
    EXPECT_NEAR(u[0], -0.1, 1e-9);
    EXPECT_NEAR(u[1], 0.1, 1e-5);
    EXPECT_THROW(a2.step(-1.0), ConfigError);
}

TEST(Adam, SkipsTensorsWithoutGradients) {
    Tensor w(Shape{2}, {1.0, 2.0});
    Adam adam({w});
    adam.step(0.1);
    EXPECT_EQ(w[0], 1.0);
    EXPECT_EQ(adam.steps(), 1u);
}

TEST(Warmup, LinearThenConstant) {
    EXPECT_EQ(warmup_lr(1e-3, 1, 10), 1e-4);
    EXPECT_EQ(warmup_lr(1e-3, 5, 10), 1e-3 * 5.0 / 10.0);
    EXPECT_EQ(warmup_lr(1e-3, 10, 10), 1e-3);
    EXPECT_EQ(warmup_lr(1e-3, 500, 10), 1e-3);
    EXPECT_EQ(warmup_lr(1e-3, 1, 0), 1e-3);
}

TEST(Train, DefaultSlotBudget) {
    EXPECT_EQ(default_max_num_slots(512), 26u);
    EXPECT_EQ(default_max_num_slots(20), 1u);
    EXPECT_EQ(default_max_num_slots(100), 5u);
}

TEST(Train, WarmupScheduleAppliedPerStep) {
    auto data = small_task(TaskId::key_value_retrieval, 100).train;  // 80 examples, 10 steps per epoch
    auto base = Model::build(small_config(HeadType::next_token, 80), 1);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.epochs = 2;
    cfg.learning_rate = 1e-3;
    auto r = train(base, data, cfg);
    ASSERT_EQ(r.metrics.steps.size(), 20u);
    for (const auto& s : r.metrics.steps) EXPECT_EQ(s.lr, s.step < 2 ? 1e-3 * s.step / 2.0 : 1e-3);
    EXPECT_EQ(r.checkpoint.metadata.at("warmup_steps"), "2");
}

TEST(Train, FrozenRouterStaysBitIdentical) {
    auto data = small_task(TaskId::key_value_retrieval, 100).train;
    auto base = Model::build(small_config(HeadType::next_token, 80), 2);
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.epochs = 1;
    cfg.learning_rate = 1e-2;
    for (auto method : {Method::standard, Method::gw}) {
        cfg.method = method;
        cfg.h_star_source = HStarSource::calibrated();
        auto r = train(base, data, cfg);
        auto before = base.router_parameters(), after = r.checkpoint.model.router_parameters();
        for (std::size_t l = 0; l < before.size(); ++l) EXPECT_TRUE(same_tensor(before[l], after[l]));
        EXPECT_FALSE(same_model(base, r.checkpoint.model));
    }
    cfg.method = Method::standard;
    cfg.freeze_router = false;
    auto r = train(base, data, cfg);
    EXPECT_FALSE(same_tensor(base.router_parameters()[0], r.checkpoint.model.router_parameters()[0]));
}

TEST(Train, ExpertScopeOnlyTouchesExperts) {
    auto data = small_task(TaskId::key_value_retrieval, 100).train;
    auto base = Model::build(small_config(HeadType::next_token, 80), 2);
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.epochs = 1;
    cfg.learning_rate = 1e-2;
    cfg.scope = TrainScope::experts;
    auto r = train(base, data, cfg);
    auto a = base.named_parameters(), b = r.checkpoint.model.named_parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool expert = a[i].name.find(".experts.") != std::string::npos;
        EXPECT_EQ(same_tensor(a[i].tensor, b[i].tensor), !expert) << a[i].name;
    }
}

TEST(Train, GwWithZeroSlotsEqualsStandard) {
    auto data = small_task(TaskId::key_value_retrieval, 100).train;
    auto base = Model::build(small_config(HeadType::next_token, 80), 3);
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.epochs = 2;
    cfg.learning_rate = 5e-3;
    auto standard = train(base, data, cfg);
    cfg.method = Method::gw;
    cfg.h_star_source = HStarSource::calibrated();
    cfg.max_num_slots = 0;
    auto zero = train(base, data, cfg);
    EXPECT_TRUE(same_model(standard.checkpoint.model, zero.checkpoint.model));
    for (std::size_t i = 0; i < standard.metrics.steps.size(); ++i)
        EXPECT_EQ(standard.metrics.steps[i].loss, zero.metrics.steps[i].loss);

    cfg.max_num_slots.reset();
    cfg.h_star_source = HStarSource::fixed_value(std::log(4.0) + 0.01);
    auto high = train(base, data, cfg);
    EXPECT_TRUE(same_model(standard.checkpoint.model, high.checkpoint.model));
    EXPECT_EQ(high.metrics.broadcast_totals, (std::vector<std::size_t>{0, 0}));
}

TEST(Train, SlotBudgetRespectedAndDefaulted) {
    auto data = small_task(TaskId::key_value_retrieval, 100).train;
    auto base = Model::build(small_config(HeadType::next_token, 80), 4);
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.epochs = 1;
    cfg.method = Method::gw;
    cfg.h_star_source = HStarSource::fixed_value(0.0);
    auto r = train(base, data, cfg);
    EXPECT_EQ(r.metrics.max_num_slots, 7u);  // ceil(0.05 * 640 / 5)
    for (const auto& s : r.metrics.steps)
        for (auto b : s.broadcast) EXPECT_EQ(b, 7u);
    EXPECT_EQ(r.metrics.broadcast_tokens[0].size(), 35u);
}

TEST(Train, DeterministicCheckpointsAndCsvs) {
    auto data = small_task(TaskId::key_value_retrieval, 100).train;
    auto base = Model::build(small_config(HeadType::next_token, 80), 5);
    std::vector<std::string> files[2];
    for (int run = 0; run < 2; ++run) {
        auto dir = temp_dir("det" + std::to_string(run));
        TrainConfig cfg;
        cfg.batch_size = 16;
        cfg.epochs = 1;
        cfg.method = Method::gw;
        cfg.h_star_source = HStarSource::calibrated();
        cfg.checkpoint_path = dir / "model.gwc";
        cfg.step_csv_path = dir / "steps.csv";
        cfg.trace_csv_path = dir / "trace.csv";
        train(base, data, cfg);
        for (auto name : {"model.gwc", "steps.csv", "trace.csv"}) files[run].push_back(slurp(dir / name));
    }
    EXPECT_EQ(files[0], files[1]);
    EXPECT_NE(files[0][2].find("broadcast"), std::string::npos);
    auto ck = load_checkpoint(temp_dir("x").parent_path() / "det0" / "model.gwc");
    EXPECT_EQ(ck.metadata.at("method"), "gw");
    EXPECT_FALSE(ck.extra_tensors.empty());
}

TEST(Calibration, DeterministicAndFlagsTheQuantile) {
    auto data = small_task(TaskId::key_value_retrieval, 1000).train;  // 6400 tokens
    auto m = Model::build(small_config(HeadType::next_token, 80), 6);
    auto a = calibrate_from_base(m, data);
    auto b = calibrate_from_base(m, data);
    ASSERT_EQ(a.size(), 2u);
    for (std::size_t l = 0; l < 2; ++l) {
        EXPECT_EQ(a[l].h_star, b[l].h_star);
        EXPECT_EQ(*m.moe(l).config().h_star, a[l].h_star);
        std::size_t flagged = 0;
        for (double h : a[l].sample_entropies) flagged += h >= a[l].h_star;
        EXPECT_NEAR(static_cast<double>(flagged) / 6400.0, 0.05, 0.005);
    }
    auto pooled = calibrate_from_base(m, data, 0.05, 64, true);
    EXPECT_EQ(pooled[0].h_star, pooled[1].h_star);

    Dataset tiny = data;
    tiny.examples.resize(2);
    EXPECT_THROW(calibrate_from_base(m, tiny), InsufficientDataError);
}

TEST(Evaluate, UntrainedClassifierIsNearChance) {
    TaskSpec spec;
    spec.task = TaskId::byte_classification;
    spec.seq_len = 8;
    spec.n_examples = 1000;
    auto data = generate(spec).train;
    auto m = Model::build(small_config(HeadType::classification, 256), 7);
    auto r = evaluate(m, data);
    EXPECT_EQ(r.predictions, 800u);
    // a random head predicts mostly one class; balanced labels keep it near 0.5
    EXPECT_NEAR(r.value, 0.5, 0.1);
    for (auto c : r.expert_calls) EXPECT_EQ(c, 800u * 8 * 2);
}

TEST(Train, OverfitsFiftyExamples) {
    auto data = small_task(TaskId::byte_classification, 63).train;
    data.examples.resize(50);
    auto base = Model::build(small_config(HeadType::classification, 256), 8);
    TrainConfig cfg;
    cfg.batch_size = 10;
    cfg.epochs = 150;
    cfg.learning_rate = 1e-2;
    cfg.freeze_router = false;
    auto r = train(base, data, cfg);
    EXPECT_EQ(evaluate(r.checkpoint.model, data).value, 1.0);
    EXPECT_LT(r.metrics.epoch_loss.back(), r.metrics.epoch_loss.front());
}

TEST(Evaluate, MismatchesAreConfigErrors) {
    auto kv = small_task(TaskId::key_value_retrieval, 100).train;
    auto classifier = Model::build(small_config(HeadType::classification, 256), 1);
    EXPECT_THROW(evaluate(classifier, kv), ConfigError);
    EXPECT_THROW(train(classifier, kv, TrainConfig{}), ConfigError);
    auto lm = Model::build(small_config(HeadType::next_token, 40), 1);
    EXPECT_THROW(evaluate(lm, kv), ConfigError);
    Dataset empty = kv;
    empty.examples.clear();
    auto ok = Model::build(small_config(HeadType::next_token, 80), 1);
    EXPECT_THROW(evaluate(ok, empty), InsufficientDataError);
    TrainConfig gw;
    gw.method = Method::gw;
    EXPECT_THROW(train(ok, kv, gw), ConfigError);
}

TEST(Evaluate, PerplexityIsExpOfMeanLoss) {
    TaskSpec spec;
    spec.task = TaskId::char_lm;
    spec.seq_len = 8;
    spec.n_examples = 50;
    auto data = generate(spec).train;
    auto m = Model::build(small_config(HeadType::next_token, 256), 1);
    auto r = evaluate(m, data);
    EXPECT_EQ(r.metric, Metric::perplexity);
    EXPECT_NEAR(r.value, std::exp(r.mean_loss), 1e-9 * r.value);
    EXPECT_NEAR(r.mean_loss, std::log(256.0), 0.2);
}

TEST(Train, NonFiniteLossAbortsWithDump) {
    auto data = small_task(TaskId::key_value_retrieval, 100).train;
    auto base = Model::build(small_config(HeadType::next_token, 80), 9);
    base.named_parameters()[0].tensor[0] = std::numeric_limits<double>::quiet_NaN();
    auto dir = temp_dir("nan");
    TrainConfig cfg;
    cfg.batch_size = 80;
    cfg.nan_dump_path = dir / "nan.txt";
    EXPECT_THROW(train(base, data, cfg), NumericError);
    const auto dump = slurp(dir / "nan.txt");
    EXPECT_EQ(dump.rfind("step 1\n", 0), 0u);
    EXPECT_NE(dump.find("tokens "), std::string::npos);
}
