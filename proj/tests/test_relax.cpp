#include <gtest/gtest.h>

#include "drmm/relax.hpp"
#include "support.hpp"

using namespace drmm;

namespace {

Dataset separable_toy(Rng& rng, std::size_t n) {
    Dataset d;
    d.images = Tensor({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i % 2);
        d.images(i, 0) = (c ? 1.0 : -1.0) + 0.3 * rng.normal();
        d.images(i, 1) = 0.5 * rng.normal();
        if ((c == 1) != (d.images(i, 0) > 0.2)) d.images(i, 0) = c ? 1.0 : -1.0;
        d.labels.push_back(c);
    }
    return d;
}

}  // namespace

TEST(Relax, NaturalParameterExample) {
    const rmm::RmmParams p = rmm::RmmParams::uniform(Tensor({1, 1, 2}, {3, 4}), 1.0);
    const relax::DiscriminativeParams d = relax::relax(p);
    EXPECT_EQ(d.weights.storage(), (std::vector<double>{3, 4}));
    EXPECT_DOUBLE_EQ(d.biases[0], -12.5);
    EXPECT_EQ(d.provenance, relax::Provenance::relaxed_from_generative);
}

TEST(Relax, ShapesFollowTheSource) {
    Rng rng(1);
    const deep::DrmmParams p = oracle::random_small_model(rng, 2, 4, 3, 3);
    const relax::DiscriminativeParams d = relax::relax(p);
    ASSERT_EQ(d.stages.size(), 2u);
    for (std::size_t l = 0; l < 2; ++l) {
        EXPECT_EQ(d.stages[l].weights.shape(), p.layers[l].filters.shape());
        EXPECT_EQ(d.stages[l].input_shape, p.layers[l].input_shape);
    }
    EXPECT_EQ(d.weights.shape(), (Shape{3, 1, p.top_dim()}));
    EXPECT_NO_THROW(d.validate());
}

TEST(Relax, ShallowDecisionsAndScoresArePreserved) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        rmm::RmmParams p = rmm::RmmParams::uniform(oracle::random_tensor(rng, {3, 2, 5}), 0.5 + rng.uniform(),
                                                   0.2 + 0.6 * rng.uniform());
        const auto nat = rmm::to_natural(p);
        const auto d = relax::relax(p);
        for (int i = 0; i < 50; ++i) {
            const Tensor img = oracle::random_tensor(rng, {5});
            EXPECT_EQ(relax::scores(d, img), rmm::relu_scores(nat, img));
            EXPECT_EQ(relax::classify(d, img).c, rmm::classify_relu(nat, img).c);
        }
    }
}

TEST(Relax, DeepDecisionsArePreserved) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        deep::DrmmParams p = oracle::random_small_model(rng, 1 + trial % 3, 5, 3, 4);
        oracle::randomize(p, rng, false);
        const auto d = relax::relax(p);
        for (int i = 0; i < 20; ++i) {
            const Tensor img = oracle::random_tensor(rng, p.input_shape);
            const deep::BottomUp up = deep::bottom_up(p, img);
            EXPECT_EQ(relax::scores(d, img), up.scores);
            EXPECT_EQ(relax::classify(d, img).c, up.c_hat);
        }
    }
}

TEST(TrainDiscriminative, ZeroRateKeepsParameters) {
    Rng rng(4);
    const Dataset data = separable_toy(rng, 20);
    const auto d = relax::relax(rmm::RmmParams::uniform(oracle::random_tensor(rng, {2, 2, 2}), 1.0));
    learn::TrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.steps_per_epoch = 1;
    const auto out = relax::train_discriminative(d, data, cfg);
    EXPECT_EQ(out.weights, d.weights);
}

TEST(TrainDiscriminative, SeparableToyReachesZeroErrorAndDrifts) {
    Rng rng(5);
    const Dataset data = separable_toy(rng, 60);
    const rmm::RmmParams gen = rmm::RmmParams::uniform(Tensor({2, 2, 2}, {0.1, 1, 0, 0.2, 0.1, -1, 0.3, 0}), 1.0);
    const auto d = relax::relax(gen);
    learn::TrainConfig cfg;
    cfg.epochs = 60;
    cfg.batch_size = 10;
    cfg.learning_rate = 0.2;
    cfg.seed = 3;
    const auto out = relax::train_discriminative(d, data, cfg);
    EXPECT_EQ(relax::error_rate(out, data, false), 0.0);
    EXPECT_GE(relax::conditional_log_likelihood(out, data, false),
              relax::conditional_log_likelihood(d, data, false) - 1e-6);
    double drift = 0.0;
    for (std::size_t k = 0; k < 4; ++k) {
        const double norm2 = squared_norm(out.weights.values().subspan(k * 2, 2));
        drift = std::max(drift, std::abs(out.biases[k] + 0.5 * norm2));
    }
    EXPECT_GT(drift, 1e-6);
}

TEST(TrainDiscriminative, DeepPathImprovesConditionalLikelihood) {
    Rng rng(6);
    deep::DrmmParams p = deep::make_drmm({4, 4, 1}, {deep::LayerSpec{ConvSpec{3, 2, 2, 1, 1, Padding::valid}, PoolSpec{}}}, 2);
    Dataset data;
    data.images = oracle::random_nonneg(rng, {30, 4, 4, 1});
    for (std::size_t n = 0; n < 30; ++n) {
        const int c = static_cast<int>(n % 2);
        for (std::size_t y = 0; y < 4; ++y) data.images[n * 16 + y * 4 + (c ? 3 : 0)] += 2.0;
        data.labels.push_back(c);
    }
    learn::TrainConfig cfg;
    learn::initialize(p, data, cfg);
    const auto d = relax::relax(p);
    cfg.epochs = 20;
    cfg.batch_size = 5;
    cfg.learning_rate = 0.05;
    const auto out = relax::train_discriminative(d, data, cfg);
    EXPECT_GE(relax::conditional_log_likelihood(out, data, false),
              relax::conditional_log_likelihood(d, data, false) - 1e-6);
    EXPECT_EQ(out.provenance, relax::Provenance::relaxed_from_generative);
}
