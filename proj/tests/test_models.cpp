// Copyright 2026 The FedFisher Simulator Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// =============================================================================

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedfisher/datasets.hpp"
#include "fedfisher/models.hpp"
#include "oracle/oracle.hpp"
#include "test_util.hpp"

namespace fedfisher {
namespace {

TwoLayerReLU hand_net(std::size_t m, std::size_t p, Vector w, Vector a) {
  TwoLayerReLU net;
  net.m = m;
  net.p = p;
  net.first_layer = std::move(w);
  net.second_layer = std::move(a);
  net.validate();
  return net;
}

TEST(InitTwoLayer, DeterministicSignsAndScale) {
  const auto a = init_two_layer(64, 3, 0.5, 9);
  const auto b = init_two_layer(64, 3, 0.5, 9);
  EXPECT_EQ(a.first_layer, b.first_layer);
  EXPECT_EQ(a.second_layer, b.second_layer);
  for (double s : a.second_layer) EXPECT_TRUE(s == 1.0 || s == -1.0);
  EXPECT_NEAR(a.scale(), 1.0 / 8.0, 1e-15);
}

TEST(InitTwoLayer, EmpiricalStdMatchesKappa) {
  for (double kappa : {0.5, 2.0}) {
    const auto net = init_two_layer(10000, 1, kappa, 4);
    double sq = 0.0;
    for (double w : net.first_layer) sq += w * w;
    EXPECT_NEAR(std::sqrt(sq / 10000.0), std::sqrt(kappa), 0.05 * std::sqrt(kappa));
    double plus = 0.0;
    for (double s : net.second_layer) plus += s > 0;
    EXPECT_NEAR(plus / 10000.0, 0.5, 0.03);
  }
}

TEST(InitTwoLayer, TinyKappaGivesNearZeroOutput) {
  const auto net = init_two_layer(32, 2, 1e-30, 1);
  EXPECT_NEAR(forward(net, Vector{0.6, 0.8}), 0.0, 1e-12);
  EXPECT_THROW(init_two_layer(4, 2, 0.0, 1), std::invalid_argument);
}

TEST(TwoLayerForward, HandEvaluation) {
  const auto net = hand_net(2, 2, {1, 0, 0, 1}, {1, -1});
  EXPECT_NEAR(forward(net, Vector{1, 1}), 0.0, 1e-15);
  EXPECT_NEAR(forward(net, Vector{2, 1}), (2.0 - 1.0) / std::sqrt(2.0), 1e-15);
  EXPECT_EQ(forward(hand_net(2, 2, {0, 0, 0, 0}, {1, -1}), Vector{1, 1}), 0.0);
  EXPECT_THROW(forward(net, Vector{1, 1, 1}), std::invalid_argument);
}

TEST(TwoLayerForward, PositiveHomogeneityAndFeatureConsistency) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    const auto net = init_two_layer(40, 5, 0.5, t);
    const Vector x = testing::random_vector(rng, 5);
    const double c = 0.1 + 3.0 * (t % 7);
    Vector cx = x;
    for (double& v : cx) v *= c;
    EXPECT_NEAR(forward(net, cx), c * forward(net, x), 1e-10 * (1 + c));
    EXPECT_NEAR(forward(net, x), dot(feature_map(net, x), net.parameters()), 1e-10);
  }
}

TEST(FeatureMap, HandCases) {
  const auto one = hand_net(1, 1, {1}, {1});
  EXPECT_EQ(feature_map(one, Vector{1}), (Vector{1}));
  const auto two = hand_net(2, 2, {1, 0, 0, 1}, {1, -1});
  EXPECT_EQ(feature_map(two, Vector{-1, -1}), Vector(4, 0.0));
  // x^T w = 0 counts as active
  const Vector phi = feature_map(two, Vector{0, 1});
  EXPECT_NEAR(phi[1], 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(phi[3], -1.0 / std::sqrt(2.0), 1e-15);
}

TEST(FeatureMap, NormBoundedByInputNorm) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    const auto net = init_two_layer(17, 4, 1.0, t);
    const Vector x = testing::random_vector(rng, 4);
    const double phi2 = dot(feature_map(net, x), feature_map(net, x));
    EXPECT_LE(phi2, dot(x, x) + 1e-12);
    Vector u = x;
    for (double& v : u) v /= norm2(x);
    EXPECT_LE(norm2(feature_map(net, u)), 1.0 + 1e-12);
  }
}

TEST(Gradient, ZeroAtExactFit) {
  const auto net = init_two_layer(8, 3, 0.5, 1);
  std::vector<Example> batch;
  std::mt19937_64 rng(4);
  for (int j = 0; j < 5; ++j) {
    Vector x = testing::random_vector(rng, 3);
    batch.push_back({x, forward(net, x)});
  }
  for (double g : gradient(net, batch, LossKind::squared)) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Gradient, TwoLayerIsResidualTimesFeatureMap) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 10; ++t) {
    const auto net = init_two_layer(30, 4, 0.5, t);
    const auto batch = testing::random_regression(rng, 12, 4);
    Vector want(net.num_params(), 0.0);
    for (const auto& e : batch)
      axpy((forward(net, e.x) - e.y) / static_cast<double>(batch.size()), feature_map(net, e.x), want);
    const Vector got = gradient(net, batch, LossKind::squared);
    for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(got[k], want[k], 1e-12);
  }
  EXPECT_THROW(gradient(init_two_layer(2, 2, 1, 0), std::vector<Example>{{{1, 1}, 0}}, LossKind::softmax_cross_entropy),
               std::invalid_argument);
}

TEST(Gradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 10; ++t) {
    const std::size_t in = 3 + static_cast<std::size_t>(t % 3);
    const std::vector<std::size_t> dims{in, 5, 4, t % 2 ? std::size_t{1} : std::size_t{3}};
    const Head head = dims.back() == 1 ? Head::regression : Head::softmax;
    const MLP net = init_mlp(dims, head, t);
    const auto batch = head == Head::regression ? testing::random_regression(rng, 6, dims[0])
                                                : testing::random_classification(rng, 6, dims[0], dims.back());
    const LossKind loss = loss_for(net);
    const Vector got = gradient(net, batch, loss);
    const Vector want = oracle::fd_gradient(net, std::span<const Example>(batch), loss, 1e-5);
    EXPECT_LE(testing::rel_error(got, want), 1e-4) << "trial " << t;
  }
}

TEST(Mlp, ConstructionInvariants) {
  EXPECT_THROW(MLP({3}, Head::softmax), std::invalid_argument);
  EXPECT_THROW(MLP({3, 0, 2}, Head::softmax), std::invalid_argument);
  EXPECT_THROW(MLP({3, 2}, Head::regression), std::invalid_argument);
  const MLP net({4, 3, 2}, Head::softmax);
  EXPECT_EQ(net.num_params(), 3u * 5 + 2u * 4);
  EXPECT_EQ(net.layers()[0].activation, Activation::relu);
  EXPECT_EQ(net.layers()[1].activation, Activation::identity);
  EXPECT_EQ(net.layers()[1].offset, 15u);
}

TEST(Mlp, ColumnMajorWeightLayout) {
  // one linear layer 2 -> 2, params = vec([W | b]) column-major
  const MLP net = MLP({2, 2}, Head::softmax).with_parameters({1, 2, 3, 4, 5, 6});
  // W = [[1,3],[2,4]], b = (5,6)
  const Vector z = forward(net, Vector{1, 10});
  EXPECT_EQ(z, (Vector{1 + 30 + 5, 2 + 40 + 6}));
}

TEST(SgdTrain, ZeroStepSizeLeavesModelUnchanged) {
  std::mt19937_64 rng(7);
  const auto data = testing::random_regression(rng, 20, 3);
  const MLP net = init_mlp({3, 4, 1}, Head::regression, 1);
  TrainConfig cfg;
  cfg.eta = 0.0;
  cfg.count = 5;
  const auto out = sgd_train(net, data, cfg, 0, LossKind::squared);
  EXPECT_EQ(out.model, net);
}

TEST(SgdTrain, FullBatchLinearRegressionDecreasesEveryStep) {
  std::vector<Example> data;
  for (int j = 0; j < 10; ++j) data.push_back({{0.1 * j}, 2.0 * 0.1 * j + 1.0});
  MLP net = MLP({1, 1}, Head::regression);
  TrainConfig cfg{0.1, 0.0, 1, TrainUnit::steps, 1000};
  double prev = loss_eval(net, data, LossKind::squared);
  for (int step = 0; step < 50; ++step) {
    net = sgd_train(net, data, cfg, 0, LossKind::squared).model;
    const double cur = loss_eval(net, data, LossKind::squared);
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(SgdTrain, SyntheticClientFitsItsData) {
  const auto data = gen_synthetic(0, 1, 100, 2).dataset.examples;
  const auto net = init_two_layer(512, 2, 0.5, 3);
  TrainConfig cfg{0.1, 0.0, 2048, TrainUnit::steps, 1000};
  const double before = loss_eval(net, data, LossKind::squared);
  const auto out = sgd_train(net, data, cfg, 0, LossKind::squared);
  EXPECT_FALSE(out.diverged);
  EXPECT_EQ(out.steps, 2048u);
  EXPECT_LT(loss_eval(out.model, data, LossKind::squared), 1e-2 * before);
}

TEST(SgdTrain, LocalLossRatioDecreasesWithSteps) {
  const auto data = gen_synthetic(1, 1, 100, 2).dataset.examples;
  const auto net = init_two_layer(256, 2, 0.5, 3);
  double prev = loss_eval(net, data, LossKind::squared);
  for (std::size_t k : {16u, 64u, 256u, 1024u}) {
    TrainConfig cfg{0.1, 0.0, k, TrainUnit::steps, 1000};
    const double cur = loss_eval(sgd_train(net, data, cfg, 0, LossKind::squared).model, data, LossKind::squared);
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(SgdTrain, DeterministicGivenSeedAndSeedSensitive) {
  std::mt19937_64 rng(8);
  const auto data = testing::random_classification(rng, 50, 4, 3);
  const MLP net = init_mlp({4, 6, 3}, Head::softmax, 2);
  TrainConfig cfg{0.05, 0.9, 3, TrainUnit::epochs, 8};
  const auto a = sgd_train(net, data, cfg, 11, LossKind::softmax_cross_entropy);
  const auto b = sgd_train(net, data, cfg, 11, LossKind::softmax_cross_entropy);
  const auto c = sgd_train(net, data, cfg, 12, LossKind::softmax_cross_entropy);
  EXPECT_EQ(a.model, b.model);
  EXPECT_NE(a.model, c.model);
  EXPECT_EQ(a.steps, 3u * 7u);
}

TEST(SgdTrain, DivergenceKeepsLastFiniteIterate) {
  std::mt19937_64 rng(9);
  const auto data = testing::random_regression(rng, 20, 3);
  const MLP net = init_mlp({3, 8, 1}, Head::regression, 1);
  TrainConfig cfg{1e6, 0.0, 200, TrainUnit::steps, 1000};
  const auto out = sgd_train(net, data, cfg, 0, LossKind::squared);
  EXPECT_TRUE(out.diverged);
  EXPECT_LT(out.steps, 200u);
  EXPECT_TRUE(all_finite(out.model.parameters()));
}

TEST(LossEval, ZeroModelAndPerfectFit) {
  const auto data = gen_synthetic(2, 2, 50, 2).dataset.examples;
  const auto zero = hand_net(2, 2, {0, 0, 0, 0}, {1, -1});
  double half_mean_sq = 0.0;
  for (const auto& e : data) half_mean_sq += 0.5 * e.y * e.y / static_cast<double>(data.size());
  EXPECT_NEAR(loss_eval(zero, data, LossKind::squared), half_mean_sq, 1e-14);
  std::vector<Example> fit;
  for (const auto& e : data) fit.push_back({e.x, forward(zero, e.x)});
  EXPECT_EQ(loss_eval(zero, fit, LossKind::squared), 0.0);
  EXPECT_THROW(loss_eval(zero, std::vector<Example>{}, LossKind::squared), std::invalid_argument);
}

TEST(AccuracyEval, RandomLabelsGiveChanceAccuracy) {
  std::mt19937_64 rng(10);
  const std::size_t n = 4000, classes = 10;
  const auto data = testing::random_classification(rng, n, 5, classes);
  const MLP net = init_mlp({5, 16, classes}, Head::softmax, 3);
  const double acc = accuracy_eval(net, data);
  const double sigma = std::sqrt(0.1 * 0.9 / static_cast<double>(n));
  EXPECT_NEAR(acc, 0.1, 3 * sigma);
}

TEST(Softmax, StableForLargeLogits) {
  const Vector p = softmax(Vector{1000, 1000, -1000});
  EXPECT_NEAR(p[0], 0.5, 1e-15);
  EXPECT_NEAR(p[2], 0.0, 1e-15);
  Vector dz;
  const double loss = output_loss(Vector{1000, 0}, 1.0, LossKind::softmax_cross_entropy, &dz);
  EXPECT_NEAR(loss, 1000.0, 1e-9);
  EXPECT_NEAR(dz[1], -1.0, 1e-12);
}

}  // namespace
}  // namespace fedfisher
