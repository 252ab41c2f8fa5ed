#include <cmath>
#include <fstream>

#include "doctest.h"
#include "eptq/bn_fold.hpp"
#include "eptq/model_io.hpp"
#include "eptq/tape.hpp"
#include "test_support.hpp"

using namespace eptq;
using eptq::testing::make_conv_bn_net;
using eptq::testing::random_tensor;
using eptq::testing::temp_dir;

TEST_CASE("identity batchnorm folding leaves weights unchanged") {
  Rng rng(81);
  NetworkGraph g = make_conv_bn_net(2, 4, 3, 3, rng);
  LayerSpec& bn = g.layers[1];
  for (std::size_t i = 0; i < 3; ++i) {
    bn.bn->gamma[i] = 1.0;
    bn.bn->beta[i] = 0.0;
    bn.bn->mean[i] = 0.0;
    bn.bn->variance[i] = 1.0;
  }
  bn.bn->eps = 0.0;
  const Tensor w_before = *g.layers[0].weights;
  const Tensor b_before = *g.layers[0].bias;
  NetworkGraph folded = fold_batchnorm(g);
  CHECK(folded.layers.size() == g.layers.size() - 1);
  for (std::size_t i = 0; i < w_before.size(); ++i) {
    CHECK((*folded.layers[0].weights)[i] == w_before[i]);
  }
  for (std::size_t i = 0; i < b_before.size(); ++i) {
    CHECK((*folded.layers[0].bias)[i] == b_before[i]);
  }
}

TEST_CASE("folded graph preserves float outputs over random inputs") {
  Rng rng(82);
  NetworkGraph g = make_conv_bn_net(2, 5, 4, 3, rng);
  NetworkGraph folded = fold_batchnorm(g);
  for (const auto& layer : folded.layers) CHECK(layer.kind != LayerKind::BatchNorm);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor x = random_tensor({2, 5, 5}, rng);
    const Tensor y0 = forward_record(g, x).output;
    const Tensor y1 = forward_record(folded, x).output;
    for (std::size_t i = 0; i < y0.size(); ++i) {
      CHECK(std::fabs(y0[i] - y1[i]) < 1e-10);
    }
  }
}

TEST_CASE("comparison points on the BatchNorm remap to the folded producer") {
  Rng rng(83);
  NetworkGraph g = make_conv_bn_net(2, 4, 3, 3, rng);
  g.comparison_points = {1, 2, 4};  // points at the BN itself, the relu, the head
  NetworkGraph folded = fold_batchnorm(g);
  // BN (id 1) folds into conv (id 0); relu shifts to id 1, dense to id 3.
  CHECK(folded.comparison_points == std::vector<int>{0, 1, 3});
}

TEST_CASE("folding a BN-free graph is the structural identity") {
  Rng rng(84);
  NetworkGraph g = eptq::testing::make_branchy_net(4, rng);
  NetworkGraph folded = fold_batchnorm(g);
  const std::string dir = temp_dir("bn_id");
  save_model(g, dir + "/a.eptq.json");
  save_model(folded, dir + "/b.eptq.json");
  auto slurp = [](const std::string& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  };
  CHECK(slurp(dir + "/a.eptq.json") == slurp(dir + "/b.eptq.json"));
  CHECK(slurp(dir + "/a.eptq.bin") == slurp(dir + "/b.eptq.bin"));
}

TEST_CASE("folding is idempotent") {
  Rng rng(85);
  NetworkGraph g = make_conv_bn_net(1, 4, 2, 2, rng);
  NetworkGraph once = fold_batchnorm(g);
  NetworkGraph twice = fold_batchnorm(once);
  CHECK(once.layers.size() == twice.layers.size());
  Rng probe(86);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = random_tensor({1, 4, 4}, probe);
    const Tensor y0 = forward_record(once, x).output;
    const Tensor y1 = forward_record(twice, x).output;
    for (std::size_t i = 0; i < y0.size(); ++i) CHECK(y0[i] == y1[i]);
  }
}

TEST_CASE("BatchNorm without a weighted predecessor is rejected") {
  Rng rng(87);
  NetworkGraph g;
  g.input_shape = {3};
  LayerSpec relu;
  relu.kind = LayerKind::Relu;
  relu.name = "r";
  relu.inputs = {-1};
  g.layers.push_back(std::move(relu));
  LayerSpec bn;
  bn.kind = LayerKind::BatchNorm;
  bn.name = "bn";
  bn.inputs = {0};
  BatchNormAttrs attrs;
  attrs.gamma = Tensor({3}, {1, 1, 1});
  attrs.beta = Tensor({3});
  attrs.mean = Tensor({3});
  attrs.variance = Tensor({3}, {1, 1, 1});
  bn.bn = std::move(attrs);
  g.layers.push_back(std::move(bn));
  CHECK_THROWS_WITH_AS(fold_batchnorm(g), doctest::Contains("Dense or Conv2d"), std::exception);
}
