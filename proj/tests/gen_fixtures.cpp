// Writes the committed test fixtures: a trained toy classifier with labeled
// train/held-out datasets, a conv+batchnorm model with calibration inputs,
// and a trained multi-branch model for the attention-weighting comparisons.
// Regenerate with:  eptq_gen_fixtures <output-dir>
#include <cstdio>
#include <string>

#include "eptq/model_io.hpp"
#include "test_support.hpp"

using namespace eptq;
using namespace eptq::testing;

int main(int argc, char** argv) {
  const std::string dir = argc > 1 ? argv[1] : "tests/fixtures";

  {
    Rng rng(1007);
    Dataset train = make_cluster_dataset(1024, 8, 3, rng, 0.45, 1007);
    Dataset heldout = make_cluster_dataset(256, 8, 3, rng, 0.45, 1007);
    NetworkGraph g = make_dense_net({8, 12, 6, 3}, rng);
    const double loss = train_classifier(g, train, 900, 1.5, rng);
    for (auto& layer : g.layers) {
      layer.bits_weight = 8;
      layer.bits_activation = 8;
    }
    save_model(g, dir + "/toy_classifier.eptq.json");
    save_dataset(train, {8}, dir + "/toy_train.eptqd");
    save_dataset(heldout, {8}, dir + "/toy_heldout.eptqd");
    std::printf("toy_classifier: train_loss=%.4f heldout_acc=%.4f\n", loss,
                accuracy(g, nullptr, heldout));
  }

  {
    Rng rng(2019);
    NetworkGraph g = make_conv_bn_net(2, 5, 4, 3, rng);
    save_model(g, dir + "/conv_bn.eptq.json");
    Dataset inputs;
    for (int i = 0; i < 64; ++i) inputs.inputs.push_back(random_tensor({2, 5, 5}, rng, 0.8));
    save_dataset(inputs, {2, 5, 5}, dir + "/conv_inputs.eptqd");
    std::printf("conv_bn: %zu layers\n", g.layers.size());
  }

  {
    // Heterogeneous-layer fixture: a trained residual trunk plus a grafted
    // distractor branch whose activations are large but whose influence on
    // the output is tiny. Layer attention varies by orders of magnitude.
    Rng rng(3301);
    Dataset train = make_cluster_dataset(512, 8, 3, rng, 0.45, 2);

    NetworkGraph trunk;
    trunk.input_shape = {8};
    auto dense = [&](const std::string& name, int input, std::size_t out, std::size_t in,
                     double scale) {
      LayerSpec layer;
      layer.name = name;
      layer.kind = LayerKind::Dense;
      layer.inputs = {input};
      layer.weights = random_tensor({out, in}, rng, scale / std::sqrt(double(in)));
      layer.bias = random_tensor({out}, rng, 0.05);
      return layer;
    };
    auto unary = [&](const std::string& name, LayerKind kind, int input) {
      LayerSpec layer;
      layer.name = name;
      layer.kind = kind;
      layer.inputs = {input};
      return layer;
    };
    trunk.layers.push_back(dense("fc1", -1, 12, 8, 1.0));       // 0
    trunk.layers.push_back(unary("relu1", LayerKind::Relu, 0)); // 1
    trunk.layers.push_back(dense("fc2", 1, 12, 12, 1.0));       // 2
    LayerSpec res;
    res.name = "res_add";
    res.kind = LayerKind::Add;
    res.inputs = {1, 2};
    trunk.layers.push_back(std::move(res));                     // 3
    trunk.layers.push_back(dense("fc3", 3, 6, 12, 1.0));        // 4
    trunk.layers.push_back(unary("relu2", LayerKind::Relu, 4)); // 5
    trunk.layers.push_back(dense("head", 5, 3, 6, 1.0));        // 6
    trunk.comparison_points = {1, 3, 5, 6};
    trunk.validate();
    const double loss = train_classifier(trunk, train, 600, 1.2, rng);

    NetworkGraph g = trunk;
    g.layers.push_back(dense("big_fc", 3, 10, 12, 4.0));          // 7: large activations
    g.layers.push_back(unary("big_relu", LayerKind::Relu, 7));    // 8
    g.layers.push_back(dense("tiny_proj", 8, 3, 10, 0.01));       // 9: negligible output pull
    LayerSpec out_add;
    out_add.name = "out_add";
    out_add.kind = LayerKind::Add;
    out_add.inputs = {6, 9};
    g.layers.push_back(std::move(out_add));                       // 10
    g.comparison_points = {1, 3, 5, 6, 8, 9, 10};
    for (auto& layer : g.layers) {
      layer.bits_weight = 8;
      layer.bits_activation = 8;
    }
    g.validate();
    save_model(g, dir + "/hetero.eptq.json");
    save_dataset(train, {8}, dir + "/hetero_train.eptqd");
    std::printf("hetero: trunk_loss=%.4f acc=%.4f\n", loss, accuracy(g, nullptr, train));
  }
  return 0;
}
