#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "kml/autodiff.hpp"
#include "kml/network.hpp"
#include "oracles.hpp"

using namespace kml;
using kml::testing::naive_conv2d;
using kml::testing::naive_dense;
using kml::testing::random_tensor;

namespace {

Tensor rows_of(const Tensor& x, const std::vector<std::size_t>& rows) {
  const std::size_t width = x.numel() / x.shape()[0];
  std::vector<double> v;
  for (std::size_t r : rows)
    v.insert(v.end(), x.values().begin() + static_cast<long>(r * width),
             x.values().begin() + static_cast<long>((r + 1) * width));
  Shape s = x.shape();
  s[0] = rows.size();
  return Tensor::from_values(s, v);
}

}  // namespace

TEST(Architecture, DeskConvShapes) {
  Architecture a = named_architecture("desk", {1, 16, 16});
  ASSERT_EQ(a.layers.size(), 3u);
  EXPECT_EQ(a.layer_output_shape(0), (Shape{8, 8, 8}));
  EXPECT_EQ(a.layer_output_shape(2), (Shape{32, 2, 2}));
  EXPECT_EQ(a.feature_dim(), 32u);
  EXPECT_EQ(named_architecture("desk", {20}).layers.front().kind, LayerKind::dense);
}

TEST(Architecture, FourConvStackShapes) {
  Architecture a = named_architecture("paper-4conv", {});
  EXPECT_EQ(a.input, (Shape{3, 84, 84}));
  EXPECT_EQ(a.layers[3].weight_shape(), (Shape{256, 128, 3, 3}));
  EXPECT_EQ(a.layer_output_shape(3), (Shape{256, 4, 4}));
}

TEST(Architecture, CustomWidths) {
  Architecture c = named_architecture("conv:4,8,8", {1, 12, 12});
  ASSERT_EQ(c.layers.size(), 3u);
  EXPECT_EQ(c.layers[1].weight_shape(), (Shape{8, 4, 3, 3}));
  EXPECT_EQ(c.layer_output_shape(2), (Shape{8, 2, 2}));
  EXPECT_EQ(c.name, "conv:4,8,8");
  Architecture d = named_architecture("dense:7", {5});
  EXPECT_EQ(d.layers[0].weight_shape(), (Shape{7, 5}));
  for (const char* bad : {"conv:", "conv:4,,8", "conv:0", "conv:4x", "dense:3"})
    EXPECT_THROW(named_architecture(bad, {1, 8, 8}), ConfigError) << bad;
  EXPECT_THROW(named_architecture("conv:4", {6}), ConfigError);
}

TEST(Architecture, RejectsBadDescriptions) {
  EXPECT_THROW(named_architecture("huge", {1, 8, 8}), ConfigError);
  Architecture a = conv_architecture({1, 8, 8}, {4, 4}, 3, {1, 1});
  a.layers[1].in = 5;
  EXPECT_THROW(a.validate(), ContractViolation);
  // 4x4 input shrinks below one pixel under three valid stride-2 convs.
  EXPECT_THROW(conv_architecture({1, 4, 4}, {2, 2, 2}, 3, {2, 0}), ContractViolation);
}

TEST(ForwardBase, ZeroWeightsGiveZeroOutput) {
  Architecture a = named_architecture("desk", {1, 12, 12});
  BaseParams p = init_base(a, 0, 1, 0);
  for (auto& w : p.weights) w = Tensor::zeros(w.shape());
  std::mt19937_64 rng(1);
  Tensor y = forward_base(a, random_tensor({3, 1, 12, 12}, rng), p);
  EXPECT_EQ(y.shape(), (Shape{3, 32}));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(ForwardBase, FeatureWidthMatchesLastLayer) {
  Architecture a = conv_architecture({2, 10, 10}, {5, 7}, 3, {2, 1});
  std::mt19937_64 rng(2);
  Tensor y = forward_base(a, random_tensor({4, 2, 10, 10}, rng), init_base(a, 0, 3, 0));
  EXPECT_EQ(y.shape(), (Shape{4, 7}));
  a.pool = FeaturePool::flatten;
  EXPECT_EQ(forward_base(a, random_tensor({4, 2, 10, 10}, rng), init_base(a, 0, 3, 0)).shape(),
            (Shape{4, 7 * 3 * 3}));
}

TEST(ForwardBase, MatchesStraightLineConvOracle) {
  Architecture a = conv_architecture({2, 9, 9}, {3, 4}, 3, {2, 1});
  std::mt19937_64 rng(4);
  BaseParams p = init_base(a, 5, 7, 0);
  for (auto& b : p.biases) b = random_tensor(b.shape(), rng);
  p.head_bias = random_tensor(p.head_bias.shape(), rng);
  Tensor x = random_tensor({2, 2, 9, 9}, rng);

  Shape s = x.shape();
  std::vector<double> h(x.values().begin(), x.values().end());
  for (std::size_t l = 0; l < 2; ++l) {
    Shape next;
    h = naive_conv2d(h, s, p.weights[l].values(), p.weights[l].shape(), p.biases[l].values(), 2, 1,
                     &next);
    for (double& v : h) v = std::max(v, 0.0);
    s = next;
  }
  const std::size_t hw = s[2] * s[3];
  std::vector<double> pooled(s[0] * s[1], 0.0);
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    for (std::size_t j = 0; j < hw; ++j) pooled[i] += h[i * hw + j];
    pooled[i] /= static_cast<double>(hw);
  }
  auto logits = naive_dense(pooled, 2, 4, p.head_weight.values(), 5, p.head_bias.values());

  Tensor y = forward_base(a, x, p);
  ASSERT_EQ(y.shape(), (Shape{2, 5}));
  for (std::size_t i = 0; i < logits.size(); ++i) EXPECT_NEAR(y[i], logits[i], 1e-12);
}

TEST(ForwardBase, MatchesStraightLineDenseOracle) {
  Architecture a = dense_architecture(6, {5, 4});
  std::mt19937_64 rng(5);
  BaseParams p = init_base(a, 0, 2, 0);
  for (auto& b : p.biases) b = random_tensor(b.shape(), rng);
  Tensor x = random_tensor({3, 6}, rng);
  std::vector<double> h(x.values().begin(), x.values().end());
  std::size_t in = 6;
  for (std::size_t l = 0; l < 2; ++l) {
    h = naive_dense(h, 3, in, p.weights[l].values(), a.layers[l].out, p.biases[l].values());
    for (double& v : h) v = std::max(v, 0.0);
    in = a.layers[l].out;
  }
  Tensor y = forward_base(a, x, p);
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(y[i], h[i], 1e-12);
}

TEST(ForwardBase, InputShapeMismatchIsContractViolation) {
  Architecture a = named_architecture("desk", {1, 12, 12});
  BaseParams p = init_base(a, 0, 1, 0);
  EXPECT_THROW(forward_base(a, Tensor::zeros({2, 1, 10, 12}), p), ContractViolation);
  EXPECT_THROW(forward_base(a, Tensor::zeros({1, 12, 12}), p), ContractViolation);
}

TEST(ForwardBase, DifferentiableEndToEnd) {
  Architecture a = named_architecture("desk", {1, 12, 12});
  BaseParams p = init_base(a, 3, 1, 0);
  std::vector<Tensor> leaves;
  for (const Tensor& t : p.tensors()) leaves.push_back(t.as_parameter());
  BaseParams q = p.with_tensors(leaves);
  std::mt19937_64 rng(8);
  const std::vector<int> labels{0, 1, 2, 0};
  Tensor loss = softmax_cross_entropy(forward_base(a, random_tensor({4, 1, 12, 12}, rng), q), labels);
  auto g = grad(loss, leaves);
  double norm = 0.0;
  for (const Tensor& t : g)
    for (double v : t.values()) norm += v * v;
  EXPECT_GT(norm, 0.0);
}

TEST(Encoder, OutputWidthIsDUpsilon) {
  Architecture a = named_architecture("desk", {1, 12, 12});
  EncoderParams e = init_encoder(a, 24, 3, 100);
  std::mt19937_64 rng(9);
  EXPECT_EQ(encode_task(a, random_tensor({5, 1, 12, 12}, rng), e).shape(), (Shape{24}));
}

TEST(Encoder, InvariantToSupportPermutation) {
  Architecture a = named_architecture("desk", {1, 12, 12});
  EncoderParams e = init_encoder(a, 16, 3, 100);
  std::mt19937_64 rng(10);
  Tensor s = random_tensor({6, 1, 12, 12}, rng);
  std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  Tensor u = encode_task(a, s, e), v = encode_task(a, rows_of(s, perm), e);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(u[i], v[i], 1e-12);
}

TEST(Encoder, InvariantToDuplication) {
  Architecture a = dense_architecture(7, {9, 9});
  EncoderParams e = init_encoder(a, 12, 4, 100);
  std::mt19937_64 rng(11);
  Tensor s = random_tensor({4, 7}, rng);
  Tensor u = encode_task(a, s, e), v = encode_task(a, rows_of(s, {0, 1, 2, 3, 0, 1, 2, 3}), e);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(u[i], v[i], 1e-12);
}

TEST(Encoder, EmptySupportIsContractViolation) {
  Architecture a = dense_architecture(3, {4});
  EncoderParams e = init_encoder(a, 2, 1, 0);
  EXPECT_THROW(encode_task(a, Tensor(), e), ContractViolation);
}

TEST(Generator, LayoutFollowsStructure) {
  Architecture a = conv_architecture({3, 8, 8}, {4, 6}, 3, {1, 1});
  auto film = generator_layout(a, {ModulationKind::film, GeneratorStructure::simplified, 1, 10});
  ASSERT_EQ(film.size(), 2u);
  EXPECT_EQ(film[1].shape, (Shape{12, 10}));
  auto kml = generator_layout(a, {ModulationKind::kml, GeneratorStructure::simplified, 2, 10});
  ASSERT_EQ(kml.size(), 10u);
  EXPECT_EQ(kml[0].shape, (Shape{4, 10}));
  EXPECT_EQ(kml[1].shape, (Shape{27, 10}));
  EXPECT_EQ(kml[4].name, "bias");
  EXPECT_TRUE(generator_layout(a, {ModulationKind::none, {}, 1, 10}).empty());
}

TEST(Generator, ZeroOutputInitOnlyFillsPartnerMaps) {
  Architecture a = conv_architecture({1, 8, 8}, {3}, 3, {1, 1});
  GeneratorSpec spec{ModulationKind::kml, GeneratorStructure::simplified, 1, 6};
  GeneratorParams g = init_generator(a, spec, GeneratorInit::zero_output, 1.0, 5, 200);
  auto all_zero = [](const Tensor& t) {
    return std::all_of(t.values().begin(), t.values().end(), [](double v) { return v == 0.0; });
  };
  EXPECT_TRUE(all_zero(g.layers[0][0]));
  EXPECT_FALSE(all_zero(g.layers[0][1]));
  EXPECT_TRUE(all_zero(g.layers[0][2]));
  GeneratorParams z = init_generator(a, spec, GeneratorInit::zero, 1.0, 5, 200);
  for (const Tensor& t : z.tensors()) EXPECT_TRUE(all_zero(t));
}

TEST(Generator, TensorRoundTrip) {
  Architecture a = conv_architecture({1, 8, 8}, {3, 2}, 3, {1, 1});
  GeneratorParams g = init_generator(a, {ModulationKind::kml, GeneratorStructure::simplified, 2, 4},
                                     GeneratorInit::uniform, 1.0, 5, 200);
  auto t = g.tensors();
  GeneratorParams back = g.with_tensors(t);
  ASSERT_EQ(back.layers.size(), 2u);
  EXPECT_TRUE(back.layers[1][3].same_node(g.layers[1][3]));
}
