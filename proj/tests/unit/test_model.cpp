#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "nodetl/model.hpp"
#include "support/oracles.hpp"

namespace nodetl {
namespace {

SolverConfig tol(double v) {
  SolverConfig c;
  c.rtol = v;
  c.atol = v;
  return c;
}

TEST(ForwardBaseline, IdentityAndZeroWeights) {
  BaselineHead h{Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Tensor({3})};
  const Tensor x = Tensor::vector({0.1, -0.2, 0.3});
  EXPECT_EQ(forward_baseline(h, x), x);
  h.w_out = Tensor({3, 3});
  h.b_out = Tensor::vector({1, 2, 3});
  EXPECT_EQ(forward_baseline(h, x), h.b_out);
}

TEST(ForwardBaseline, MatchesMatmulOracle) {
  Rng rng(2);
  const BaselineHead h{testing::random_tensor({4, 6}, rng), testing::random_tensor({4}, rng)};
  const Tensor x = testing::random_tensor({6}, rng);
  const auto ref = testing::naive_matmul(h.w_out.values(), x.values(), 4, 6, 1);
  const Tensor y = forward_baseline(h, x);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(y[c], ref[c] + h.b_out[c], 1e-14);
  EXPECT_THROW(forward_baseline(h, Tensor::vector({1, 2})), ShapeError);
}

TEST(ForwardNode, ZeroDynamicsEqualsBaseline) {
  Rng rng(3);
  const NodeHead node = init_node_head(5, 6, 8, 4, 0.0);
  const BaselineHead base{node.w_out, node.b_out};
  for (int i = 0; i < 100; ++i) {
    const Tensor x = testing::random_tensor({6}, rng, -3, 3);
    const Tensor a = forward_node(node, x, tol(1e-5)).logits;
    const Tensor b = forward_baseline(base, x);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(a[c], b[c], 1e-12);
  }
}

TEST(ForwardNode, ZeroFeaturesAndOutputGiveBias) {
  NodeHead node = init_node_head(5, 3, 4, 2, 0.0);
  node.w_out = Tensor({2, 3});
  node.b_out = Tensor::vector({0.25, -0.75});
  EXPECT_EQ(forward_node(node, Tensor::vector({0, 0, 0}), tol(1e-5)).logits, node.b_out);
}

TEST(ForwardNode, ToleranceConsistency) {
  const NodeHead node = init_node_head(0, 8, 16, 10, 1.0);
  Rng rng(0);
  const Tensor x = testing::random_tensor({8}, rng);
  const Tensor a = forward_node(node, x, tol(1e-5)).logits;
  const Tensor b = forward_node(node, x, tol(1e-9)).logits;
  for (std::size_t c = 0; c < 10; ++c) EXPECT_NEAR(a[c], b[c], 1e-3);
}

TEST(ForwardNode, DimensionMismatch) {
  const NodeHead node = init_node_head(0, 3, 4, 2, 0.1);
  EXPECT_THROW(forward_node(node, Tensor::vector({1, 2}), tol(1e-5)), ShapeError);
}

TEST(HeadFlatten, RoundTrip) {
  NodeHead n = init_node_head(7, 3, 4, 5, 1.0);
  const Tensor flat = flatten(n);
  NodeHead m = init_node_head(8, 3, 4, 5, 1.0);
  assign_flat(m, flat.span());
  EXPECT_EQ(m, n);
}

TEST(LossAndGrads, EmptyBatchIsContractError) {
  const BaselineHead h = init_baseline_head(0, 3, 2);
  EXPECT_THROW(loss_and_grads(h, Tensor({0, 3}), {}), ContractError);
}

TEST(LossAndGrads, PerfectlyClassifiedSample) {
  NodeHead node = init_node_head(1, 2, 3, 2, 0.1);
  node.b_out = Tensor::vector({100.0, -100.0});
  const Tensor x = Tensor::matrix(1, 2, {0.1, 0.2});
  const std::vector<std::uint8_t> y = {0};
  for (GradMethod m : {GradMethod::discrete, GradMethod::adjoint}) {
    const auto lg = loss_and_grads(node, x, y, m, tol(1e-6));
    EXPECT_LE(lg.loss, 1e-10);
    for (double g : lg.grads.values()) EXPECT_LE(std::abs(g), 1e-9);
    EXPECT_EQ(lg.correct, 1u);
  }
}

TEST(LossAndGrads, AdjointMatchesDiscrete) {
  Rng rng(4);
  const NodeHead node = init_node_head(9, 4, 6, 3, 1.0);
  const Tensor x = testing::random_tensor({5, 4}, rng);
  const std::vector<std::uint8_t> y = {0, 1, 2, 1, 0};
  SolverConfig cfg = tol(1e-8);
  cfg.n_steps = 200;
  const auto a = loss_and_grads(node, x, y, GradMethod::adjoint, cfg);
  const auto d = loss_and_grads(node, x, y, GradMethod::discrete, cfg);
  EXPECT_NEAR(a.loss, d.loss, 1e-8);
  for (std::size_t i = 0; i < a.grads.size(); ++i) {
    EXPECT_LE(std::abs(a.grads[i] - d.grads[i]),
              std::max(1e-9, 1e-3 * std::abs(d.grads[i])))
        << i;
  }
}

// End-to-end central differences of the mean loss over every head parameter,
// taken through the fixed-step pipeline so the oracle is smooth in theta.
TEST(LossAndGrads, MatchesFiniteDifferencesEndToEnd) {
  Rng rng(5);
  const NodeHead node = init_node_head(11, 2, 3, 2, 1.5);
  const Tensor x = testing::random_tensor({3, 2}, rng);
  const std::vector<std::uint8_t> y = {0, 1, 1};
  SolverConfig cfg = tol(1e-10);
  cfg.n_steps = 50;
  for (GradMethod m : {GradMethod::discrete, GradMethod::adjoint}) {
    const auto lg = loss_and_grads(node, x, y, m, cfg);
    const auto fd = testing::central_diff(
        [&](const std::vector<double>& theta) {
          NodeHead h = node;
          assign_flat(h, theta);
          return loss_and_grads(h, x, y, GradMethod::discrete, cfg).loss;
        },
        flatten(node).values(), 1e-6);
    for (std::size_t i = 0; i < fd.size(); ++i) EXPECT_NEAR(lg.grads[i], fd[i], 1e-4) << i;
  }
  const BaselineHead base{node.w_out, node.b_out};
  const auto lb = loss_and_grads(base, x, y);
  const auto fdb = testing::central_diff(
      [&](const std::vector<double>& theta) {
        BaselineHead h = base;
        assign_flat(h, theta);
        return loss_and_grads(h, x, y).loss;
      },
      flatten(base).values(), 1e-6);
  for (std::size_t i = 0; i < fdb.size(); ++i) EXPECT_NEAR(lb.grads[i], fdb[i], 1e-6);
}

TEST(LossAndGrads, SmallStepDecreasesLoss) {
  Rng rng(6);
  const NodeHead node = init_node_head(12, 4, 6, 3, 1.0);
  const Tensor x = testing::random_tensor({6, 4}, rng);
  const std::vector<std::uint8_t> y = {0, 1, 2, 2, 1, 0};
  SolverConfig cfg;
  const auto lg = loss_and_grads(node, x, y, GradMethod::discrete, cfg);
  Tensor flat = flatten(node);
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] -= 1e-3 * lg.grads[i];
  NodeHead stepped = node;
  assign_flat(stepped, flat.span());
  EXPECT_LT(loss_and_grads(stepped, x, y, GradMethod::discrete, cfg).loss, lg.loss);
}

TEST(Logits, ShiftKeepsArgmax) {
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    Tensor l = testing::random_tensor({10}, rng, -5, 5);
    const std::size_t before = argmax(l.span());
    const double shift = rng.uniform(-100, 100);
    for (double& v : l.span()) v += shift;
    EXPECT_EQ(argmax(l.span()), before);
  }
}

TEST(Checkpoint, RoundTripBothKinds) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 1 + rng.below(10), w = 1 + rng.below(10), k = 1 + rng.below(10);
    const Head node = init_node_head(rng.next_u64(), d, w, k, 1.0);
    const Head base = init_baseline_head(rng.next_u64(), d, k);
    EXPECT_EQ(encode_checkpoint(decode_checkpoint(encode_checkpoint(node))), encode_checkpoint(node));
    EXPECT_TRUE(std::get<NodeHead>(decode_checkpoint(encode_checkpoint(node))) == std::get<NodeHead>(node));
    EXPECT_TRUE(std::get<BaselineHead>(decode_checkpoint(encode_checkpoint(base))) ==
                std::get<BaselineHead>(base));
  }
}

TEST(Checkpoint, HeaderLayout) {
  const Head h = init_baseline_head(0, 2, 3);
  const auto bytes = encode_checkpoint(h);
  ASSERT_EQ(bytes.size(), 4u + 4 + 1 + 4 + 4 + 4 + 9 * 8);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "NODC");
  EXPECT_EQ(bytes[4], 1);  // version, little-endian
  EXPECT_EQ(bytes[8], 0);  // baseline
  EXPECT_EQ(bytes[9], 2);  // d
  EXPECT_EQ(bytes[17], 3); // classes
}

TEST(Checkpoint, CorruptionIsFormatError) {
  auto bytes = encode_checkpoint(init_node_head(0, 2, 2, 2, 0.1));
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bad = bytes;
  bad.pop_back();
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
}

}  // namespace
}  // namespace nodetl
