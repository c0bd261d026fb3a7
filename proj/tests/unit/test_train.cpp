#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "nodetl/train.hpp"
#include "support/oracles.hpp"

namespace nodetl {
namespace {

TEST(Adam, ZeroGradientFirstStep) {
  Tensor p = Tensor::vector({1.0, -2.0});
  AdamState st = AdamState::zeros(2);
  adam_update(p, Tensor::vector({0, 0}), st, AdamConfig{});
  EXPECT_EQ(p, Tensor::vector({1.0, -2.0}));
  EXPECT_EQ(st.m, Tensor::vector({0, 0}));
  EXPECT_EQ(st.v, Tensor::vector({0, 0}));
  EXPECT_EQ(st.step, 1u);
}

TEST(Adam, FirstStepIsLearningRate) {
  // m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps).
  Tensor p = Tensor::vector({0.0});
  AdamState st = AdamState::zeros(1);
  AdamConfig cfg;
  cfg.lr = 0.1;
  adam_update(p, Tensor::vector({1.0}), st, cfg);
  EXPECT_NEAR(p[0], -0.1 / (1.0 + 1e-8), 1e-15);
  adam_update(p, Tensor::vector({1.0}), st, cfg);
  EXPECT_NEAR(p[0], -0.2, 1e-8);
}

TEST(Adam, DeterministicAndShapeChecked) {
  Tensor p1 = Tensor::vector({0.3, 0.4}), p2 = p1;
  AdamState s1 = AdamState::zeros(2), s2 = s1;
  adam_update(p1, Tensor::vector({0.1, -0.5}), s1, AdamConfig{});
  adam_update(p2, Tensor::vector({0.1, -0.5}), s2, AdamConfig{});
  EXPECT_EQ(p1, p2);
  EXPECT_EQ(s1.m, s2.m);
  EXPECT_THROW(adam_update(p1, Tensor::vector({1.0}), s1, AdamConfig{}), ShapeError);
}

TEST(Sgd, Arithmetic) {
  Tensor p = Tensor::vector({1.0}), v = Tensor::vector({0.0});
  sgd_update(p, Tensor::vector({0.5}), v, SgdConfig{0.1, 0.0});
  EXPECT_DOUBLE_EQ(p[0], 0.95);
  Tensor q = Tensor::vector({2.0}), w = Tensor::vector({0.0});
  sgd_update(q, Tensor::vector({0.0}), w, SgdConfig{0.1, 0.9});
  EXPECT_EQ(q[0], 2.0);
  EXPECT_THROW(sgd_update(q, Tensor::vector({1, 2}), w, SgdConfig{}), ShapeError);
}

TEST(Sgd, TwoStepMomentumTrace) {
  // v1 = g1 = 1; p1 = 1 - 0.1 * 1 = 0.9
  // v2 = 0.9 * 1 + 2 = 2.9; p2 = 0.9 - 0.1 * 2.9 = 0.61
  Tensor p = Tensor::vector({1.0}), v = Tensor::vector({0.0});
  sgd_update(p, Tensor::vector({1.0}), v, SgdConfig{0.1, 0.9});
  sgd_update(p, Tensor::vector({2.0}), v, SgdConfig{0.1, 0.9});
  EXPECT_NEAR(v[0], 2.9, 1e-15);
  EXPECT_NEAR(p[0], 0.61, 1e-15);
}

// Momentum and Adam both oscillate around the minimum of |p|^2 at these
// learning rates, so descent is checked on the envelope: the maximum of f
// over consecutive 25-step blocks must strictly decrease.
void expect_envelope_descent(const std::vector<double>& f) {
  double prev_block = std::numeric_limits<double>::infinity();
  for (std::size_t b = 0; b + 25 <= f.size(); b += 25) {
    const double block = *std::max_element(f.begin() + b, f.begin() + b + 25);
    EXPECT_LT(block, prev_block) << "block starting at step " << b;
    prev_block = block;
  }
  EXPECT_LE(f.back(), 1e-6);
}

TEST(Optimizers, ReduceQuadratic) {
  auto f = [](const Tensor& p) { return testing::dot(p.span(), p.span()); };
  const Tensor start = Tensor::vector({1.0, -0.5, 0.25});
  {
    Tensor p = start;
    AdamState st = AdamState::zeros(3);
    AdamConfig cfg;
    cfg.lr = 0.05;
    std::vector<double> trace{f(p)};
    for (int i = 0; i < 500; ++i) {
      Tensor g = p;
      for (double& x : g.span()) x *= 2.0;
      adam_update(p, g, st, cfg);
      trace.push_back(f(p));
    }
    expect_envelope_descent(trace);
  }
  {
    Tensor p = start, v({3});
    std::vector<double> trace{f(p)};
    for (int i = 0; i < 500; ++i) {
      Tensor g = p;
      for (double& x : g.span()) x *= 2.0;
      sgd_update(p, g, v, SgdConfig{0.1, 0.9});
      trace.push_back(f(p));
    }
    expect_envelope_descent(trace);
  }
  {
    // Without momentum the decrease is strictly monotone.
    Tensor p = start, v({3});
    double prev = f(p);
    for (int i = 0; i < 500; ++i) {
      Tensor g = p;
      for (double& x : g.span()) x *= 2.0;
      sgd_update(p, g, v, SgdConfig{0.1, 0.0});
      EXPECT_LT(f(p), prev);
      prev = f(p);
      if (prev < 1e-30) break;
    }
  }
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.width = 4;
  cfg.val_fraction = 0.2;
  cfg.solver.n_steps = 4;
  return cfg;
}

TEST(Train, ZeroLearningRateLeavesHeadUnchanged) {
  const Dataset ds = testing::separable_dataset(40, 4, 1);
  TrainConfig cfg = small_config();
  cfg.epochs = 1;
  cfg.adam.lr = 0.0;
  for (HeadKind kind : {HeadKind::baseline, HeadKind::node}) {
    const auto res = train(kind, ds, cfg);
    EXPECT_TRUE(res.head == res.initial);
    ASSERT_EQ(res.metrics.size(), 1u);
    const Split s = split_train_val(ds, cfg.val_fraction, sub_seed(cfg.seed, "split"));
    const Evaluation ev = evaluate(res.initial, s.train, eval_solver(cfg));
    EXPECT_NEAR(res.metrics[0].train_loss, ev.loss, 1e-12);
    EXPECT_NEAR(res.metrics[0].train_acc, ev.acc, 1e-12);
  }
}

TEST(Train, DeterministicForFixedSeed) {
  const Dataset ds = testing::separable_dataset(40, 4, 2);
  TrainConfig cfg = small_config();
  for (GradMethod g : {GradMethod::discrete, GradMethod::adjoint}) {
    cfg.grad_method = g;
    const auto a = train(HeadKind::node, ds, cfg);
    const auto b = train(HeadKind::node, ds, cfg);
    ASSERT_EQ(a.metrics.size(), b.metrics.size());
    for (std::size_t i = 0; i < a.metrics.size(); ++i) {
      EXPECT_EQ(a.metrics[i].train_loss, b.metrics[i].train_loss);
      EXPECT_EQ(a.metrics[i].val_loss, b.metrics[i].val_loss);
      EXPECT_EQ(a.metrics[i].val_acc, b.metrics[i].val_acc);
      EXPECT_EQ(a.metrics[i].n_feval, b.metrics[i].n_feval);
    }
    EXPECT_TRUE(a.head == b.head);
  }
}

TEST(Train, SeparableToyProblemLearned) {
  const Dataset ds = testing::separable_dataset(100, 4, 3);
  TrainConfig cfg = small_config();
  cfg.epochs = 50;
  cfg.adam.lr = 0.05;
  for (HeadKind kind : {HeadKind::baseline, HeadKind::node}) {
    const auto res = train(kind, ds, cfg);
    EXPECT_GE(res.metrics.back().train_acc, 0.95) << to_string(kind);
  }
  cfg.grad_method = GradMethod::adjoint;
  cfg.optimizer = OptimizerKind::sgd;
  cfg.sgd.lr = 0.1;
  EXPECT_GE(train(HeadKind::node, ds, cfg).metrics.back().train_acc, 0.95);
}

TEST(Train, MetricsWithinDomains) {
  const Dataset ds = testing::separable_dataset(30, 3, 4);
  const auto res = train(HeadKind::node, ds, small_config());
  for (const auto& m : res.metrics) {
    EXPECT_GE(m.train_loss, 0.0);
    EXPECT_GE(m.val_loss, 0.0);
    EXPECT_GE(m.train_acc, 0.0);
    EXPECT_LE(m.train_acc, 1.0);
    EXPECT_GE(m.val_acc, 0.0);
    EXPECT_LE(m.val_acc, 1.0);
    EXPECT_GE(m.wall_ms, 0.0);
    EXPECT_GT(m.n_feval, 0u);
  }
}

TEST(Train, InvalidConfig) {
  const Dataset ds = testing::separable_dataset(30, 3, 4);
  TrainConfig cfg = small_config();
  cfg.sgd.momentum = 1.0;
  EXPECT_THROW(train(HeadKind::node, ds, cfg), ContractError);
  cfg = small_config();
  cfg.epochs = 0;
  EXPECT_THROW(train(HeadKind::node, ds, cfg), ContractError);
}

std::vector<MetricsRecord> with_val_loss(const std::vector<double>& losses) {
  std::vector<MetricsRecord> out;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    MetricsRecord m;
    m.epoch = i;
    m.val_loss = losses[i];
    m.val_acc = 0.5;
    out.push_back(m);
  }
  return out;
}

TEST(Stability, ConstantSeries) {
  const auto r = stability_stats(with_val_loss(std::vector<double>(12, 0.7)), 10);
  ASSERT_EQ(r.rolling_std_val_loss.size(), 3u);
  for (double v : r.rolling_std_val_loss) EXPECT_EQ(v, 0.0);
  for (double v : r.rolling_std_val_acc) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(r.max_epoch_to_epoch_jump, 0.0);
}

TEST(Stability, AlternatingSeriesWindowTwo) {
  const auto r = stability_stats(with_val_loss({0, 1, 0, 1, 0, 1}), 2);
  ASSERT_EQ(r.rolling_std_val_loss.size(), 5u);
  for (double v : r.rolling_std_val_loss) EXPECT_DOUBLE_EQ(v, 0.5);
  EXPECT_DOUBLE_EQ(r.mean_rolling_std_val_loss, 0.5);
  EXPECT_DOUBLE_EQ(r.max_epoch_to_epoch_jump, 1.0);
}

TEST(Stability, MatchesDirectFormula) {
  Rng rng(6);
  std::vector<double> loss(40);
  for (double& v : loss) v = rng.uniform(0, 3);
  auto metrics = with_val_loss(loss);
  for (auto& m : metrics) m.val_acc = rng.uniform(0, 1);
  const std::size_t w = 7;
  const auto r = stability_stats(metrics, w);
  ASSERT_EQ(r.rolling_std_val_loss.size(), 40 - w + 1);
  double mean_of_std = 0.0;
  for (std::size_t s = 0; s + w <= 40; ++s) {
    // E[x^2] - E[x]^2 form, independent of the two-pass implementation.
    long double sx = 0, sxx = 0, ax = 0, axx = 0;
    for (std::size_t i = s; i < s + w; ++i) {
      sx += loss[i];
      sxx += static_cast<long double>(loss[i]) * loss[i];
      ax += metrics[i].val_acc;
      axx += static_cast<long double>(metrics[i].val_acc) * metrics[i].val_acc;
    }
    const double sd = std::sqrt(static_cast<double>(sxx / w - (sx / w) * (sx / w)));
    const double sa = std::sqrt(static_cast<double>(axx / w - (ax / w) * (ax / w)));
    EXPECT_NEAR(r.rolling_std_val_loss[s], sd, 1e-12);
    EXPECT_NEAR(r.rolling_std_val_acc[s], sa, 1e-12);
    mean_of_std += sd;
  }
  EXPECT_NEAR(r.mean_rolling_std_val_loss, mean_of_std / static_cast<double>(40 - w + 1), 1e-12);
}

TEST(Stability, ShortSeriesIsContractError) {
  EXPECT_THROW(stability_stats(with_val_loss({1, 2, 3}), 10), ContractError);
  EXPECT_THROW(stability_stats(with_val_loss({1, 2, 3}), 1), ContractError);
}

TEST(MetricsCsv, FormatAndParse) {
  MetricsRecord m{3, 0.123456789, 0.5, 1.0 / 3.0, 0.75, 12.5, 4200};
  const std::string csv = metrics_csv({m});
  EXPECT_EQ(csv, std::string(kMetricsHeader) + "\n3,0.123457,0.5,0.333333,0.75,12.5,4200\n");
  std::istringstream in(csv);
  const auto parsed = parse_metrics_csv(in);
  ASSERT_EQ(parsed.size(), 1u);
  EXPECT_EQ(parsed[0].epoch, 3u);
  EXPECT_DOUBLE_EQ(parsed[0].val_loss, 0.333333);
  EXPECT_EQ(parsed[0].n_feval, 4200u);
}

TEST(MetricsCsv, MalformedLineNumber) {
  std::istringstream in(std::string(kMetricsHeader) + "\n0,1,1,1,1,1,1\n1,1,oops,1,1,1,1\n");
  try {
    parse_metrics_csv(in);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 3u);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
  std::istringstream bad_header("epoch,loss\n");
  EXPECT_THROW(parse_metrics_csv(bad_header), FormatError);
}

}  // namespace
}  // namespace nodetl
