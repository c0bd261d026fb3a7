#include <gtest/gtest.h>

#include <cmath>

#include "nodetl/adjoint.hpp"
#include "support/oracles.hpp"

namespace nodetl {
namespace {

// dh/dt = lambda * h with lambda as the single parameter.
struct LinearField {
  double lambda;
  std::size_t dim() const { return 1; }
  std::size_t param_count() const { return 1; }
  void operator()(std::span<const double> h, double, std::span<double> out) const {
    out[0] = lambda * h[0];
  }
  void vjp_state(std::span<const double>, double, std::span<const double> a,
                 std::span<double> out) const {
    out[0] = a[0] * lambda;
  }
  void vjp_params(std::span<const double> h, double, std::span<const double> a,
                  std::span<double> out) const {
    out[0] = a[0] * h[0];
  }
};
static_assert(AdjointField<LinearField>);
static_assert(AdjointField<MlpField>);

SolverConfig tol(double v) {
  SolverConfig c;
  c.rtol = v;
  c.atol = v;
  return c;
}

void expect_close(const Tensor& a, const Tensor& b, double rel, double abs) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_LE(std::abs(a[i] - b[i]), std::max(abs, rel * std::max(std::abs(a[i]), std::abs(b[i]))))
        << "component " << i << ": " << a[i] << " vs " << b[i];
  }
}

TEST(Backprop, ZeroCotangent) {
  const auto p = init_params(1, 3, 4, 1.0);
  const auto sol = solve_fixed(p, Tensor::vector({0.1, 0.2, 0.3}), 0, 1, 10);
  const auto g = backprop_through_solver(p, sol.trajectory, Tensor::vector({0, 0, 0}));
  for (double v : g.d_h0.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.d_params.values()) EXPECT_EQ(v, 0.0);
}

TEST(Backprop, ZeroFieldIsIdentityMap) {
  const auto p = init_params(1, 3, 4, 0.0);
  const Tensor c = Tensor::vector({0.5, -1.0, 2.0});
  const auto sol = solve_fixed(p, Tensor::vector({0.1, 0.2, 0.3}), 0, 1, 10);
  const auto g = backprop_through_solver(p, sol.trajectory, c);
  EXPECT_EQ(g.d_h0, c);
  // f is affine in b2 with unit Jacobian, so d/db2 of c^T h(T) is the RK4
  // quadrature of a constant: T * c.
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(g.d_params[p.param_count() - 3 + k], c[k], 1e-15);
}

TEST(Backprop, MissingStagesIsContractError) {
  const auto p = init_params(1, 2, 3, 1.0);
  auto sol = solve_fixed(p, Tensor::vector({0.1, 0.2}), 0, 1, 4);
  sol.trajectory.stages.pop_back();
  EXPECT_THROW(backprop_through_solver(p, sol.trajectory, Tensor::vector({1, 1})), ContractError);
}

TEST(Backprop, MatchesFiniteDifferencesOfDiscreteMap) {
  Rng rng(31);
  const auto p = init_params(13, 3, 4, 1.5);
  const Tensor h0 = testing::random_tensor({3}, rng), c = testing::random_tensor({3}, rng);
  const auto sol = solve_fixed(p, h0, 0, 1, 20);
  const auto g = backprop_through_solver(p, sol.trajectory, c);
  const auto fd = testing::fd_discrete_gradient(p, h0, c, 20);
  expect_close(g.d_h0, Tensor::vector(fd.d_h0), 0.0, 1e-6);
  expect_close(g.d_params, Tensor::vector(fd.d_params), 0.0, 1e-6);
}

TEST(Adjoint, ZeroCotangent) {
  const auto p = init_params(2, 3, 4, 1.0);
  const Tensor hT = solve_adaptive(p, Tensor::vector({0.1, 0.2, 0.3}), 0, 1, tol(1e-6)).hT;
  const auto g = adjoint_solve(p, hT, Tensor::vector({0, 0, 0}), 0, 1, tol(1e-6));
  for (double v : g.d_h0.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.d_params.values()) EXPECT_EQ(v, 0.0);
}

TEST(Adjoint, LinearFlowClosedForm) {
  const LinearField f{-1.0};
  const Tensor hT = solve_adaptive(f, Tensor::vector({1.0}), 0, 1, tol(1e-10)).hT;
  const auto g = adjoint_solve(f, hT, Tensor::vector({1.0}), 0, 1, tol(1e-10));
  EXPECT_NEAR(g.d_h0[0], 0.36787944117144232160, 1e-7);
  // d/dlambda of h(1) = h0 * exp(lambda) at h0 = 1, lambda = -1.
  EXPECT_NEAR(g.d_params[0], 0.36787944117144232160, 1e-7);
}

TEST(Adjoint, AgreesWithDiscreteBackprop) {
  Rng rng(41);
  const auto p = init_params(19, 3, 5, 1.5);
  const Tensor h0 = testing::random_tensor({3}, rng), c = testing::random_tensor({3}, rng);
  const auto fixed = solve_fixed(p, h0, 0, 1, 2000);
  const auto discrete = backprop_through_solver(p, fixed.trajectory, c);
  const Tensor hT = solve_adaptive(p, h0, 0, 1, tol(1e-8)).hT;
  const auto adj = adjoint_solve(p, hT, c, 0, 1, tol(1e-8));
  expect_close(adj.d_h0, discrete.d_h0, 1e-4, 1e-6);
  expect_close(adj.d_params, discrete.d_params, 1e-4, 1e-6);
}

TEST(Adjoint, RetainedStateIndependentOfStepCount) {
  const auto p = init_params(23, 4, 8, 3.0);
  const Tensor h0 = Tensor::vector({0.5, -0.5, 0.25, 1.0});
  const Tensor c = Tensor::vector({1, -1, 0.5, 0.2});
  AdjointFootprint loose, tight;
  adjoint_solve(p, solve_adaptive(p, h0, 0, 1, tol(1e-2)).hT, c, 0, 1, tol(1e-2), &loose);
  adjoint_solve(p, solve_adaptive(p, h0, 0, 1, tol(1e-11)).hT, c, 0, 1, tol(1e-11), &tight);
  EXPECT_GE(tight.stats.n_feval, 10 * loose.stats.n_feval);
  EXPECT_EQ(loose.retained_state, 2 * 4 + p.param_count());
  EXPECT_EQ(tight.retained_state, loose.retained_state);
  EXPECT_EQ(tight.workspace, loose.workspace);
}

TEST(Gradients, LinearInCotangent) {
  Rng rng(51);
  const auto p = init_params(29, 3, 4, 1.0);
  const Tensor h0 = testing::random_tensor({3}, rng), v = testing::random_tensor({3}, rng);
  const double alpha = -2.5;
  Tensor av({3});
  for (std::size_t i = 0; i < 3; ++i) av[i] = alpha * v[i];

  const auto fixed = solve_fixed(p, h0, 0, 1, 50);
  const auto g1 = backprop_through_solver(p, fixed.trajectory, v);
  const auto g2 = backprop_through_solver(p, fixed.trajectory, av);
  for (std::size_t i = 0; i < g1.d_params.size(); ++i) {
    EXPECT_NEAR(g2.d_params[i], alpha * g1.d_params[i], 1e-12);
  }

  // The adaptive step sequence depends on the cotangent's scale, so linearity
  // holds for the adjoint only up to its tolerance.
  const Tensor hT = solve_adaptive(p, h0, 0, 1, tol(1e-10)).hT;
  const auto a1 = adjoint_solve(p, hT, v, 0, 1, tol(1e-10));
  const auto a2 = adjoint_solve(p, hT, av, 0, 1, tol(1e-10));
  for (std::size_t i = 0; i < a1.d_h0.size(); ++i) EXPECT_NEAR(a2.d_h0[i], alpha * a1.d_h0[i], 1e-8);
}

}  // namespace
}  // namespace nodetl
