#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "nodetl/dynamics.hpp"
#include "nodetl/errors.hpp"
#include "nodetl/solvers.hpp"
#include "nodetl/tensor.hpp"

namespace nodetl {

struct GradientResult {
  Tensor d_h0;      // [d]
  Tensor d_params;  // [p], flat parameter order of the field
};

// Reverse-mode differentiation of the discrete RK4 recursion stored in a
// trajectory from solve_fixed. Memory is proportional to the step count since
// every stage input must be kept.
template <AdjointField F>
GradientResult backprop_through_solver(const F& f, const Trajectory& traj, const Tensor& d_hT) {
  const std::size_t n = f.dim();
  const std::size_t p = f.param_count();
  if (traj.states.empty() || traj.stages.size() + 1 != traj.states.size()) {
    throw ContractError("backprop_through_solver: trajectory is missing RK stages");
  }
  if (d_hT.size() != n) throw ShapeError("backprop_through_solver: cotangent dimension mismatch");

  std::vector<double> abar(d_hT.values());
  std::vector<double> gtheta(p, 0.0), gstep(p), kbar(n), ybar(n);
  std::array<std::vector<double>, 4> kb;
  for (auto& v : kb) v.assign(n, 0.0);

  for (std::size_t step = traj.stages.size(); step-- > 0;) {
    const Rk4Stages& st = traj.stages[step];
    if (st.inputs[0].size() != n || st.derivs[3].size() != n) {
      throw ContractError("backprop_through_solver: stage data has wrong dimension");
    }
    const double dt = st.dt;
    // h_next = h + dt * sum_s b_s k_s
    for (std::size_t s = 0; s < 4; ++s) {
      for (std::size_t i = 0; i < n; ++i) kb[s][i] = dt * rk4::b[s] * abar[i];
    }
    // Stage s input is h + dt * a_s * k_{s-1}; walk stages in reverse.
    for (std::size_t s = 4; s-- > 0;) {
      const double ts = st.t + rk4::c[s] * dt;
      f.vjp_state(st.inputs[s].span(), ts, kb[s], ybar);
      f.vjp_params(st.inputs[s].span(), ts, kb[s], gstep);
      for (std::size_t j = 0; j < p; ++j) gtheta[j] += gstep[j];
      for (std::size_t i = 0; i < n; ++i) abar[i] += ybar[i];
      if (s > 0) {
        for (std::size_t i = 0; i < n; ++i) kb[s - 1][i] += dt * rk4::a[s] * ybar[i];
      }
    }
  }
  return GradientResult{Tensor::vector(std::move(abar)), Tensor::vector(std::move(gtheta))};
}

inline GradientResult backprop_through_solver(const DynamicsParams& params, const Trajectory& traj,
                                              const Tensor& d_hT) {
  return backprop_through_solver(MlpField(params), traj, d_hT);
}

// The augmented backward system over y = [h; a; g]:
//   dh/dt = f(h, t),  da/dt = -a^T df/dh,  dg/dt = -a^T df/dtheta.
template <AdjointField F>
class AugmentedField {
 public:
  explicit AugmentedField(const F& f) : f_(&f), n_(f.dim()), p_(f.param_count()) {}

  std::size_t dim() const noexcept { return 2 * n_ + p_; }

  void operator()(std::span<const double> y, double t, std::span<double> out) const {
    const auto h = y.subspan(0, n_);
    const auto a = y.subspan(n_, n_);
    auto dh = out.subspan(0, n_);
    auto da = out.subspan(n_, n_);
    auto dg = out.subspan(2 * n_, p_);
    (*f_)(h, t, dh);
    f_->vjp_state(h, t, a, da);
    f_->vjp_params(h, t, a, dg);
    for (double& v : da) v = -v;
    for (double& v : dg) v = -v;
  }

 private:
  const F* f_;
  std::size_t n_, p_;
};

// What the backward pass of adjoint_solve held on to.
struct AdjointFootprint {
  std::size_t retained_state = 0;  // the augmented vector carried across steps
  std::size_t workspace = 0;       // every buffer allocated by the backward solve
  SolveStats stats;
};

// Continuous adjoint: integrates [h; a; g] from t1 back to t0 starting at
// [hT; d_hT; 0]. The forward state is re-integrated backward, so nothing from
// the forward pass is stored. Uses the adaptive solver with cfg's tolerances.
template <AdjointField F>
GradientResult adjoint_solve(const F& f, const Tensor& hT, const Tensor& d_hT, double t0, double t1,
                             const SolverConfig& cfg, AdjointFootprint* footprint = nullptr) {
  const std::size_t n = f.dim();
  const std::size_t p = f.param_count();
  if (hT.size() != n || d_hT.size() != n) throw ShapeError("adjoint_solve: dimension mismatch");

  std::vector<double> y0(2 * n + p, 0.0);
  std::copy(hT.values().begin(), hT.values().end(), y0.begin());
  std::copy(d_hT.values().begin(), d_hT.values().end(), y0.begin() + static_cast<std::ptrdiff_t>(n));

  AugmentedField<F> aug(f);
  SolverFootprint fp;
  AdaptiveSolution sol = [&] {
    try {
      return solve_adaptive(aug, Tensor::vector(std::move(y0)), t1, t0, cfg, &fp);
    } catch (const NumericError& e) {
      throw NumericError(std::string("adjoint backward pass: ") + e.what(), e.time());
    } catch (const BudgetError& e) {
      throw BudgetError(std::string("adjoint backward pass: ") + e.what(), e.time());
    }
  }();
  if (footprint) {
    footprint->retained_state = fp.carried_state;
    footprint->workspace = fp.workspace;
    footprint->stats = sol.stats;
  }

  const auto y = sol.hT.span();
  GradientResult g{Tensor({n}), Tensor({p})};
  for (std::size_t i = 0; i < n; ++i) g.d_h0[i] = y[n + i];
  for (std::size_t j = 0; j < p; ++j) g.d_params[j] = y[2 * n + j];
  return g;
}

inline GradientResult adjoint_solve(const DynamicsParams& params, const Tensor& hT,
                                    const Tensor& d_hT, double t0, double t1,
                                    const SolverConfig& cfg, AdjointFootprint* footprint = nullptr) {
  return adjoint_solve(MlpField(params), hT, d_hT, t0, t1, cfg, footprint);
}

}  // namespace nodetl
