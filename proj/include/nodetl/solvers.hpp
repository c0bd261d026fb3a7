#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "nodetl/dynamics.hpp"
#include "nodetl/errors.hpp"
#include "nodetl/tensor.hpp"

namespace nodetl {

enum class SolverMethod { rk4_fixed, dopri5 };

inline const char* to_string(SolverMethod m) {
  return m == SolverMethod::rk4_fixed ? "rk4_fixed" : "dopri5";
}

struct SolverConfig {
  SolverMethod method = SolverMethod::dopri5;
  double rtol = 1e-5;
  double atol = 1e-5;
  std::size_t n_steps = 8;  // rk4_fixed only
  double h_init = 0.0;      // 0 selects (t1 - t0) / 10
  std::size_t max_steps = 100000;
  double safety = 0.9;
  double min_factor = 0.2;
  double max_factor = 5.0;

  void validate() const {
    if (!(rtol > 0.0) || !(atol > 0.0)) throw ContractError("solver: rtol and atol must be > 0");
    if (n_steps < 1 || max_steps < 1) throw ContractError("solver: step counts must be >= 1");
    if (!(min_factor > 0.0 && min_factor < 1.0 && max_factor > 1.0)) {
      throw ContractError("solver: require 0 < min_factor < 1 < max_factor");
    }
    if (!(safety > 0.0) || h_init < 0.0) throw ContractError("solver: bad safety or h_init");
  }
};

struct SolveStats {
  std::size_t n_feval = 0;
  std::size_t n_accept = 0;
  std::size_t n_reject = 0;

  SolveStats& operator+=(const SolveStats& o) {
    n_feval += o.n_feval;
    n_accept += o.n_accept;
    n_reject += o.n_reject;
    return *this;
  }
};

// Classic RK4 stage data for one step: the states at which f was evaluated
// and the resulting derivatives.
struct Rk4Stages {
  double t = 0.0;
  double dt = 0.0;
  std::array<Tensor, 4> inputs;
  std::array<Tensor, 4> derivs;
};

struct Trajectory {
  std::vector<double> times;
  std::vector<Tensor> states;
  std::vector<Rk4Stages> stages;  // one entry per step
};

namespace rk4 {
inline constexpr std::array<double, 4> c = {0.0, 0.5, 0.5, 1.0};
inline constexpr std::array<double, 4> a = {0.0, 0.5, 0.5, 1.0};  // sub-diagonal
inline constexpr std::array<double, 4> b = {1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0};
}  // namespace rk4

struct Rk4StepResult {
  Tensor next;
  Rk4Stages stages;
};

namespace detail {

inline bool finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline std::string at_time(const char* what, double t) {
  std::ostringstream os;
  os.precision(17);
  os << what << " at t=" << t;
  return os.str();
}

}  // namespace detail

template <VectorField F>
Rk4StepResult rk4_step(const F& f, const Tensor& h, double t, double dt) {
  const std::size_t n = f.dim();
  if (h.size() != n) throw ShapeError("rk4_step: state dimension mismatch");
  if (!(dt > 0.0)) throw ContractError("rk4_step: dt must be positive");
  if (!h.all_finite()) throw NumericError(detail::at_time("rk4_step: non-finite state", t), t);

  Rk4StepResult r;
  r.stages.t = t;
  r.stages.dt = dt;
  for (std::size_t s = 0; s < 4; ++s) {
    Tensor y = h;
    if (s > 0) {
      const auto kprev = r.stages.derivs[s - 1].span();
      for (std::size_t i = 0; i < n; ++i) y[i] = h[i] + dt * (rk4::a[s] * kprev[i]);
    }
    Tensor k({n});
    f(y.span(), t + rk4::c[s] * dt, k.span());
    r.stages.inputs[s] = std::move(y);
    r.stages.derivs[s] = std::move(k);
  }
  r.next = h;
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t s = 0; s < 4; ++s) acc += rk4::b[s] * r.stages.derivs[s][i];
    r.next[i] = h[i] + dt * acc;
  }
  if (!r.next.all_finite()) {
    throw NumericError(detail::at_time("rk4_step: non-finite result", t), t);
  }
  return r;
}

inline Rk4StepResult rk4_step(const DynamicsParams& p, const Tensor& h, double t, double dt) {
  return rk4_step(MlpField(p), h, t, dt);
}

struct FixedSolution {
  Tensor hT;
  Trajectory trajectory;
  SolveStats stats;
};

// n_steps uniform RK4 steps over [t0, t1], retaining every state and stage.
template <VectorField F>
FixedSolution solve_fixed(const F& f, const Tensor& h0, double t0, double t1, std::size_t n_steps) {
  if (!(t1 > t0)) throw ContractError("solve_fixed: requires t1 > t0");
  if (n_steps < 1) throw ContractError("solve_fixed: n_steps must be >= 1");
  FixedSolution sol;
  Trajectory& tr = sol.trajectory;
  tr.times.reserve(n_steps + 1);
  tr.states.reserve(n_steps + 1);
  tr.stages.reserve(n_steps);
  tr.times.push_back(t0);
  tr.states.push_back(h0);
  const double dt = (t1 - t0) / static_cast<double>(n_steps);
  Tensor h = h0;
  for (std::size_t i = 0; i < n_steps; ++i) {
    const double t = t0 + static_cast<double>(i) * dt;
    Rk4StepResult step = rk4_step(f, h, t, dt);
    h = std::move(step.next);
    tr.times.push_back(i + 1 == n_steps ? t1 : t0 + static_cast<double>(i + 1) * dt);
    tr.states.push_back(h);
    tr.stages.push_back(std::move(step.stages));
  }
  sol.stats.n_feval = 4 * n_steps;
  sol.stats.n_accept = n_steps;
  sol.hT = std::move(h);
  return sol;
}

inline FixedSolution solve_fixed(const DynamicsParams& p, const Tensor& h0, double t0, double t1,
                                 std::size_t n_steps) {
  return solve_fixed(MlpField(p), h0, t0, t1, n_steps);
}

// Dormand-Prince 5(4) tableau.
namespace dopri {
inline constexpr std::array<double, 7> c = {0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
inline constexpr std::array<std::array<double, 6>, 7> a = {{
    {},
    {1.0 / 5},
    {3.0 / 40, 9.0 / 40},
    {44.0 / 45, -56.0 / 15, 32.0 / 9},
    {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
    {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
    {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84},
}};
// Difference between the 5th and embedded 4th order weights.
inline constexpr std::array<double, 7> e = {71.0 / 57600,     0.0,          -71.0 / 16695,
                                            71.0 / 1920,      -17253.0 / 339200,
                                            22.0 / 525,       -1.0 / 40};
}  // namespace dopri

// Sizes of the buffers an adaptive solve holds. Independent of the number of
// steps taken.
struct SolverFootprint {
  std::size_t carried_state = 0;   // elements of the state advanced between steps
  std::size_t workspace = 0;       // all elements allocated by the solve
};

struct AdaptiveSolution {
  Tensor hT;
  SolveStats stats;
};

// Same arithmetic as solve_fixed, bitwise, keeping only the current state.
// For forward passes that are not differentiated.
template <VectorField F>
AdaptiveSolution integrate_fixed(const F& f, const Tensor& h0, double t0, double t1, std::size_t n_steps) {
  if (!(t1 > t0)) throw ContractError("integrate_fixed: requires t1 > t0");
  if (n_steps < 1) throw ContractError("integrate_fixed: n_steps must be >= 1");
  const std::size_t n = f.dim();
  if (h0.size() != n) throw ShapeError("integrate_fixed: state dimension mismatch");
  const double dt = (t1 - t0) / static_cast<double>(n_steps);
  std::vector<double> h(h0.values()), y(n);
  std::array<std::vector<double>, 4> k;
  for (auto& ks : k) ks.assign(n, 0.0);
  for (std::size_t step = 0; step < n_steps; ++step) {
    const double t = t0 + static_cast<double>(step) * dt;
    if (!detail::finite(h)) throw NumericError(detail::at_time("rk4_step: non-finite state", t), t);
    for (std::size_t s = 0; s < 4; ++s) {
      if (s == 0) {
        y = h;
      } else {
        for (std::size_t i = 0; i < n; ++i) y[i] = h[i] + dt * (rk4::a[s] * k[s - 1][i]);
      }
      f(y, t + rk4::c[s] * dt, k[s]);
    }
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t s = 0; s < 4; ++s) acc += rk4::b[s] * k[s][i];
      h[i] = h[i] + dt * acc;
    }
    if (!detail::finite(h)) throw NumericError(detail::at_time("rk4_step: non-finite result", t), t);
  }
  AdaptiveSolution sol;
  sol.stats.n_feval = 4 * n_steps;
  sol.stats.n_accept = n_steps;
  sol.hT = Tensor::vector(std::move(h));
  return sol;
}

// Integrates from t0 to t1 (either direction) and stops exactly at t1.
template <VectorField F>
AdaptiveSolution solve_adaptive(const F& f, const Tensor& h0, double t0, double t1,
                                const SolverConfig& cfg, SolverFootprint* footprint = nullptr) {
  cfg.validate();
  if (t1 == t0) throw ContractError("solve_adaptive: requires t1 != t0");
  const std::size_t n = f.dim();
  if (h0.size() != n) throw ShapeError("solve_adaptive: state dimension mismatch");
  if (!h0.all_finite()) throw NumericError(detail::at_time("solve_adaptive: non-finite state", t0), t0);

  const double dir = t1 > t0 ? 1.0 : -1.0;
  const double span = std::abs(t1 - t0);
  double step = cfg.h_init > 0.0 ? std::min(cfg.h_init, span) : span / 10.0;

  std::vector<double> y(h0.values());
  std::vector<double> ynew(n), tmp(n);
  std::array<std::vector<double>, 7> k;
  for (auto& ki : k) ki.assign(n, 0.0);
  if (footprint) {
    footprint->carried_state = y.size();
    footprint->workspace = y.size() + ynew.size() + tmp.size() + 7 * n;
  }

  AdaptiveSolution sol;
  SolveStats& st = sol.stats;
  double t = t0;
  f(y, t, k[0]);
  st.n_feval = 1;

  const double power = -1.0 / 5.0;
  while (true) {
    if (st.n_accept + st.n_reject >= cfg.max_steps) {
      throw BudgetError(detail::at_time("solve_adaptive: step budget exhausted", t), t);
    }
    double dt = dir * step;
    bool last = false;
    if ((t + dt - t1) * dir >= 0.0 || std::abs(t1 - (t + dt)) <= 1e-12 * span) {
      dt = t1 - t;
      last = true;
    }
    if (std::abs(dt) <= 1e-15 * std::max(1.0, std::abs(t))) {
      throw NumericError(detail::at_time("solve_adaptive: step size underflow", t), t);
    }

    for (std::size_t s = 1; s < 7; ++s) {
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < s; ++j) acc += dopri::a[s][j] * k[j][i];
        tmp[i] = y[i] + dt * acc;
      }
      if (s == 6) ynew = tmp;
      f(tmp, t + dopri::c[s] * dt, k[s]);
    }
    st.n_feval += 6;

    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double ei = 0.0;
      for (std::size_t j = 0; j < 7; ++j) ei += dopri::e[j] * k[j][i];
      ei *= dt;
      const double sc = cfg.atol + cfg.rtol * std::max(std::abs(y[i]), std::abs(ynew[i]));
      sq += (ei / sc) * (ei / sc);
    }
    const double err = std::sqrt(sq / static_cast<double>(n));

    if (!std::isfinite(err)) {
      ++st.n_reject;
      step *= cfg.min_factor;
      continue;
    }
    const double factor =
        err == 0.0 ? cfg.max_factor
                   : std::clamp(cfg.safety * std::pow(err, power), cfg.min_factor, cfg.max_factor);
    if (err <= 1.0) {
      ++st.n_accept;
      t = last ? t1 : t + dt;
      y.swap(ynew);
      k[0].swap(k[6]);  // FSAL
      if (last) break;
      step = std::abs(dt) * factor;
    } else {
      ++st.n_reject;
      step = std::abs(dt) * factor;
    }
  }
  sol.hT = Tensor::vector(std::move(y));
  return sol;
}

inline AdaptiveSolution solve_adaptive(const DynamicsParams& p, const Tensor& h0, double t0,
                                       double t1, const SolverConfig& cfg) {
  return solve_adaptive(MlpField(p), h0, t0, t1, cfg);
}

// Wraps a callable (h, t, out) as a VectorField of fixed dimension.
template <class Fn>
class FunctionField {
 public:
  FunctionField(std::size_t dim, Fn fn) : dim_(dim), fn_(std::move(fn)) {}
  std::size_t dim() const noexcept { return dim_; }
  void operator()(std::span<const double> h, double t, std::span<double> out) const {
    fn_(h, t, out);
  }

 private:
  std::size_t dim_;
  Fn fn_;
};

}  // namespace nodetl
