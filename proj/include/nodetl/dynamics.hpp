#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nodetl/errors.hpp"
#include "nodetl/random.hpp"
#include "nodetl/tensor.hpp"

namespace nodetl {

// Parameters of the hidden-state derivative
//
//   f(h, t) = w2 * tanh(w1 * [h; t] + b1) + b2
//
// where [h; t] appends the time as one extra input coordinate.
//
// The flat parameter order is a stable contract shared by checkpoints, the
// adjoint accumulator and the optimizers: w1 row-major, b1, w2 row-major, b2.
struct DynamicsParams {
  std::size_t d = 0;
  std::size_t width = 0;
  Tensor w1;  // [width x (d + 1)]
  Tensor b1;  // [width]
  Tensor w2;  // [d x width]
  Tensor b2;  // [d]

  std::size_t param_count() const noexcept { return width * (d + 1) + width + d * width + d; }

  static DynamicsParams zeros(std::size_t d, std::size_t width) {
    return DynamicsParams{d, width, Tensor({width, d + 1}), Tensor({width}), Tensor({d, width}),
                          Tensor({d})};
  }

  void validate() const {
    const bool ok = w1.shape() == Shape{width, d + 1} && b1.shape() == Shape{width} &&
                    w2.shape() == Shape{d, width} && b2.shape() == Shape{d};
    if (!ok || d == 0 || width == 0) {
      throw ShapeError("dynamics params inconsistent with d=" + std::to_string(d) +
                       " width=" + std::to_string(width));
    }
  }

  Tensor flatten() const {
    std::vector<double> flat;
    flat.reserve(param_count());
    for (const Tensor* t : {&w1, &b1, &w2, &b2}) {
      flat.insert(flat.end(), t->values().begin(), t->values().end());
    }
    return Tensor::vector(std::move(flat));
  }

  static DynamicsParams unflatten(std::span<const double> flat, std::size_t d, std::size_t width) {
    DynamicsParams p = zeros(d, width);
    if (flat.size() != p.param_count()) {
      throw ShapeError("unflatten: expected " + std::to_string(p.param_count()) +
                       " parameters, got " + std::to_string(flat.size()));
    }
    std::size_t off = 0;
    for (Tensor* t : {&p.w1, &p.b1, &p.w2, &p.b2}) {
      auto dst = t->span();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = flat[off + i];
      off += dst.size();
    }
    return p;
  }

  friend bool operator==(const DynamicsParams&, const DynamicsParams&) = default;
};

// Uniform(-scale * sqrt(1/fan_in), +scale * sqrt(1/fan_in)) per layer.
inline DynamicsParams init_params(std::uint64_t seed, std::size_t d, std::size_t width,
                                  double scale) {
  if (d == 0 || width == 0) throw ContractError("init_params: d and width must be >= 1");
  if (!(scale >= 0.0)) throw ContractError("init_params: scale must be non-negative");
  DynamicsParams p = DynamicsParams::zeros(d, width);
  Rng rng(seed);
  auto fill = [&](Tensor& t, std::size_t fan_in) {
    const double bound = scale * std::sqrt(1.0 / static_cast<double>(fan_in));
    for (double& v : t.span()) v = rng.uniform(-bound, bound);
  };
  fill(p.w1, d + 1);
  fill(p.b1, d + 1);
  fill(p.w2, width);
  fill(p.b2, width);
  return p;
}

// A vector field dh/dt = f(h, t) over spans. Solvers are written against this.
template <class F>
concept VectorField = requires(const F& f, std::span<const double> h, double t,
                               std::span<double> out) {
  { f.dim() } -> std::convertible_to<std::size_t>;
  f(h, t, out);
};

// A vector field that also provides the vector-Jacobian products the adjoint
// method needs: a^T df/dh and a^T df/dtheta.
template <class F>
concept AdjointField = VectorField<F> && requires(const F& f, std::span<const double> h, double t,
                                                  std::span<const double> a, std::span<double> out) {
  { f.param_count() } -> std::convertible_to<std::size_t>;
  f.vjp_state(h, t, a, out);
  f.vjp_params(h, t, a, out);
};

// Evaluator for the MLP dynamics. Holds scratch buffers, so one instance must
// not be shared between threads; the referenced params are read-only.
class MlpField {
 public:
  explicit MlpField(const DynamicsParams& p)
      : p_(&p), z_(p.width), act_(p.width), u_(p.width) {
    p.validate();
  }

  std::size_t dim() const noexcept { return p_->d; }
  std::size_t param_count() const noexcept { return p_->param_count(); }

  void operator()(std::span<const double> h, double t, std::span<double> out) const {
    check(h, out.size());
    hidden(h, t);
    const std::size_t d = p_->d, w = p_->width;
    const double* w2 = p_->w2.span().data();
    for (std::size_t k = 0; k < d; ++k) {
      double acc = p_->b2[k];
      const double* row = w2 + k * w;
      for (std::size_t i = 0; i < w; ++i) acc += row[i] * act_[i];
      out[k] = acc;
    }
  }

  // out = w1_h^T diag(1 - tanh^2(z)) w2^T a
  void vjp_state(std::span<const double> h, double t, std::span<const double> a,
                 std::span<double> out) const {
    check(h, out.size());
    backprop_hidden(h, t, a);
    const std::size_t d = p_->d, w = p_->width;
    const double* w1 = p_->w1.span().data();
    for (std::size_t j = 0; j < d; ++j) out[j] = 0.0;
    for (std::size_t i = 0; i < w; ++i) {
      const double* row = w1 + i * (d + 1);
      const double ui = u_[i];
      for (std::size_t j = 0; j < d; ++j) out[j] += row[j] * ui;
    }
  }

  // out = a^T df/dtheta in the flat parameter order.
  void vjp_params(std::span<const double> h, double t, std::span<const double> a,
                  std::span<double> out) const {
    if (out.size() != p_->param_count()) throw ShapeError("vjp_params: output length mismatch");
    check(h, p_->d);
    backprop_hidden(h, t, a);
    const std::size_t d = p_->d, w = p_->width;
    double* o = out.data();
    for (std::size_t i = 0; i < w; ++i) {
      const double ui = u_[i];
      for (std::size_t j = 0; j < d; ++j) *o++ = ui * h[j];
      *o++ = ui * t;
    }
    for (std::size_t i = 0; i < w; ++i) *o++ = u_[i];
    for (std::size_t k = 0; k < d; ++k) {
      const double ak = a[k];
      for (std::size_t i = 0; i < w; ++i) *o++ = ak * act_[i];
    }
    for (std::size_t k = 0; k < d; ++k) *o++ = a[k];
  }

 private:
  void check(std::span<const double> h, std::size_t out_size) const {
    if (h.size() != p_->d || out_size != p_->d) {
      throw ShapeError("dynamics: state has dimension " + std::to_string(h.size()) +
                       ", expected " + std::to_string(p_->d));
    }
  }

  void hidden(std::span<const double> h, double t) const {
    const std::size_t d = p_->d, w = p_->width;
    const double* w1 = p_->w1.span().data();
    for (std::size_t i = 0; i < w; ++i) {
      const double* row = w1 + i * (d + 1);
      double acc = p_->b1[i] + row[d] * t;
      for (std::size_t j = 0; j < d; ++j) acc += row[j] * h[j];
      z_[i] = acc;
      act_[i] = std::tanh(acc);
    }
  }

  // u = (1 - tanh^2(z)) * (w2^T a); leaves act_ populated.
  void backprop_hidden(std::span<const double> h, double t, std::span<const double> a) const {
    if (a.size() != p_->d) throw ShapeError("vjp: cotangent dimension mismatch");
    hidden(h, t);
    const std::size_t d = p_->d, w = p_->width;
    const double* w2 = p_->w2.span().data();
    for (std::size_t i = 0; i < w; ++i) u_[i] = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double ak = a[k];
      const double* row = w2 + k * w;
      for (std::size_t i = 0; i < w; ++i) u_[i] += row[i] * ak;
    }
    for (std::size_t i = 0; i < w; ++i) u_[i] *= 1.0 - act_[i] * act_[i];
  }

  const DynamicsParams* p_;
  mutable std::vector<double> z_, act_, u_;
};

inline Tensor eval_dynamics(const DynamicsParams& params, const Tensor& h, double t) {
  MlpField f(params);
  Tensor out({params.d});
  f(h.span(), t, out.span());
  return out;
}

inline Tensor vjp_state(const DynamicsParams& params, const Tensor& h, double t, const Tensor& a) {
  MlpField f(params);
  Tensor out({params.d});
  f.vjp_state(h.span(), t, a.span(), out.span());
  return out;
}

inline Tensor vjp_params(const DynamicsParams& params, const Tensor& h, double t, const Tensor& a) {
  MlpField f(params);
  Tensor out({params.param_count()});
  f.vjp_params(h.span(), t, a.span(), out.span());
  return out;
}

}  // namespace nodetl
