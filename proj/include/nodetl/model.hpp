#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "nodetl/adjoint.hpp"
#include "nodetl/binio.hpp"
#include "nodetl/dynamics.hpp"
#include "nodetl/random.hpp"
#include "nodetl/solvers.hpp"
#include "nodetl/tensor.hpp"

namespace nodetl {

// Integration span of the NODE block.
inline constexpr double kNodeT0 = 0.0;
inline constexpr double kNodeT1 = 1.0;

enum class GradMethod { adjoint, discrete };

inline const char* to_string(GradMethod g) {
  return g == GradMethod::adjoint ? "adjoint" : "discrete";
}

// Plain fully-connected classifier over frozen features.
struct BaselineHead {
  Tensor w_out;  // [classes x d]
  Tensor b_out;  // [classes]

  std::size_t d() const { return w_out.dim(1); }
  std::size_t classes() const { return w_out.dim(0); }
  std::size_t param_count() const { return w_out.size() + b_out.size(); }

  friend bool operator==(const BaselineHead&, const BaselineHead&) = default;
};

// Continuous-depth block over [0, 1] followed by the same final layer as the
// baseline. The block's state dimension is the feature dimension.
struct NodeHead {
  DynamicsParams dynamics;
  Tensor w_out;  // [classes x d]
  Tensor b_out;  // [classes]

  std::size_t d() const { return w_out.dim(1); }
  std::size_t classes() const { return w_out.dim(0); }
  std::size_t param_count() const { return dynamics.param_count() + w_out.size() + b_out.size(); }

  friend bool operator==(const NodeHead&, const NodeHead&) = default;
};

using Head = std::variant<BaselineHead, NodeHead>;

inline BaselineHead init_baseline_head(std::uint64_t seed, std::size_t d, std::size_t classes) {
  BaselineHead h{Tensor({classes, d}), Tensor({classes})};
  Rng rng(sub_seed(seed, "output"));
  const double bound = std::sqrt(1.0 / static_cast<double>(d));
  for (double& v : h.w_out.span()) v = rng.uniform(-bound, bound);
  return h;
}

// The output layer is drawn exactly as init_baseline_head draws it, so both
// heads start from the same final layer for a given seed.
inline NodeHead init_node_head(std::uint64_t seed, std::size_t d, std::size_t width,
                               std::size_t classes, double dynamics_scale) {
  BaselineHead out = init_baseline_head(seed, d, classes);
  return NodeHead{init_params(sub_seed(seed, "dynamics"), d, width, dynamics_scale),
                  std::move(out.w_out), std::move(out.b_out)};
}

inline void check_head(const Tensor& w_out, const Tensor& b_out) {
  if (w_out.rank() != 2 || b_out.shape() != Shape{w_out.dim(0)}) {
    throw ShapeError("head: output layer shapes " + shape_str(w_out.shape()) + " and " +
                     shape_str(b_out.shape()) + " are inconsistent");
  }
}

inline void check_head(const NodeHead& h) {
  check_head(h.w_out, h.b_out);
  h.dynamics.validate();
  if (h.dynamics.d != h.w_out.dim(1)) {
    throw ShapeError("node head: dynamics dimension " + std::to_string(h.dynamics.d) +
                     " differs from output layer input " + std::to_string(h.w_out.dim(1)));
  }
}

inline Tensor forward_baseline(const BaselineHead& head, const Tensor& features) {
  check_head(head.w_out, head.b_out);
  Tensor logits = matvec(head.w_out, features);
  for (std::size_t c = 0; c < logits.size(); ++c) logits[c] += head.b_out[c];
  return logits;
}

struct NodeForward {
  Tensor logits;
  SolveStats stats;
  Tensor hT;
};

// Solves the block with cfg.method (RK4 with cfg.n_steps, or Dormand-Prince).
inline NodeForward forward_node(const NodeHead& head, const Tensor& features,
                                const SolverConfig& cfg) {
  check_head(head);
  if (features.size() != head.d()) {
    throw ShapeError("forward_node: features " + shape_str(features.shape()) +
                     " do not match head dimension " + std::to_string(head.d()));
  }
  MlpField f(head.dynamics);
  NodeForward out;
  if (cfg.method == SolverMethod::rk4_fixed) {
    AdaptiveSolution s = integrate_fixed(f, features, kNodeT0, kNodeT1, cfg.n_steps);
    out.hT = std::move(s.hT);
    out.stats = s.stats;
  } else {
    AdaptiveSolution s = solve_adaptive(f, features, kNodeT0, kNodeT1, cfg);
    out.hT = std::move(s.hT);
    out.stats = s.stats;
  }
  out.logits = matvec(head.w_out, out.hT);
  for (std::size_t c = 0; c < out.logits.size(); ++c) out.logits[c] += head.b_out[c];
  return out;
}

// Flat parameter vectors: the NODE head is [dynamics flat, w_out, b_out]; the
// baseline is [w_out, b_out].
inline Tensor flatten(const BaselineHead& h) {
  std::vector<double> v(h.w_out.values());
  v.insert(v.end(), h.b_out.values().begin(), h.b_out.values().end());
  return Tensor::vector(std::move(v));
}

inline Tensor flatten(const NodeHead& h) {
  std::vector<double> v(h.dynamics.flatten().values());
  v.insert(v.end(), h.w_out.values().begin(), h.w_out.values().end());
  v.insert(v.end(), h.b_out.values().begin(), h.b_out.values().end());
  return Tensor::vector(std::move(v));
}

inline void assign_flat(BaselineHead& h, std::span<const double> flat) {
  if (flat.size() != h.param_count()) throw ShapeError("baseline head: flat length mismatch");
  auto w = h.w_out.span();
  auto b = h.b_out.span();
  std::copy(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(w.size()), w.begin());
  std::copy(flat.begin() + static_cast<std::ptrdiff_t>(w.size()), flat.end(), b.begin());
}

inline void assign_flat(NodeHead& h, std::span<const double> flat) {
  if (flat.size() != h.param_count()) throw ShapeError("node head: flat length mismatch");
  const std::size_t p = h.dynamics.param_count();
  h.dynamics = DynamicsParams::unflatten(flat.subspan(0, p), h.dynamics.d, h.dynamics.width);
  auto w = h.w_out.span();
  auto b = h.b_out.span();
  const auto rest = flat.subspan(p);
  std::copy(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(w.size()), w.begin());
  std::copy(rest.begin() + static_cast<std::ptrdiff_t>(w.size()), rest.end(), b.begin());
}

struct LossAndGrads {
  double loss = 0.0;       // mean over the batch
  Tensor grads;            // mean over the batch, flat head order
  std::size_t correct = 0; // argmax(logits) == label
  SolveStats stats;
};

namespace detail {

// Loss of one sample and dL/dlogits. The derivative is that of the clamped
// -log(p_y + eps) actually evaluated.
inline double sample_loss(const Tensor& logits, std::size_t label, std::span<double> dlogits,
                          bool& correct) {
  const Tensor probs = softmax(logits);
  const double loss = cross_entropy(probs, label);
  const double py = probs[label];
  const double r = loss > 0.0 ? py / (py + kLogEpsilon) : 0.0;
  for (std::size_t c = 0; c < probs.size(); ++c) {
    dlogits[c] = r * (probs[c] - (c == label ? 1.0 : 0.0));
  }
  correct = argmax(logits.span()) == label;
  return loss;
}

// Accumulates the output-layer gradient for one sample at offset off of g and
// returns d_hidden = w_out^T dlogits.
inline Tensor output_layer_grad(const Tensor& w_out, std::span<const double> hidden,
                                std::span<const double> dlogits, std::span<double> g,
                                std::size_t off) {
  const std::size_t classes = w_out.dim(0), d = w_out.dim(1);
  Tensor dh({d});
  for (std::size_t c = 0; c < classes; ++c) {
    const double dc = dlogits[c];
    for (std::size_t j = 0; j < d; ++j) {
      g[off + c * d + j] += dc * hidden[j];
      dh[j] += w_out.at(c, j) * dc;
    }
  }
  for (std::size_t c = 0; c < classes; ++c) g[off + classes * d + c] += dlogits[c];
  return dh;
}

inline void check_batch(const Tensor& features, std::span<const std::uint8_t> labels,
                        std::size_t d) {
  if (labels.empty()) throw ContractError("loss_and_grads: batch is empty");
  if (features.rank() != 2 || features.dim(0) != labels.size() || features.dim(1) != d) {
    throw ShapeError("loss_and_grads: features " + shape_str(features.shape()) + " with " +
                     std::to_string(labels.size()) + " labels do not match head dimension " +
                     std::to_string(d));
  }
}

}  // namespace detail

inline LossAndGrads loss_and_grads(const BaselineHead& head, const Tensor& features,
                                   std::span<const std::uint8_t> labels) {
  detail::check_batch(features, labels, head.d());
  LossAndGrads out;
  out.grads = Tensor({head.param_count()});
  std::vector<double> dlogits(head.classes());
  for (std::size_t s = 0; s < labels.size(); ++s) {
    const Tensor x = Tensor::vector(std::vector<double>(features.row(s).begin(), features.row(s).end()));
    const Tensor logits = forward_baseline(head, x);
    bool ok = false;
    out.loss += detail::sample_loss(logits, labels[s], dlogits, ok);
    out.correct += ok ? 1 : 0;
    detail::output_layer_grad(head.w_out, x.span(), dlogits, out.grads.span(), 0);
  }
  const double inv = 1.0 / static_cast<double>(labels.size());
  out.loss *= inv;
  for (double& g : out.grads.span()) g *= inv;
  return out;
}

// The discrete method backpropagates through RK4 with cfg.n_steps; the adjoint
// method solves forward and backward with Dormand-Prince at cfg's tolerances.
inline LossAndGrads loss_and_grads(const NodeHead& head, const Tensor& features,
                                   std::span<const std::uint8_t> labels, GradMethod method,
                                   const SolverConfig& cfg) {
  check_head(head);
  detail::check_batch(features, labels, head.d());
  const std::size_t p = head.dynamics.param_count();
  MlpField f(head.dynamics);
  LossAndGrads out;
  out.grads = Tensor({head.param_count()});
  auto g = out.grads.span();
  std::vector<double> dlogits(head.classes());

  for (std::size_t s = 0; s < labels.size(); ++s) {
    const Tensor x = Tensor::vector(std::vector<double>(features.row(s).begin(), features.row(s).end()));
    Tensor hT;
    FixedSolution fixed;
    if (method == GradMethod::discrete) {
      fixed = solve_fixed(f, x, kNodeT0, kNodeT1, cfg.n_steps);
      hT = fixed.hT;
      out.stats += fixed.stats;
    } else {
      AdaptiveSolution sol = solve_adaptive(f, x, kNodeT0, kNodeT1, cfg);
      hT = std::move(sol.hT);
      out.stats += sol.stats;
    }
    Tensor logits = matvec(head.w_out, hT);
    for (std::size_t c = 0; c < logits.size(); ++c) logits[c] += head.b_out[c];
    bool ok = false;
    out.loss += detail::sample_loss(logits, labels[s], dlogits, ok);
    out.correct += ok ? 1 : 0;
    const Tensor d_hT = detail::output_layer_grad(head.w_out, hT.span(), dlogits, g, p);

    GradientResult gr;
    if (method == GradMethod::discrete) {
      gr = backprop_through_solver(f, fixed.trajectory, d_hT);
    } else {
      AdjointFootprint fp;
      gr = adjoint_solve(f, hT, d_hT, kNodeT0, kNodeT1, cfg, &fp);
      out.stats += fp.stats;
    }
    for (std::size_t j = 0; j < p; ++j) g[j] += gr.d_params[j];
  }
  const double inv = 1.0 / static_cast<double>(labels.size());
  out.loss *= inv;
  for (double& v : g) v *= inv;
  return out;
}

// Checkpoint: "NODC", u32 version, u8 head kind (0 baseline, 1 node), u32 d,
// u32 width (0 for baseline), u32 classes, then the flat parameters as
// little-endian f64.
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<unsigned char> encode_checkpoint(const Head& head) {
  std::vector<unsigned char> buf;
  binio::put_bytes(buf, "NODC");
  binio::put_u32(buf, kCheckpointVersion);
  Tensor flat;
  if (const auto* n = std::get_if<NodeHead>(&head)) {
    binio::put_u8(buf, 1);
    binio::put_u32(buf, static_cast<std::uint32_t>(n->d()));
    binio::put_u32(buf, static_cast<std::uint32_t>(n->dynamics.width));
    binio::put_u32(buf, static_cast<std::uint32_t>(n->classes()));
    flat = flatten(*n);
  } else {
    const auto& b = std::get<BaselineHead>(head);
    binio::put_u8(buf, 0);
    binio::put_u32(buf, static_cast<std::uint32_t>(b.d()));
    binio::put_u32(buf, 0);
    binio::put_u32(buf, static_cast<std::uint32_t>(b.classes()));
    flat = flatten(b);
  }
  for (double v : flat.values()) binio::put_f64(buf, v);
  return buf;
}

inline Head decode_checkpoint(const std::vector<unsigned char>& buf) {
  binio::Reader r(buf);
  r.expect_magic("NODC");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  const std::uint8_t kind = r.u8("head kind");
  const std::size_t d = r.u32("d");
  const std::size_t width = r.u32("width");
  const std::size_t classes = r.u32("classes");
  if (kind > 1) throw FormatError("bad head kind " + std::to_string(kind), 8);
  if (d == 0 || classes == 0 || (kind == 1 && width == 0)) {
    throw FormatError("checkpoint dimensions must be positive", 9);
  }
  auto read_flat = [&](std::size_t count) {
    r.need(count * 8, "parameters");
    std::vector<double> v(count);
    for (double& x : v) x = r.f64("parameters");
    r.expect_end();
    return v;
  };
  if (kind == 0) {
    BaselineHead h{Tensor({classes, d}), Tensor({classes})};
    assign_flat(h, read_flat(h.param_count()));
    return h;
  }
  NodeHead h{DynamicsParams::zeros(d, width), Tensor({classes, d}), Tensor({classes})};
  assign_flat(h, read_flat(h.param_count()));
  return h;
}

inline void save_checkpoint(const Head& head, const std::string& path) {
  binio::write_file(path, encode_checkpoint(head));
}

inline Head load_checkpoint(const std::string& path) {
  return decode_checkpoint(binio::read_file(path));
}

}  // namespace nodetl
