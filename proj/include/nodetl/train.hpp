#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "nodetl/data.hpp"
#include "nodetl/model.hpp"
#include "nodetl/random.hpp"
#include "nodetl/solvers.hpp"
#include "nodetl/tensor.hpp"

namespace nodetl {

enum class HeadKind { baseline, node };

inline const char* to_string(HeadKind k) { return k == HeadKind::node ? "node" : "baseline"; }

enum class OptimizerKind { adam, sgd };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct SgdConfig {
  double lr = 1e-2;
  double momentum = 0.9;
};

struct AdamState {
  Tensor m;
  Tensor v;
  std::size_t step = 0;

  static AdamState zeros(std::size_t n) { return AdamState{Tensor({n}), Tensor({n}), 0}; }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
}

// Adam with bias correction. Updates params and state in place.
inline void adam_update(Tensor& params, const Tensor& grads, AdamState& st, const AdamConfig& cfg) {
  check_same_shape(params, grads, "adam_update");
  check_same_shape(params, st.m, "adam_update state");
  check_same_shape(params, st.v, "adam_update state");
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = st.m[i] / bc1;
    const double vhat = st.v[i] / bc2;
    params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

// v <- momentum * v + g;  p <- p - lr * v
inline void sgd_update(Tensor& params, const Tensor& grads, Tensor& velocity, const SgdConfig& cfg) {
  check_same_shape(params, grads, "sgd_update");
  check_same_shape(params, velocity, "sgd_update velocity");
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = cfg.momentum * velocity[i] + grads[i];
    params[i] -= cfg.lr * velocity[i];
  }
}

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::adam;
  AdamConfig adam;
  SgdConfig sgd;
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  GradMethod grad_method = GradMethod::discrete;
  SolverConfig solver;
  double val_fraction = 0.1;
  std::size_t width = 32;        // NODE dynamics hidden width
  double dynamics_scale = 0.1;   // NODE dynamics init scale

  double lr() const { return optimizer == OptimizerKind::adam ? adam.lr : sgd.lr; }

  void validate() const {
    if (!(lr() >= 0.0)) throw ContractError("train: lr must be non-negative");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
      throw ContractError("train: Adam betas must lie in [0, 1)");
    }
    if (!(adam.eps > 0.0)) throw ContractError("train: Adam eps must be > 0");
    if (!(sgd.momentum >= 0.0 && sgd.momentum < 1.0)) {
      throw ContractError("train: momentum must lie in [0, 1)");
    }
    if (epochs < 1 || batch_size < 1) throw ContractError("train: epochs and batch_size must be >= 1");
    if (width < 1) throw ContractError("train: width must be >= 1");
    solver.validate();
  }
};

// Default optimizer pairing: discrete-gradient NODE and the baseline use Adam,
// adjoint-gradient NODE uses SGD.
inline OptimizerKind default_optimizer(HeadKind kind, GradMethod method) {
  return kind == HeadKind::node && method == GradMethod::adjoint ? OptimizerKind::sgd
                                                                  : OptimizerKind::adam;
}

// Solver used to evaluate a NODE head trained with the given gradient method:
// RK4 for the discrete method, Dormand-Prince for the adjoint.
inline SolverConfig eval_solver(const TrainConfig& cfg) {
  SolverConfig s = cfg.solver;
  s.method = cfg.grad_method == GradMethod::discrete ? SolverMethod::rk4_fixed : SolverMethod::dopri5;
  return s;
}

struct MetricsRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double wall_ms = 0.0;
  std::size_t n_feval = 0;
};

struct Evaluation {
  double loss = 0.0;
  double acc = 0.0;
  std::size_t n_feval = 0;
};

inline Evaluation evaluate(const Head& head, const Dataset& ds, const SolverConfig& solver) {
  if (ds.size() == 0 || ds.labels.size() != ds.size()) {
    throw ContractError("evaluate: dataset must be non-empty and labeled");
  }
  Evaluation ev;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Tensor x =
        Tensor::vector(std::vector<double>(ds.features.row(i).begin(), ds.features.row(i).end()));
    Tensor logits;
    if (const auto* n = std::get_if<NodeHead>(&head)) {
      NodeForward fw = forward_node(*n, x, solver);
      ev.n_feval += fw.stats.n_feval;
      logits = std::move(fw.logits);
    } else {
      logits = forward_baseline(std::get<BaselineHead>(head), x);
    }
    ev.loss += cross_entropy(softmax(logits), ds.labels[i]);
    correct += argmax(logits.span()) == ds.labels[i] ? 1 : 0;
  }
  ev.loss /= static_cast<double>(ds.size());
  ev.acc = static_cast<double>(correct) / static_cast<double>(ds.size());
  return ev;
}

inline Head init_head(HeadKind kind, const TrainConfig& cfg, std::size_t d, std::size_t classes) {
  const std::uint64_t s = sub_seed(cfg.seed, "init");
  if (kind == HeadKind::node) return init_node_head(s, d, cfg.width, classes, cfg.dynamics_scale);
  return init_baseline_head(s, d, classes);
}

struct TrainResult {
  Head initial;
  Head head;
  std::vector<MetricsRecord> metrics;
};

using EpochCallback = std::function<void(const MetricsRecord&)>;

// Trains on a pre-split (train, val) pair. Shuffling draws from the "shuffle"
// sub-seed; initialization from the "init" sub-seed.
inline TrainResult train_split(HeadKind kind, const Dataset& train_set, const Dataset& val_set,
                               const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.size() == 0 || val_set.size() == 0) {
    throw ContractError("train: train and validation splits must be non-empty");
  }
  if (train_set.labels.size() != train_set.size() || val_set.labels.size() != val_set.size()) {
    throw ContractError("train: datasets must be labeled");
  }
  const std::size_t d = train_set.dim(), classes = train_set.class_count;
  TrainResult res;
  res.initial = init_head(kind, cfg, d, classes);
  res.head = res.initial;
  const SolverConfig solver = eval_solver(cfg);

  Tensor flat = std::visit([](const auto& h) { return flatten(h); }, res.head);
  AdamState adam = AdamState::zeros(flat.size());
  Tensor velocity({flat.size()});
  Rng shuffle(sub_seed(cfg.seed, "shuffle"));

  const std::size_t n = train_set.size();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const std::vector<std::size_t> order = permutation(n, shuffle);
    MetricsRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b0 = 0; b0 < n; b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(n, b0 + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + b0, b1 - b0);
      const Dataset batch = select_rows(train_set, idx);
      LossAndGrads lg;
      try {
        if (const auto* nh = std::get_if<NodeHead>(&res.head)) {
          lg = loss_and_grads(*nh, batch.features, batch.labels, cfg.grad_method, solver);
        } else {
          lg = loss_and_grads(std::get<BaselineHead>(res.head), batch.features, batch.labels);
        }
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ": " + e.what(), e.time());
      } catch (const BudgetError& e) {
        throw BudgetError("epoch " + std::to_string(epoch) + ": " + e.what(), e.time());
      }
      loss_sum += lg.loss * static_cast<double>(idx.size());
      correct += lg.correct;
      rec.n_feval += lg.stats.n_feval;
      if (cfg.optimizer == OptimizerKind::adam) {
        adam_update(flat, lg.grads, adam, cfg.adam);
      } else {
        sgd_update(flat, lg.grads, velocity, cfg.sgd);
      }
      std::visit([&](auto& h) { assign_flat(h, flat.span()); }, res.head);
    }
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(n);
    const Evaluation val = evaluate(res.head, val_set, solver);
    rec.val_loss = val.loss;
    rec.val_acc = val.acc;
    rec.n_feval += val.n_feval;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    res.metrics.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return res;
}

// Splits with the "split" sub-seed, then trains.
inline TrainResult train(HeadKind kind, const Dataset& data, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  const Split s = split_train_val(data, cfg.val_fraction, sub_seed(cfg.seed, "split"));
  return train_split(kind, s.train, s.val, cfg, on_epoch);
}

struct StabilityReport {
  std::size_t window = 0;
  std::vector<double> rolling_std_val_loss;
  std::vector<double> rolling_std_val_acc;
  double mean_rolling_std_val_loss = 0.0;
  double max_epoch_to_epoch_jump = 0.0;
};

// Population standard deviation (divisor = window) over each sliding window.
inline StabilityReport stability_stats(const std::vector<MetricsRecord>& metrics, std::size_t window) {
  if (window < 2) throw ContractError("stability_stats: window must be >= 2");
  if (metrics.size() < window) {
    throw ContractError("stability_stats: " + std::to_string(metrics.size()) +
                        " epochs is shorter than window " + std::to_string(window));
  }
  auto rolling = [&](auto field) {
    std::vector<double> out;
    for (std::size_t s = 0; s + window <= metrics.size(); ++s) {
      // Shifted by the window's first value so constant windows give exactly 0.
      const double shift = field(metrics[s]);
      double mean = 0.0;
      for (std::size_t i = s; i < s + window; ++i) mean += field(metrics[i]) - shift;
      mean /= static_cast<double>(window);
      double var = 0.0;
      for (std::size_t i = s; i < s + window; ++i) {
        const double dv = field(metrics[i]) - shift - mean;
        var += dv * dv;
      }
      out.push_back(std::sqrt(var / static_cast<double>(window)));
    }
    return out;
  };
  StabilityReport r;
  r.window = window;
  r.rolling_std_val_loss = rolling([](const MetricsRecord& m) { return m.val_loss; });
  r.rolling_std_val_acc = rolling([](const MetricsRecord& m) { return m.val_acc; });
  double sum = 0.0;
  for (double v : r.rolling_std_val_loss) sum += v;
  r.mean_rolling_std_val_loss = sum / static_cast<double>(r.rolling_std_val_loss.size());
  for (std::size_t i = 1; i < metrics.size(); ++i) {
    r.max_epoch_to_epoch_jump =
        std::max(r.max_epoch_to_epoch_jump, std::abs(metrics[i].val_loss - metrics[i - 1].val_loss));
  }
  return r;
}

// Metrics CSV, 6 significant digits.
inline constexpr const char* kMetricsHeader = "epoch,train_loss,train_acc,val_loss,val_acc,wall_ms,n_feval";

inline std::string format_g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::string metrics_csv(const std::vector<MetricsRecord>& metrics) {
  std::ostringstream os;
  os << kMetricsHeader << '\n';
  for (const auto& m : metrics) {
    os << m.epoch << ',' << format_g6(m.train_loss) << ',' << format_g6(m.train_acc) << ','
       << format_g6(m.val_loss) << ',' << format_g6(m.val_acc) << ',' << format_g6(m.wall_ms) << ','
       << m.n_feval << '\n';
  }
  return os.str();
}

inline void write_metrics_csv(const std::vector<MetricsRecord>& metrics, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << metrics_csv(metrics);
}

// Parses a metrics CSV. Errors carry the 1-based line number in the message
// and in FormatError::offset().
inline std::vector<MetricsRecord> parse_metrics_csv(std::istream& in) {
  std::vector<MetricsRecord> out;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) -> FormatError {
    return FormatError("metrics CSV line " + std::to_string(lineno) + ": " + why, lineno);
  };
  if (!std::getline(in, line)) {
    lineno = 1;
    throw fail("missing header");
  }
  lineno = 1;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kMetricsHeader) throw fail("unexpected header \"" + line + "\"");
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw fail("expected 7 fields, found " + std::to_string(cells.size()));
    std::vector<double> v(7);
    for (std::size_t i = 0; i < 7; ++i) {
      std::size_t used = 0;
      try {
        v[i] = std::stod(cells[i], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != cells[i].size() || !std::isfinite(v[i])) {
        throw fail("field " + std::to_string(i + 1) + " is not a number: \"" + cells[i] + "\"");
      }
    }
    MetricsRecord m;
    m.epoch = static_cast<std::size_t>(v[0]);
    m.train_loss = v[1];
    m.train_acc = v[2];
    m.val_loss = v[3];
    m.val_acc = v[4];
    m.wall_ms = v[5];
    m.n_feval = static_cast<std::size_t>(v[6]);
    out.push_back(m);
  }
  return out;
}

}  // namespace nodetl
