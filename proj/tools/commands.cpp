#include "commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>
#include <type_traits>

namespace nodetl::cli {

namespace fs = std::filesystem;

namespace {

// Raised for a failed numeric check (gradcheck thresholds).
class ThresholdError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shortest representation that reads back to the same double.
std::string fmt17(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_floating_point_v<T>) {
    return fmt17(v);
  } else if constexpr (std::is_integral_v<T>) {
    return std::to_string(v);
  } else {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) s += ',';
      s += format_value(v[i]);
    }
    return s;
  }
}

// Registers options and remembers how to print their resolved values.
class Flags {
 public:
  explicit Flags(CLI::App* app) : app_(app) {}

  template <class T>
  CLI::Option* opt(const std::string& name, T& var, const std::string& desc) {
    CLI::Option* o = app_->add_option("--" + name, var, desc)->capture_default_str();
    if constexpr (!std::is_same_v<T, std::string> && !std::is_arithmetic_v<T>) o->delimiter(',');
    items_.emplace_back(name, [&var] { return format_value(var); });
    return o;
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& desc) {
    items_.emplace_back(name, [&var] { return format_value(var); });
    return app_->add_flag("--" + name, var, desc);
  }

  std::vector<std::pair<std::string, std::string>> resolved() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [name, get] : items_) out.emplace_back(name, get());
    return out;
  }

  CLI::App* app() const { return app_; }

 private:
  CLI::App* app_;
  std::vector<std::pair<std::string, std::function<std::string()>>> items_;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw DataError("failed writing " + path.string());
}

// Flat key=value run record. Written before any work and rewritten with the
// end timestamp when the command finishes.
class Manifest {
 public:
  Manifest(std::string command, const Flags& flags, const fs::path& out_dir, std::string seed)
      : command_(std::move(command)), flags_(flags.resolved()), out_dir_(out_dir), seed_(std::move(seed)) {
    fs::create_directories(out_dir_);
    start_ = utc_now();
    write("");
  }

  Manifest(const Manifest&) = delete;
  Manifest& operator=(const Manifest&) = delete;

  ~Manifest() {
    if (finished_) return;
    try {
      write(utc_now(), "failed");
    } catch (...) {
    }
  }

  void finish(const std::string& status) {
    write(utc_now(), status);
    finished_ = true;
  }

 private:
  void write(const std::string& end, const std::string& status = "running") const {
    std::ostringstream os;
    os << "command=" << command_ << '\n'
       << "toolkit_version=" << kVersion << '\n'
       << "seed=" << seed_ << '\n'
       << "out_dir=" << out_dir_.string() << '\n'
       << "start_time=" << start_ << '\n'
       << "end_time=" << end << '\n'
       << "status=" << status << '\n';
    for (const auto& [k, v] : flags_) os << "flag." << k << '=' << v << '\n';
    write_text(out_dir_ / "manifest.txt", os.str());
  }

  std::string command_;
  std::vector<std::pair<std::string, std::string>> flags_;
  fs::path out_dir_;
  std::string seed_;
  std::string start_;
  bool finished_ = false;
};

std::string absolute_or_empty(const std::string& p) {
  return p.empty() ? p : fs::absolute(p).lexically_normal().string();
}

bool has_magic(const std::vector<unsigned char>& bytes, const char* magic) {
  return bytes.size() >= 4 && std::equal(magic, magic + 4, bytes.begin());
}

// Either a CIFAR-10 record file or a feature file, by magic.
struct RawInput {
  std::optional<ImageSet> images;
  std::optional<Dataset> features;
};

RawInput read_input_file(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("no such file: " + path.string());
  const auto bytes = binio::read_file(path.string());
  RawInput in;
  if (has_magic(bytes, "NODF")) {
    in.features = decode_feature_file(bytes);
  } else {
    in.images = parse_cifar10(bytes);
  }
  return in;
}

void truncate(ImageSet& set, std::size_t limit) {
  if (limit == 0 || limit >= set.size()) return;
  set.labels.resize(limit);
  set.pixels.resize(limit * kCifarPixels);
}

Dataset truncate(const Dataset& ds, std::size_t limit) {
  if (limit == 0 || limit >= ds.size()) return ds;
  std::vector<std::size_t> idx(limit);
  for (std::size_t i = 0; i < limit; ++i) idx[i] = i;
  return select_rows(ds, idx);
}

Dataset to_features(RawInput in, const DataOptions& opt, std::size_t limit, const std::string& what) {
  if (in.features) {
    Dataset ds = truncate(*in.features, limit);
    if (!ds.has_labels()) throw DataError(what + " feature file carries no labels");
    return ds;
  }
  truncate(*in.images, limit);
  return extract_features(FrozenExtractor(opt.extractor_seed, opt.feature_dim), *in.images);
}

Dataset require_labels(Dataset ds, const std::string& what) {
  if (ds.size() == 0) throw DataError(what + " is empty");
  return ds;
}

}  // namespace

LoadedData load_data(const DataOptions& opt) {
  if (opt.data.empty()) throw UsageError("--data is required");
  const fs::path path(opt.data);
  if (!fs::exists(path)) throw DataError("no such file or directory: " + opt.data);
  LoadedData out;
  if (fs::is_directory(path)) {
    std::vector<fs::path> batches;
    for (const auto& e : fs::directory_iterator(path)) {
      const std::string name = e.path().filename().string();
      if (name.rfind("data_batch_", 0) == 0 && e.path().extension() == ".bin") batches.push_back(e.path());
    }
    std::sort(batches.begin(), batches.end());
    if (batches.empty()) throw DataError("no data_batch_*.bin files in " + opt.data);
    ImageSet train;
    for (const auto& b : batches) {
      if (opt.limit != 0 && train.size() >= opt.limit) break;
      append(train, load_cifar10_bin(b.string()));
    }
    truncate(train, opt.limit);
    const FrozenExtractor ex(opt.extractor_seed, opt.feature_dim);
    out.pool = extract_features(ex, train);
    out.description = "cifar10 directory " + opt.data + " (" + std::to_string(batches.size()) + " batches)";
    const fs::path test = path / "test_batch.bin";
    if (opt.test_data.empty() && fs::exists(test)) {
      ImageSet t = load_cifar10_bin(test.string());
      truncate(t, opt.test_limit);
      out.test = extract_features(ex, t);
    }
  } else {
    out.pool = to_features(read_input_file(path), opt, opt.limit, "training");
    out.description = "file " + opt.data;
  }
  if (!opt.test_data.empty()) {
    out.test = to_features(read_input_file(opt.test_data), opt, opt.test_limit, "test");
  }
  out.pool = require_labels(std::move(out.pool), "training data");
  if (out.test) {
    if (out.test->dim() != out.pool.dim()) {
      throw DataError("test features have dimension " + std::to_string(out.test->dim()) +
                      ", training features " + std::to_string(out.pool.dim()));
    }
    if (out.test->size() == 0) out.test.reset();
  }
  return out;
}

GradcheckReport gradcheck(const GradcheckOptions& opt) {
  if (opt.d == 0 || opt.width == 0 || opt.classes == 0 || opt.batch == 0) {
    throw ContractError("gradcheck: d, width, classes and batch must be >= 1");
  }
  const NodeHead head = init_node_head(sub_seed(opt.seed, "init"), opt.d, opt.width, opt.classes, opt.scale);
  Rng rng(sub_seed(opt.seed, "data"));
  Tensor x({opt.batch, opt.d});
  for (double& v : x.span()) v = rng.uniform(-1.0, 1.0);
  std::vector<std::uint8_t> y(opt.batch);
  for (auto& l : y) l = static_cast<std::uint8_t>(rng.below(opt.classes));

  SolverConfig discrete_cfg;
  discrete_cfg.n_steps = opt.n_steps;
  SolverConfig adjoint_cfg;
  adjoint_cfg.rtol = opt.rtol;
  adjoint_cfg.atol = opt.atol;

  const Tensor g_disc = loss_and_grads(head, x, y, GradMethod::discrete, discrete_cfg).grads;
  const Tensor g_adj = loss_and_grads(head, x, y, GradMethod::adjoint, adjoint_cfg).grads;

  Tensor theta = flatten(head);
  Tensor g_fd({theta.size()});
  NodeHead probe = head;
  SolverConfig forward_cfg = discrete_cfg;
  forward_cfg.method = SolverMethod::rk4_fixed;
  auto loss_at = [&](const Tensor& t) {
    assign_flat(probe, t.span());
    double loss = 0.0;
    for (std::size_t i = 0; i < opt.batch; ++i) {
      const auto row = x.row(i);
      const Tensor xi = Tensor::vector(std::vector<double>(row.begin(), row.end()));
      loss += cross_entropy(softmax(forward_node(probe, xi, forward_cfg).logits), y[i]);
    }
    return loss / static_cast<double>(opt.batch);
  };
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double v = theta[i];
    theta[i] = v + opt.fd_step;
    const double lp = loss_at(theta);
    theta[i] = v - opt.fd_step;
    const double lm = loss_at(theta);
    theta[i] = v;
    g_fd[i] = (lp - lm) / (2.0 * opt.fd_step);
  }

  auto compare = [&](const char* name, const Tensor& a, const Tensor& b) {
    PairDeviation p{name};
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double diff = std::abs(a[i] - b[i]);
      const double mag = std::max(std::abs(a[i]), std::abs(b[i]));
      p.max_abs = std::max(p.max_abs, diff);
      if (mag > 0.0) p.max_rel = std::max(p.max_rel, diff / mag);
      if (!(diff <= std::max(opt.rel_threshold * mag, opt.abs_threshold))) p.pass = false;
    }
    return p;
  };
  GradcheckReport r;
  r.pairs.push_back(compare("fd-discrete", g_fd, g_disc));
  r.pairs.push_back(compare("fd-adjoint", g_fd, g_adj));
  r.pairs.push_back(compare("discrete-adjoint", g_disc, g_adj));
  return r;
}

namespace {

double column_value(const MetricsRecord& m, const std::string& column) {
  if (column == "train_loss") return m.train_loss;
  if (column == "train_acc") return m.train_acc;
  if (column == "val_loss") return m.val_loss;
  if (column == "val_acc") return m.val_acc;
  if (column == "wall_ms") return m.wall_ms;
  if (column == "n_feval") return static_cast<double>(m.n_feval);
  throw UsageError("unknown metrics column: " + column);
}

std::string f3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace

std::string svg_chart(const std::vector<MetricsRecord>& metrics, const std::string& column) {
  constexpr double W = 640, H = 400, left = 70, right = 20, top = 40, bottom = 50;
  const double pw = W - left - right, ph = H - top - bottom;
  double xmin = 0, xmax = 0, ymin = 0, ymax = 0;
  if (!metrics.empty()) {
    xmin = xmax = static_cast<double>(metrics.front().epoch);
    ymin = ymax = column_value(metrics.front(), column);
  }
  for (const auto& m : metrics) {
    xmin = std::min(xmin, static_cast<double>(m.epoch));
    xmax = std::max(xmax, static_cast<double>(m.epoch));
    ymin = std::min(ymin, column_value(m, column));
    ymax = std::max(ymax, column_value(m, column));
  }
  auto px = [&](double x) { return xmax > xmin ? left + (x - xmin) / (xmax - xmin) * pw : left + pw / 2; };
  // SVG y grows downward: the largest value maps to the top edge.
  auto py = [&](double y) { return ymax > ymin ? top + (ymax - y) / (ymax - ymin) * ph : top + ph / 2; };

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" viewBox=\"0 0 " << W << ' ' << H << "\">\n"
     << "  <rect x=\"0\" y=\"0\" width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n"
     << "  <text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
        "font-size=\"16\">"
     << column << " vs epoch</text>\n"
     << "  <line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\""
     << top + ph << "\" stroke=\"black\"/>\n"
     << "  <line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
     << "\" stroke=\"black\"/>\n"
     << "  <text x=\"" << left - 6 << "\" y=\"" << top + 4 << "\" text-anchor=\"end\" "
        "font-family=\"sans-serif\" font-size=\"11\">"
     << format_g6(ymax) << "</text>\n"
     << "  <text x=\"" << left - 6 << "\" y=\"" << top + ph + 4 << "\" text-anchor=\"end\" "
        "font-family=\"sans-serif\" font-size=\"11\">"
     << format_g6(ymin) << "</text>\n"
     << "  <text x=\"" << left << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\" "
        "font-family=\"sans-serif\" font-size=\"11\">"
     << format_g6(xmin) << "</text>\n"
     << "  <text x=\"" << left + pw << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\" "
        "font-family=\"sans-serif\" font-size=\"11\">"
     << format_g6(xmax) << "</text>\n"
     << "  <text x=\"" << left + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" "
        "font-family=\"sans-serif\" font-size=\"12\">epoch</text>\n"
     << "  <polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < metrics.size(); ++i) {
    if (i) os << ' ';
    os << f3(px(static_cast<double>(metrics[i].epoch))) << ',' << f3(py(column_value(metrics[i], column)));
  }
  os << "\"/>\n";
  for (const auto& m : metrics) {
    os << "  <circle cx=\"" << f3(px(static_cast<double>(m.epoch))) << "\" cy=\""
       << f3(py(column_value(m, column))) << "\" r=\"2.5\" fill=\"#1f77b4\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

namespace {

// Options shared by every command that trains.
struct TrainOptions {
  DataOptions data;
  std::string grad = "discrete";
  std::string optimizer;  // empty: paired default
  double lr = -1.0;       // negative: optimizer default
  double momentum = SgdConfig{}.momentum;
  double beta1 = AdamConfig{}.beta1;
  double beta2 = AdamConfig{}.beta2;
  double eps = AdamConfig{}.eps;
  double rtol = SolverConfig{}.rtol;
  double atol = SolverConfig{}.atol;
  std::size_t n_steps = SolverConfig{}.n_steps;
  std::size_t max_steps = SolverConfig{}.max_steps;
  std::size_t epochs = TrainConfig{}.epochs;
  std::size_t batch_size = TrainConfig{}.batch_size;
  std::uint64_t seed = 0;
  double val_fraction = TrainConfig{}.val_fraction;
  std::size_t width = TrainConfig{}.width;
  double scale = TrainConfig{}.dynamics_scale;
  std::string out;
};

void add_data_flags(Flags& f, DataOptions& d) {
  f.opt("data", d.data, "CIFAR-10 directory, CIFAR-10 .bin file, or feature file")->required();
  f.opt("test-data", d.test_data, "held-out test set (CIFAR-10 .bin or feature file)");
  f.opt("feature-dim", d.feature_dim, "frozen extractor output dimension")->check(CLI::Range(1, 3072));
  f.opt("extractor-seed", d.extractor_seed, "frozen extractor projection seed");
  f.opt("limit", d.limit, "use only the first N training records (0 = all)");
  f.opt("test-limit", d.test_limit, "use only the first N test records (0 = all)");
}

void add_train_flags(Flags& f, TrainOptions& o) {
  add_data_flags(f, o.data);
  f.opt("grad", o.grad, "NODE gradient method")->check(CLI::IsMember({"discrete", "adjoint"}));
  f.opt("optimizer", o.optimizer, "adam or sgd (default: adam for discrete, sgd for adjoint)")
      ->check(CLI::IsMember({"", "adam", "sgd"}));
  f.opt("lr", o.lr, "learning rate (default: 1e-3 adam, 1e-2 sgd)");
  f.opt("momentum", o.momentum, "SGD momentum");
  f.opt("beta1", o.beta1, "Adam beta1");
  f.opt("beta2", o.beta2, "Adam beta2");
  f.opt("eps", o.eps, "Adam epsilon");
  f.opt("rtol", o.rtol, "adaptive solver relative tolerance");
  f.opt("atol", o.atol, "adaptive solver absolute tolerance");
  f.opt("n-steps", o.n_steps, "RK4 steps over [0, 1] for the discrete method");
  f.opt("max-steps", o.max_steps, "adaptive solver step budget");
  f.opt("epochs", o.epochs, "training epochs");
  f.opt("batch-size", o.batch_size, "minibatch size");
  f.opt("seed", o.seed, "seed for initialization, shuffling and the train/val split");
  f.opt("val-fraction", o.val_fraction, "fraction of the training pool held out for validation");
  f.opt("width", o.width, "NODE dynamics hidden width");
  f.opt("scale", o.scale, "NODE dynamics initialization scale");
}

GradMethod parse_grad(const std::string& s) { return s == "adjoint" ? GradMethod::adjoint : GradMethod::discrete; }

// Fills the optimizer and learning rate defaults so the manifest records what
// actually ran.
void resolve_optimizer(TrainOptions& o, HeadKind paired_head) {
  if (o.optimizer.empty()) o.optimizer = to_string(default_optimizer(paired_head, parse_grad(o.grad)));
  if (o.lr < 0.0) o.lr = o.optimizer == "adam" ? AdamConfig{}.lr : SgdConfig{}.lr;
  o.data.data = absolute_or_empty(o.data.data);
  o.data.test_data = absolute_or_empty(o.data.test_data);
}

TrainConfig make_config(const TrainOptions& o) {
  TrainConfig c;
  c.optimizer = o.optimizer == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
  c.adam = AdamConfig{o.lr, o.beta1, o.beta2, o.eps};
  c.sgd = SgdConfig{o.lr, o.momentum};
  c.epochs = o.epochs;
  c.batch_size = o.batch_size;
  c.seed = o.seed;
  c.grad_method = parse_grad(o.grad);
  c.solver.rtol = o.rtol;
  c.solver.atol = o.atol;
  c.solver.n_steps = o.n_steps;
  c.solver.max_steps = o.max_steps;
  c.val_fraction = o.val_fraction;
  c.width = o.width;
  c.dynamics_scale = o.scale;
  c.validate();
  return c;
}

std::string default_out(const std::string& command) { return "nodetl_runs/" + command; }

struct RunOutcome {
  TrainResult result;
  std::optional<double> test_acc;
  double total_ms = 0.0;
};

RunOutcome train_and_save(HeadKind kind, const LoadedData& data, const TrainConfig& cfg, const fs::path& dir,
                          const EpochCallback& cb = {}) {
  fs::create_directories(dir);
  RunOutcome o;
  const auto start = std::chrono::steady_clock::now();
  o.result = train(kind, data.pool, cfg, cb);
  o.total_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  write_metrics_csv(o.result.metrics, (dir / "metrics.csv").string());
  save_checkpoint(o.result.head, (dir / "checkpoint.nodc").string());
  if (data.test) o.test_acc = evaluate(o.result.head, *data.test, eval_solver(cfg)).acc;
  return o;
}

std::string opt_num(const std::optional<double>& v) { return v ? format_g6(*v) : "NA"; }

// ---- train -------------------------------------------------------------

struct TrainCmd {
  TrainOptions o;
  std::string head = "node";
  bool quiet = false;
};

int cmd_train(TrainCmd& c, const Flags& flags, std::ostream& out) {
  resolve_optimizer(c.o, c.head == "node" ? HeadKind::node : HeadKind::baseline);
  const TrainConfig cfg = make_config(c.o);
  const HeadKind kind = c.head == "node" ? HeadKind::node : HeadKind::baseline;
  Manifest manifest("train", flags, c.o.out, std::to_string(c.o.seed));
  const LoadedData data = load_data(c.o.data);
  out << "data: " << data.description << ", " << data.pool.size() << " samples, d = " << data.pool.dim()
      << "\n";
  EpochCallback cb;
  if (!c.quiet) {
    cb = [&out](const MetricsRecord& m) {
      out << "epoch " << m.epoch << "  train_loss " << format_g6(m.train_loss) << "  train_acc "
          << format_g6(m.train_acc) << "  val_loss " << format_g6(m.val_loss) << "  val_acc "
          << format_g6(m.val_acc) << "  n_feval " << m.n_feval << "\n";
    };
  }
  const RunOutcome r = train_and_save(kind, data, cfg, c.o.out, cb);
  out << "test_acc " << opt_num(r.test_acc) << "\n"
      << "wrote " << (fs::path(c.o.out) / "metrics.csv").string() << "\n";
  manifest.finish("ok");
  return kOk;
}

// ---- compare -----------------------------------------------------------

struct CompareCmd {
  TrainOptions o;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::size_t window = 10;
  std::size_t jobs = 1;
};

struct HeadRun {
  bool ok = false;
  int code = kOk;
  std::string error;
  RunOutcome outcome;
  StabilityReport stability;
  bool insufficient = false;
};

int classify(const std::exception_ptr& e, std::string& message);

// Window shrinks to the run length when it is shorter than the requested
// window; such reports are flagged.
StabilityReport stability_for(const std::vector<MetricsRecord>& m, std::size_t window, bool& insufficient) {
  insufficient = m.size() < window;
  if (!insufficient) return stability_stats(m, window);
  if (m.size() >= 2) return stability_stats(m, m.size());
  StabilityReport r;
  r.window = m.size();
  return r;
}

std::string stability_series_csv(const StabilityReport& r) {
  std::ostringstream os;
  os << "window_start,rolling_std_val_loss,rolling_std_val_acc\n";
  for (std::size_t i = 0; i < r.rolling_std_val_loss.size(); ++i) {
    os << i << ',' << format_g6(r.rolling_std_val_loss[i]) << ',' << format_g6(r.rolling_std_val_acc[i]) << '\n';
  }
  return os.str();
}

int cmd_compare(CompareCmd& c, const Flags& flags, std::ostream& out, std::ostream& err) {
  if (c.seeds.empty()) throw UsageError("--seeds must name at least one seed");
  if (c.window < 2) throw UsageError("--window must be >= 2");
  // Both heads use the optimizer paired with the NODE gradient method.
  resolve_optimizer(c.o, HeadKind::node);
  const TrainConfig base_cfg = make_config(c.o);
  Manifest manifest("compare", flags, c.o.out, format_value(c.seeds));
  const LoadedData data = load_data(c.o.data);
  out << "data: " << data.description << ", " << data.pool.size() << " samples, d = " << data.pool.dim()
      << "\n";

  const HeadKind kinds[2] = {HeadKind::baseline, HeadKind::node};
  const std::size_t n_runs = 2 * c.seeds.size();
  std::vector<HeadRun> runs(n_runs);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n_runs;) {
      const std::uint64_t seed = c.seeds[i / 2];
      const HeadKind kind = kinds[i % 2];
      TrainConfig cfg = base_cfg;
      cfg.seed = seed;
      const fs::path dir = fs::path(c.o.out) / ("seed_" + std::to_string(seed)) / to_string(kind);
      HeadRun& r = runs[i];
      try {
        r.outcome = train_and_save(kind, data, cfg, dir);
        r.stability = stability_for(r.outcome.result.metrics, c.window, r.insufficient);
        write_text(dir / "stability.csv", stability_series_csv(r.stability));
        r.ok = true;
      } catch (...) {
        r.code = classify(std::current_exception(), r.error);
      }
    }
  };
  const std::size_t jobs = std::clamp<std::size_t>(c.jobs, 1, n_runs);
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::ostringstream table;
  table << "seed,head,status,final_train_acc,final_val_acc,test_acc,mean_rolling_std_val_loss,"
           "max_epoch_to_epoch_jump,total_wall_ms,stability_window\n";
  std::ostringstream summary;
  std::size_t node_wins = 0, base_wins = 0, ties = 0, decided = 0, flagged = 0;
  int code = kOk;
  for (std::size_t s = 0; s < c.seeds.size(); ++s) {
    for (std::size_t k = 0; k < 2; ++k) {
      const HeadRun& r = runs[2 * s + k];
      table << c.seeds[s] << ',' << to_string(kinds[k]) << ',';
      if (!r.ok) {
        table << "error,NA,NA,NA,NA,NA,NA,NA\n";
        err << "seed " << c.seeds[s] << " " << to_string(kinds[k]) << ": " << r.error << "\n";
        code = std::max(code, r.code);
        continue;
      }
      const auto& last = r.outcome.result.metrics.back();
      table << "ok," << format_g6(last.train_acc) << ',' << format_g6(last.val_acc) << ','
            << opt_num(r.outcome.test_acc) << ',' << format_g6(r.stability.mean_rolling_std_val_loss) << ','
            << format_g6(r.stability.max_epoch_to_epoch_jump) << ',' << format_g6(r.outcome.total_ms) << ','
            << (r.insufficient ? "insufficient-window" : std::to_string(r.stability.window)) << '\n';
    }
    const HeadRun& b = runs[2 * s];
    const HeadRun& n = runs[2 * s + 1];
    summary << "seed " << c.seeds[s] << ": ";
    if (!b.ok || !n.ok) {
      summary << "failed\n";
      continue;
    }
    if (b.insufficient || n.insufficient) {
      ++flagged;
      summary << "insufficient-window (" << n.outcome.result.metrics.size() << " epochs < window " << c.window
              << "), ";
    } else {
      ++decided;
    }
    const double nb = b.stability.mean_rolling_std_val_loss, nn = n.stability.mean_rolling_std_val_loss;
    const char* verdict = nn < nb ? "node" : (nb < nn ? "baseline" : "tie");
    if (!(b.insufficient || n.insufficient)) {
      if (nn < nb) ++node_wins;
      else if (nb < nn) ++base_wins;
      else ++ties;
    }
    summary << "mean rolling std val_loss baseline " << format_g6(nb) << ", node " << format_g6(nn)
            << ", lower: " << verdict << "\n";
  }
  const bool majority = decided > 0 && 2 * node_wins > c.seeds.size();
  std::ostringstream head;
  head << "seeds: " << format_value(c.seeds) << "\n"
       << "window: " << c.window << "\n"
       << "grad: " << c.o.grad << ", optimizer: " << c.o.optimizer << ", lr: " << format_g6(c.o.lr) << "\n"
       << "node_wins: " << node_wins << " of " << c.seeds.size() << "\n"
       << "baseline_wins: " << base_wins << "\n"
       << "ties: " << ties << "\n"
       << "insufficient_window_seeds: " << flagged << "\n"
       << "node_majority: " << (majority ? "yes" : "no") << "\n";
  if (!majority) {
    head << "FLAG: node head did not have the lower mean rolling std of validation loss in a majority of seeds\n";
  }
  write_text(fs::path(c.o.out) / "compare.csv", table.str());
  write_text(fs::path(c.o.out) / "summary.txt", head.str() + summary.str());
  out << table.str() << "\n" << head.str() << summary.str();
  manifest.finish(code == kOk ? "ok" : "failed");
  return code;
}

// ---- gradcheck ---------------------------------------------------------

struct GradcheckCmd {
  GradcheckOptions g;
  std::string out = default_out("gradcheck");
};

int cmd_gradcheck(GradcheckCmd& c, const Flags& flags, std::ostream& out, std::ostream& err) {
  Manifest manifest("gradcheck", flags, c.out, std::to_string(c.g.seed));
  const GradcheckReport r = gradcheck(c.g);
  std::ostringstream csv;
  csv << "pair,max_abs,max_rel,pass\n";
  out << std::left << std::setw(18) << "pair" << std::setw(14) << "max_abs" << std::setw(14) << "max_rel"
      << "result\n";
  for (const auto& p : r.pairs) {
    csv << p.pair << ',' << fmt17(p.max_abs) << ',' << fmt17(p.max_rel) << ',' << (p.pass ? "pass" : "fail")
        << '\n';
    out << std::left << std::setw(18) << p.pair << std::setw(14) << format_g6(p.max_abs) << std::setw(14)
        << format_g6(p.max_rel) << (p.pass ? "pass" : "FAIL") << "\n";
  }
  write_text(fs::path(c.out) / "gradcheck.csv", csv.str());
  if (!r.pass()) {
    for (const auto& p : r.pairs) {
      if (!p.pass) {
        err << "gradcheck: " << p.pair << " exceeds thresholds (max_abs " << format_g6(p.max_abs)
            << ", max_rel " << format_g6(p.max_rel) << ")\n";
      }
    }
    manifest.finish("threshold-exceeded");
    return kNumericError;
  }
  manifest.finish("ok");
  return kOk;
}

// ---- sweep-tol ---------------------------------------------------------

struct SweepCmd {
  TrainOptions o;
  std::vector<double> tols = {1e-3, 1e-5, 1e-7};
  std::string checkpoint;
  bool train = false;
};

int cmd_sweep(SweepCmd& c, const Flags& flags, std::ostream& out) {
  if (c.tols.empty()) throw UsageError("--tols must list at least one tolerance");
  for (double t : c.tols) {
    if (!(t > 0.0)) throw UsageError("--tols entries must be positive");
  }
  c.o.grad = "adjoint";
  resolve_optimizer(c.o, HeadKind::node);
  c.checkpoint = absolute_or_empty(c.checkpoint);
  const TrainConfig base = make_config(c.o);
  Manifest manifest("sweep-tol", flags, c.o.out, std::to_string(c.o.seed));
  const LoadedData data = load_data(c.o.data);
  const Split split = split_train_val(data.pool, base.val_fraction, sub_seed(base.seed, "split"));

  Head fixed;
  if (!c.train) {
    if (!c.checkpoint.empty()) {
      fixed = load_checkpoint(c.checkpoint);
      if (!std::holds_alternative<NodeHead>(fixed)) throw DataError("sweep-tol needs a NODE checkpoint");
      if (std::get<NodeHead>(fixed).d() != data.pool.dim()) {
        throw DataError("checkpoint dimension does not match the data");
      }
    } else {
      fixed = init_head(HeadKind::node, base, data.pool.dim(), data.pool.class_count);
    }
  }
  std::ostringstream csv;
  csv << "rtol,atol,n_feval,val_acc,wall_ms\n";
  for (double t : c.tols) {
    TrainConfig cfg = base;
    cfg.solver.rtol = t;
    cfg.solver.atol = t;
    const auto start = std::chrono::steady_clock::now();
    std::size_t n_feval = 0;
    double val_acc = 0.0;
    if (c.train) {
      const TrainResult r = train_split(HeadKind::node, split.train, split.val, cfg);
      for (const auto& m : r.metrics) n_feval += m.n_feval;
      val_acc = r.metrics.back().val_acc;
    } else {
      const Evaluation ev = evaluate(fixed, split.val, eval_solver(cfg));
      n_feval = ev.n_feval;
      val_acc = ev.acc;
    }
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    csv << format_g6(t) << ',' << format_g6(t) << ',' << n_feval << ',' << format_g6(val_acc) << ','
        << format_g6(ms) << '\n';
  }
  write_text(fs::path(c.o.out) / "sweep.csv", csv.str());
  out << csv.str();
  manifest.finish("ok");
  return kOk;
}

// ---- bench -------------------------------------------------------------

struct BenchCmd {
  TrainOptions o;
};

int cmd_bench(BenchCmd& c, const Flags& flags, std::ostream& out) {
  c.o.data.data = absolute_or_empty(c.o.data.data);
  c.o.data.test_data = absolute_or_empty(c.o.data.test_data);
  struct Row {
    const char* name;
    HeadKind kind;
    GradMethod grad;
  };
  const Row rows[] = {{"baseline", HeadKind::baseline, GradMethod::discrete},
                      {"discrete", HeadKind::node, GradMethod::discrete},
                      {"adjoint", HeadKind::node, GradMethod::adjoint}};
  std::vector<TrainConfig> cfgs;
  for (const Row& r : rows) {
    TrainOptions o = c.o;
    o.grad = to_string(r.grad);
    if (o.optimizer.empty()) o.optimizer = to_string(default_optimizer(r.kind, r.grad));
    if (o.lr < 0.0) o.lr = o.optimizer == "adam" ? AdamConfig{}.lr : SgdConfig{}.lr;
    cfgs.push_back(make_config(o));
  }
  Manifest manifest("bench", flags, c.o.out, std::to_string(c.o.seed));
  const LoadedData data = load_data(c.o.data);
  const Split split = split_train_val(data.pool, c.o.val_fraction, sub_seed(c.o.seed, "split"));

  std::ostringstream table, epochs;
  table << "config,head,grad,optimizer,epochs,mean_epoch_ms,sum_epoch_ms,total_ms,n_feval\n";
  epochs << "config,epoch,wall_ms\n";
  for (std::size_t i = 0; i < 3; ++i) {
    const auto start = std::chrono::steady_clock::now();
    const TrainResult r = train_split(rows[i].kind, split.train, split.val, cfgs[i]);
    const double total = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    double sum = 0.0;
    std::size_t n_feval = 0;
    for (const auto& m : r.metrics) {
      sum += m.wall_ms;
      n_feval += m.n_feval;
      epochs << rows[i].name << ',' << m.epoch << ',' << format_g6(m.wall_ms) << '\n';
    }
    table << rows[i].name << ',' << to_string(rows[i].kind) << ','
          << (rows[i].kind == HeadKind::node ? to_string(rows[i].grad) : "none") << ','
          << to_string(cfgs[i].optimizer) << ',' << r.metrics.size() << ','
          << format_g6(sum / static_cast<double>(r.metrics.size())) << ',' << format_g6(sum) << ','
          << format_g6(total) << ',' << n_feval << '\n';
  }
  write_text(fs::path(c.o.out) / "bench.csv", table.str());
  write_text(fs::path(c.o.out) / "bench_epochs.csv", epochs.str());
  out << table.str();
  manifest.finish("ok");
  return kOk;
}

// ---- plot --------------------------------------------------------------

struct PlotCmd {
  std::string csv;
  std::string out;
  std::vector<std::string> columns = {std::begin(kMetricColumns), std::end(kMetricColumns)};
};

int cmd_plot(PlotCmd& c, const Flags& flags, std::ostream& out) {
  for (const auto& col : c.columns) {
    if (std::find(std::begin(kMetricColumns), std::end(kMetricColumns), col) == std::end(kMetricColumns)) {
      throw UsageError("unknown metrics column: " + col);
    }
  }
  c.csv = absolute_or_empty(c.csv);
  Manifest manifest("plot", flags, c.out, "none");
  std::ifstream in(c.csv, std::ios::binary);
  if (!in) throw DataError("cannot open " + c.csv);
  const auto metrics = parse_metrics_csv(in);
  for (const auto& col : c.columns) {
    const fs::path path = fs::path(c.out) / (col + ".svg");
    write_text(path, svg_chart(metrics, col));
    out << "wrote " << path.string() << "\n";
  }
  manifest.finish("ok");
  return kOk;
}

// ---- extract -----------------------------------------------------------

struct ExtractCmd {
  DataOptions data;
  std::string out;
  std::string test_out;
};

int cmd_extract(ExtractCmd& c, const Flags& flags, std::ostream& out) {
  c.data.data = absolute_or_empty(c.data.data);
  c.data.test_data = absolute_or_empty(c.data.test_data);
  const fs::path target(c.out);
  Manifest manifest("extract", flags, target.parent_path().empty() ? fs::path(".") : target.parent_path(),
                    std::to_string(c.data.extractor_seed));
  const LoadedData data = load_data(c.data);
  save_feature_file(data.pool, c.out);
  out << "wrote " << c.out << " (" << data.pool.size() << " x " << data.pool.dim() << ")\n";
  if (!c.test_out.empty()) {
    if (!data.test) throw DataError("no test set found to extract");
    save_feature_file(*data.test, c.test_out);
    out << "wrote " << c.test_out << " (" << data.test->size() << " x " << data.test->dim() << ")\n";
  }
  manifest.finish("ok");
  return kOk;
}

// ---- rerun -------------------------------------------------------------

std::vector<std::string> args_from_manifest(const std::string& path, const std::string& out_override) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path);
  std::string line, command;
  std::vector<std::string> flag_args;
  std::size_t lineno = 0;
  bool out_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": expected key=value", lineno);
    }
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "command") {
      command = value;
    } else if (key.rfind("flag.", 0) == 0) {
      std::string name = key.substr(5);
      std::string v = value;
      if (name == "out") {
        out_seen = true;
        if (!out_override.empty()) v = out_override;
      }
      // Empty values are the defaults of string options; "--x=" would
      // swallow the next argument.
      if (!v.empty()) flag_args.push_back("--" + name + "=" + v);
    }
  }
  if (command.empty()) throw FormatError("manifest has no command entry");
  if (!out_seen && !out_override.empty()) flag_args.push_back("--out=" + out_override);
  std::vector<std::string> args = {"nodetl", command};
  args.insert(args.end(), flag_args.begin(), flag_args.end());
  return args;
}

int classify(const std::exception_ptr& e, std::string& message) {
  try {
    std::rethrow_exception(e);
  } catch (const UsageError& x) {
    message = x.what();
    return kUsage;
  } catch (const ContractError& x) {
    message = x.what();
    return kUsage;
  } catch (const NumericError& x) {
    message = x.what();
    return kNumericError;
  } catch (const BudgetError& x) {
    message = x.what();
    return kNumericError;
  } catch (const ThresholdError& x) {
    message = x.what();
    return kNumericError;
  } catch (const FormatError& x) {
    message = x.what();
    return kDataError;
  } catch (const DataError& x) {
    message = x.what();
    return kDataError;
  } catch (const ShapeError& x) {
    message = x.what();
    return kDataError;
  } catch (const IndexError& x) {
    message = x.what();
    return kDataError;
  } catch (const fs::filesystem_error& x) {
    message = x.what();
    return kDataError;
  } catch (const std::exception& x) {
    message = x.what();
    return kNumericError;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Neural-ODE classification heads over frozen features", "nodetl"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  TrainCmd train_c;
  train_c.o.out = default_out("train");
  CLI::App* train_app = app.add_subcommand("train", "train one head and write metrics, checkpoint and manifest");
  Flags train_f(train_app);
  train_f.opt("head", train_c.head, "node or baseline")->check(CLI::IsMember({"node", "baseline"}));
  add_train_flags(train_f, train_c.o);
  train_f.opt("out", train_c.o.out, "output directory");
  train_f.flag("quiet", train_c.quiet, "no per-epoch lines");

  CompareCmd compare_c;
  compare_c.o.out = default_out("compare");
  CLI::App* compare_app = app.add_subcommand("compare", "baseline vs NODE stability over several seeds");
  Flags compare_f(compare_app);
  add_train_flags(compare_f, compare_c.o);
  compare_f.opt("seeds", compare_c.seeds, "comma-separated seeds");
  compare_f.opt("window", compare_c.window, "rolling window in epochs");
  compare_f.opt("jobs", compare_c.jobs, "runs executed concurrently");
  compare_f.opt("out", compare_c.o.out, "output directory");

  GradcheckCmd grad_c;
  CLI::App* grad_app = app.add_subcommand("gradcheck", "compare finite-difference, discrete and adjoint gradients");
  Flags grad_f(grad_app);
  grad_f.opt("d", grad_c.g.d, "feature / state dimension");
  grad_f.opt("width", grad_c.g.width, "dynamics hidden width");
  grad_f.opt("classes", grad_c.g.classes, "output classes");
  grad_f.opt("batch", grad_c.g.batch, "random samples in the loss");
  grad_f.opt("seed", grad_c.g.seed, "seed for the head and the batch");
  grad_f.opt("rtol", grad_c.g.rtol, "adjoint solver relative tolerance");
  grad_f.opt("atol", grad_c.g.atol, "adjoint solver absolute tolerance");
  grad_f.opt("scale", grad_c.g.scale, "dynamics initialization scale (0 gives zero dynamics)");
  grad_f.opt("n-steps", grad_c.g.n_steps, "RK4 steps for the discrete gradient and finite differences");
  grad_f.opt("fd-step", grad_c.g.fd_step, "central difference step");
  grad_f.opt("rel-threshold", grad_c.g.rel_threshold, "relative agreement threshold");
  grad_f.opt("abs-threshold", grad_c.g.abs_threshold, "absolute agreement threshold");
  grad_f.opt("out", grad_c.out, "output directory");

  SweepCmd sweep_c;
  sweep_c.o.out = default_out("sweep-tol");
  CLI::App* sweep_app = app.add_subcommand("sweep-tol", "accuracy and cost across solver tolerances");
  Flags sweep_f(sweep_app);
  add_train_flags(sweep_f, sweep_c.o);
  sweep_f.opt("tols", sweep_c.tols, "comma-separated tolerances, used for both rtol and atol");
  sweep_f.opt("checkpoint", sweep_c.checkpoint, "NODE checkpoint to evaluate (default: seeded init)");
  sweep_f.flag("train", sweep_c.train, "train an adjoint NODE head at each tolerance instead of evaluating");
  sweep_f.opt("out", sweep_c.o.out, "output directory");

  BenchCmd bench_c;
  bench_c.o.out = default_out("bench");
  bench_c.o.epochs = 3;
  CLI::App* bench_app = app.add_subcommand("bench", "wall time of baseline, discrete NODE and adjoint NODE training");
  Flags bench_f(bench_app);
  add_train_flags(bench_f, bench_c.o);
  bench_f.opt("out", bench_c.o.out, "output directory");

  PlotCmd plot_c;
  CLI::App* plot_app = app.add_subcommand("plot", "SVG charts from a metrics CSV");
  Flags plot_f(plot_app);
  plot_f.opt("csv", plot_c.csv, "metrics CSV")->required();
  plot_f.opt("out", plot_c.out, "output directory")->required();
  plot_f.opt("columns", plot_c.columns, "comma-separated metric columns");

  ExtractCmd extract_c;
  CLI::App* extract_app = app.add_subcommand("extract", "run the frozen extractor and write a feature file");
  Flags extract_f(extract_app);
  add_data_flags(extract_f, extract_c.data);
  extract_f.opt("out", extract_c.out, "feature file for the training pool")->required();
  extract_f.opt("test-out", extract_c.test_out, "feature file for the test set");

  std::string manifest_path, rerun_out;
  CLI::App* rerun_app = app.add_subcommand("rerun", "repeat a run from its manifest.txt");
  rerun_app->add_option("--manifest", manifest_path, "manifest.txt of an earlier run")->required();
  rerun_app->add_option("--out", rerun_out, "write to this directory instead of the original one");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  std::string message;
  try {
    if (app.got_subcommand(train_app)) return cmd_train(train_c, train_f, out);
    if (app.got_subcommand(compare_app)) return cmd_compare(compare_c, compare_f, out, err);
    if (app.got_subcommand(grad_app)) return cmd_gradcheck(grad_c, grad_f, out, err);
    if (app.got_subcommand(sweep_app)) return cmd_sweep(sweep_c, sweep_f, out);
    if (app.got_subcommand(bench_app)) return cmd_bench(bench_c, bench_f, out);
    if (app.got_subcommand(plot_app)) return cmd_plot(plot_c, plot_f, out);
    if (app.got_subcommand(extract_app)) return cmd_extract(extract_c, extract_f, out);
    if (app.got_subcommand(rerun_app)) return run(args_from_manifest(manifest_path, rerun_out), out, err);
  } catch (...) {
    const int code = classify(std::current_exception(), message);
    err << "error: " << message << "\n";
    return code;
  }
  return kUsage;
}

}  // namespace nodetl::cli
