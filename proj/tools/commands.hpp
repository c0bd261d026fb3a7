#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "nodetl/nodetl.hpp"

namespace nodetl::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kDataError = 2,
  kNumericError = 3,
};

// Runs the tool with argv-style arguments (args[0] is the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// --data accepts a CIFAR-10 binary directory (data_batch_*.bin, optional
// test_batch.bin), a single CIFAR-10 .bin file, or a feature file.
struct DataOptions {
  std::string data;
  std::string test_data;
  std::size_t feature_dim = 64;
  std::uint64_t extractor_seed = 0;
  std::size_t limit = 0;       // 0 keeps every training record
  std::size_t test_limit = 0;
};

struct LoadedData {
  Dataset pool;
  std::optional<Dataset> test;
  std::string description;
};

LoadedData load_data(const DataOptions& opt);

struct GradcheckOptions {
  std::size_t d = 4;
  std::size_t width = 8;
  std::size_t classes = 3;
  std::size_t batch = 4;
  std::uint64_t seed = 0;
  double rtol = 1e-8;
  double atol = 1e-8;
  double scale = 1.0;
  std::size_t n_steps = 2000;
  double fd_step = 1e-5;
  double rel_threshold = 1e-4;
  double abs_threshold = 1e-6;
};

struct PairDeviation {
  std::string pair;  // e.g. "fd-adjoint"
  double max_abs = 0.0;
  double max_rel = 0.0;
  bool pass = true;
};

struct GradcheckReport {
  std::vector<PairDeviation> pairs;  // fd-discrete, fd-adjoint, discrete-adjoint
  bool pass() const {
    for (const auto& p : pairs)
      if (!p.pass) return false;
    return true;
  }
};

// Random NODE head and batch; finite differences, discrete reverse mode and
// the adjoint are compared on every head parameter. A component passes when
// |a - b| <= max(rel_threshold * max(|a|, |b|), abs_threshold).
GradcheckReport gradcheck(const GradcheckOptions& opt);

// SVG line chart of one metric column against epoch.
std::string svg_chart(const std::vector<MetricsRecord>& metrics, const std::string& column);

inline constexpr const char* kMetricColumns[] = {"train_loss", "train_acc", "val_loss",
                                                  "val_acc",    "wall_ms",   "n_feval"};

}  // namespace nodetl::cli
