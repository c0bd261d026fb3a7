#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace nodetl {

// Shape or dimension mismatch between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// A documented precondition of an operation was violated by the caller.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Non-finite values appeared during integration. Carries the time reached.
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, double t) : std::runtime_error(what), t_(t) {}
  double time() const noexcept { return t_; }

 private:
  double t_;
};

// Adaptive solver ran out of its step budget before reaching the end time.
class BudgetError : public std::runtime_error {
 public:
  BudgetError(const std::string& what, double t) : std::runtime_error(what), t_(t) {}
  double time() const noexcept { return t_; }

 private:
  double t_;
};

// Malformed file contents: bad magic, version, length or truncation.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset = 0)
      : std::runtime_error(what), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

// Well-formed file with values outside their domain (e.g. a label byte > 9).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace nodetl
