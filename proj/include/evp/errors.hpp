#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace evp {

enum class ErrorKind {
  kInvalidGeometry,
  kInvalidInput,
  kComposition,
  kShape,
  kConfig,
  kNumeric,
  kInvalidDataset,
  kCapacity,
  kIo,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Context attached to a non-finite loss or update.
struct NumericDiagnostic {
  std::string stage;
  double value = 0.0;
  std::size_t nonfinite_count = 0;
  double max_abs_finite = 0.0;
  int label = -1;
};

class NumericError : public Error {
 public:
  explicit NumericError(NumericDiagnostic diagnostic);
  const NumericDiagnostic& diagnostic() const noexcept { return diagnostic_; }

 private:
  NumericDiagnostic diagnostic_;
};

}  // namespace evp
