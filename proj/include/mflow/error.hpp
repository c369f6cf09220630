#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mflow {

enum class ErrorKind {
  InvalidParams,
  DegenerateRadius,
  OutOfCanvas,
  EmptyFluid,
  ExhaustedRetries,
  NotConverged,
  NoThroughPath,
  UnstableTimestep,
  ShapeMismatch,
  CheckerboardRisk,
  NotScalar,
  InvalidSpec,
  CorruptCheckpoint,
  NonFiniteLoss,
  ZeroReference,
  CorruptContainer,
  TooFewSamples,
  IoFailure,
  NonFiniteValues,
};

std::string_view to_string(ErrorKind kind);

// Every failure in the library surfaces as an Error carrying its kind, so
// callers (tests, the CLI) can branch on the category instead of the text.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace mflow
