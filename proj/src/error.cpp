#include "mflow/error.hpp"

namespace mflow {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidParams: return "InvalidParams";
    case ErrorKind::DegenerateRadius: return "DegenerateRadius";
    case ErrorKind::OutOfCanvas: return "OutOfCanvas";
    case ErrorKind::EmptyFluid: return "EmptyFluid";
    case ErrorKind::ExhaustedRetries: return "ExhaustedRetries";
    case ErrorKind::NotConverged: return "NotConverged";
    case ErrorKind::NoThroughPath: return "NoThroughPath";
    case ErrorKind::UnstableTimestep: return "UnstableTimestep";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::CheckerboardRisk: return "CheckerboardRisk";
    case ErrorKind::NotScalar: return "NotScalar";
    case ErrorKind::InvalidSpec: return "InvalidSpec";
    case ErrorKind::CorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::ZeroReference: return "ZeroReference";
    case ErrorKind::CorruptContainer: return "CorruptContainer";
    case ErrorKind::TooFewSamples: return "TooFewSamples";
    case ErrorKind::IoFailure: return "IoFailure";
    case ErrorKind::NonFiniteValues: return "NonFiniteValues";
  }
  return "Unknown";
}

}  // namespace mflow
