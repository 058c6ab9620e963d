#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace chprune {

enum class ErrorCode {
  ShapeMismatch,
  MissingAttribute,
  NonPositiveExtent,
  CycleDetected,
  InvalidGraph,
  ParseError,
  UnknownModel,
  InconsistentWidths,
  LengthMismatch,
  UnknownKind,
  ZeroTotal,
  MissingWeights,
  StaleTape,
  NonFiniteGradient,
  NonFiniteValue,
  UnsupportedOperator,
  ScheduleUnresolved,
  EmptySchedule,
  LabelOutOfRange,
  EmptyNetwork,
  NoFoldTarget,
  ShapeDrift,
  CheckpointWriteFailure,
  CheckpointReadFailure,
  EmptyDataset,
  InvalidConfig,
  CorruptFile,
  MissingFile,
  IoFailure,
};

std::string_view to_string(ErrorCode code);

// Every module reports failures through this exception; `code()` lets callers
// and tests dispatch on the failure class without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace chprune
