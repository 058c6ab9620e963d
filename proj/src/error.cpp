#include "chprune/error.hpp"

namespace chprune {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::MissingAttribute: return "MissingAttribute";
    case ErrorCode::NonPositiveExtent: return "NonPositiveExtent";
    case ErrorCode::CycleDetected: return "CycleDetected";
    case ErrorCode::InvalidGraph: return "InvalidGraph";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::UnknownModel: return "UnknownModel";
    case ErrorCode::InconsistentWidths: return "InconsistentWidths";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::UnknownKind: return "UnknownKind";
    case ErrorCode::ZeroTotal: return "ZeroTotal";
    case ErrorCode::MissingWeights: return "MissingWeights";
    case ErrorCode::StaleTape: return "StaleTape";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::UnsupportedOperator: return "UnsupportedOperator";
    case ErrorCode::ScheduleUnresolved: return "ScheduleUnresolved";
    case ErrorCode::EmptySchedule: return "EmptySchedule";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::EmptyNetwork: return "EmptyNetwork";
    case ErrorCode::NoFoldTarget: return "NoFoldTarget";
    case ErrorCode::ShapeDrift: return "ShapeDrift";
    case ErrorCode::CheckpointWriteFailure: return "CheckpointWriteFailure";
    case ErrorCode::CheckpointReadFailure: return "CheckpointReadFailure";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::IoFailure: return "IoFailure";
  }
  return "Unknown";
}

}  // namespace chprune
