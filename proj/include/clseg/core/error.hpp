#pragma once

#include <stdexcept>
#include <string>

namespace clseg {

enum class ErrorCode {
    MalformedHeader,
    PayloadSizeMismatch,
    NonFiniteVoxel,
    InvalidMaskValue,
    TooFewCases,
    ShapeTooSmall,
    IncompatiblePatchSize,
    BadInputShape,
    DimMismatch,
    ShapeMismatch,
    EmptyDataset,
    NoAnchor,
    NoPreviousModel,
    NonFiniteLoss,
    UnknownGroup,
    UndefinedMetric,
    OutOfRange,
    NoViTComponent,
    IncompleteGrid,
    ConfigInvalid,
    RunNotFound,
    IoError,
};

inline const char* error_code_name(ErrorCode c) {
    switch (c) {
        case ErrorCode::MalformedHeader: return "MalformedHeader";
        case ErrorCode::PayloadSizeMismatch: return "PayloadSizeMismatch";
        case ErrorCode::NonFiniteVoxel: return "NonFiniteVoxel";
        case ErrorCode::InvalidMaskValue: return "InvalidMaskValue";
        case ErrorCode::TooFewCases: return "TooFewCases";
        case ErrorCode::ShapeTooSmall: return "ShapeTooSmall";
        case ErrorCode::IncompatiblePatchSize: return "IncompatiblePatchSize";
        case ErrorCode::BadInputShape: return "BadInputShape";
        case ErrorCode::DimMismatch: return "DimMismatch";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::EmptyDataset: return "EmptyDataset";
        case ErrorCode::NoAnchor: return "NoAnchor";
        case ErrorCode::NoPreviousModel: return "NoPreviousModel";
        case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorCode::UnknownGroup: return "UnknownGroup";
        case ErrorCode::UndefinedMetric: return "UndefinedMetric";
        case ErrorCode::OutOfRange: return "OutOfRange";
        case ErrorCode::NoViTComponent: return "NoViTComponent";
        case ErrorCode::IncompleteGrid: return "IncompleteGrid";
        case ErrorCode::ConfigInvalid: return "ConfigInvalid";
        case ErrorCode::RunNotFound: return "RunNotFound";
        case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

/// Exception type carrying a stable error code alongside the message.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

}  // namespace clseg

#define CLSEG_CHECK(cond, code, msg)                \
    do {                                            \
        if (!(cond)) ::clseg::raise((code), (msg)); \
    } while (0)
