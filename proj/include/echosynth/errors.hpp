#pragma once

#include <stdexcept>
#include <string>

namespace echosynth {

// Process exit code the CLI maps each error category to.
enum class ErrorKind { config = 1, data = 2, numeric = 3 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string code, const std::string& message)
        : std::runtime_error(code + ": " + message), kind_(kind), code_(std::move(code)) {}

    ErrorKind kind() const noexcept { return kind_; }
    const std::string& code() const noexcept { return code_; }

private:
    ErrorKind kind_;
    std::string code_;
};

#define ECHOSYNTH_DEFINE_ERROR(NAME, KIND)                        \
    class NAME : public Error {                                   \
    public:                                                       \
        explicit NAME(const std::string& message)                 \
            : Error(ErrorKind::KIND, #NAME, message) {}           \
    };

ECHOSYNTH_DEFINE_ERROR(ConfigError, config)
ECHOSYNTH_DEFINE_ERROR(InvalidConfig, config)
ECHOSYNTH_DEFINE_ERROR(InvalidSpec, config)
ECHOSYNTH_DEFINE_ERROR(InvalidScheduleParams, config)
ECHOSYNTH_DEFINE_ERROR(IncompatibleArchitecture, config)
ECHOSYNTH_DEFINE_ERROR(BranchMismatch, config)

ECHOSYNTH_DEFINE_ERROR(VideoTooShort, data)
ECHOSYNTH_DEFINE_ERROR(OutOfBounds, data)
ECHOSYNTH_DEFINE_ERROR(ParseError, data)
ECHOSYNTH_DEFINE_ERROR(SplitOverlap, data)
ECHOSYNTH_DEFINE_ERROR(ShapeMismatch, data)
ECHOSYNTH_DEFINE_ERROR(StepOutOfRange, data)
ECHOSYNTH_DEFINE_ERROR(DataEmpty, data)
ECHOSYNTH_DEFINE_ERROR(LengthMismatch, data)
ECHOSYNTH_DEFINE_ERROR(DegenerateTargets, data)
ECHOSYNTH_DEFINE_ERROR(TooFewSamples, data)
ECHOSYNTH_DEFINE_ERROR(DimensionMismatch, data)
ECHOSYNTH_DEFINE_ERROR(MissingSelection, data)
ECHOSYNTH_DEFINE_ERROR(MissingArtifact, data)

ECHOSYNTH_DEFINE_ERROR(NonFiniteLoss, numeric)
ECHOSYNTH_DEFINE_ERROR(NotPSD, numeric)

#undef ECHOSYNTH_DEFINE_ERROR

}  // namespace echosynth
