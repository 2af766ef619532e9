#pragma once

#include <stdexcept>
#include <string>

namespace pdedisc {

/// Raised when a time-stepping or training loop produces non-finite values.
/// Carries the step index at which the blowup was detected (-1 if unknown).
class BlowupError : public std::runtime_error {
public:
    explicit BlowupError(const std::string& msg, long step = -1)
        : std::runtime_error(msg), step_(step) {}

    long step() const { return step_; }

private:
    long step_;
};

/// Raised when an operation is asked to run on a model configuration it
/// does not support (e.g. symbolic readout of free k x k filters).
class UnsupportedConfig : public std::runtime_error {
public:
    explicit UnsupportedConfig(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace pdedisc
