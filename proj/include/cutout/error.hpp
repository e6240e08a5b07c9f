#pragma once

#include <stdexcept>
#include <string>

namespace cutout {

// Every failure raised by the library derives from Error so callers can
// catch one type at the boundary (the CLI maps these onto exit codes).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IndexError : public Error { using Error::Error; };
class ShapeError : public Error { using Error::Error; };
class ArgumentError : public Error { using Error::Error; };
class EmptyBatchError : public Error { using Error::Error; };

// Parser failures.
class FormatError : public Error { using Error::Error; };
class TruncatedFileError : public Error { using Error::Error; };
class CorruptRecordError : public Error { using Error::Error; };
class PairingError : public Error { using Error::Error; };

class EmptyDatasetError : public Error { using Error::Error; };
class DegenerateChannelError : public Error { using Error::Error; };

// Raised by apply_chain; names the failing stage.
class ChainError : public Error {
public:
    ChainError(std::size_t stage, const std::string& stage_name, const std::string& what)
        : Error("stage " + std::to_string(stage) + " (" + stage_name + "): " + what),
          stage_(stage), stage_name_(stage_name) {}

    std::size_t stage() const noexcept { return stage_; }
    const std::string& stage_name() const noexcept { return stage_name_; }

private:
    std::size_t stage_;
    std::string stage_name_;
};

// Non-finite loss or activations during training.
class NumericError : public Error {
public:
    NumericError(const std::string& what, int epoch = -1)
        : Error(what), epoch_(epoch) {}
    int epoch() const noexcept { return epoch_; }

private:
    int epoch_;
};

} // namespace cutout
