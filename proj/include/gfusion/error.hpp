#pragma once

#include <stdexcept>
#include <string>

namespace gfusion {

/// Root of every error the library throws. `exit_code()` is what the CLI
/// returns when the error escapes a command: 1 for usage, 2 for data/numeric.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 2; }
};

class UsageError : public Error {
  public:
    using Error::Error;
    int exit_code() const noexcept override { return 1; }
};

class IoError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class CorruptionError : public Error { using Error::Error; };
class DataError : public Error { using Error::Error; };
class ParseError : public Error { using Error::Error; };
class ShapeError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class DomainError : public Error { using Error::Error; };
class DeterminismError : public Error { using Error::Error; };

class ReferenceError : public Error {
  public:
    ReferenceError(const std::string& what, std::size_t line)
        : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
    std::size_t line() const noexcept { return line_; }

  private:
    std::size_t line_;
};

} // namespace gfusion
