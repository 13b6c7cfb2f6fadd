#pragma once

#include <stdexcept>
#include <string>

namespace vcdm {

enum class ErrorKind {
    kInvalidArgument,
    kNumericFailure,
    kBackendUnavailable,
    kNotReady,
    kConfiguration,
    kCacheCorrupt,
    kIncompatibleCheckpoint,
    kDegenerateCodebook,
    kIo,
};

const char* to_string(ErrorKind kind);

// Base for every error raised by the library. The kind lets the CLI map
// failures onto exit codes without string matching.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class InvalidArgument : public Error {
public:
    explicit InvalidArgument(const std::string& what) : Error(ErrorKind::kInvalidArgument, what) {}
};

// Non-finite values inside a loss or sampling trajectory. Carries the noise
// level and step where it happened when known (negative otherwise).
class NumericFailure : public Error {
public:
    NumericFailure(const std::string& what, double sigma = -1.0, long step = -1);

    double sigma() const noexcept { return sigma_; }
    long step() const noexcept { return step_; }

private:
    double sigma_;
    long step_;
};

class BackendUnavailable : public Error {
public:
    explicit BackendUnavailable(const std::string& what) : Error(ErrorKind::kBackendUnavailable, what) {}
};

class NotReady : public Error {
public:
    explicit NotReady(const std::string& what) : Error(ErrorKind::kNotReady, what) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorKind::kConfiguration, what) {}
};

class CacheCorrupt : public Error {
public:
    explicit CacheCorrupt(const std::string& what) : Error(ErrorKind::kCacheCorrupt, what) {}
};

class IncompatibleCheckpoint : public Error {
public:
    explicit IncompatibleCheckpoint(const std::string& what)
        : Error(ErrorKind::kIncompatibleCheckpoint, what) {}
};

class DegenerateCodebook : public Error {
public:
    explicit DegenerateCodebook(const std::string& what) : Error(ErrorKind::kDegenerateCodebook, what) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(ErrorKind::kIo, what) {}
};

}  // namespace vcdm
