#pragma once

#include <stdexcept>
#include <string>

namespace trialmatch {

// Maps one-to-one onto the CLI exit codes: usage=1, data=2, runtime=3.
enum class ErrorKind { usage = 1, data = 2, runtime = 3 };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

/// Invalid configuration or arguments (bad chunk overlap, k = 0, ...).
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

/// Malformed or inconsistent input data (parse errors, dangling ids, shape mismatches).
class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

/// A quantity that is mathematically undefined for the given input,
/// e.g. zero-variance PCA or AUROC over a single class.
class UndefinedError : public Error {
public:
    explicit UndefinedError(const std::string& what) : Error(ErrorKind::data, what) {}
};

/// Failures talking to an embedding service. Subclasses are surfaced distinctly.
class ProviderError : public Error {
public:
    explicit ProviderError(const std::string& what) : Error(ErrorKind::runtime, what) {}
};

class TransportError : public ProviderError {
public:
    using ProviderError::ProviderError;
};

class TimeoutError : public TransportError {
public:
    using TransportError::TransportError;
};

class HttpStatusError : public ProviderError {
public:
    HttpStatusError(int status, const std::string& what) : ProviderError(what), status_(status) {}
    int status() const noexcept { return status_; }

private:
    int status_;
};

class MalformedResponseError : public ProviderError {
public:
    using ProviderError::ProviderError;
};

class DimensionMismatchError : public ProviderError {
public:
    using ProviderError::ProviderError;
};

}  // namespace trialmatch
