#pragma once

#include <stdexcept>
#include <string>

namespace precofact {

// Every failure raised by the engine carries a short machine-readable
// category (e.g. "dimension", "truncated-record") next to the human detail.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& detail)
        : std::runtime_error(detail), category_(std::move(category)) {}

    const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& detail) : Error("dimension", detail) {}
};

class InvalidMaskError : public Error {
public:
    explicit InvalidMaskError(const std::string& detail) : Error("invalid-mask", detail) {}
};

class InvalidInputError : public Error {
public:
    explicit InvalidInputError(const std::string& detail) : Error("invalid-input", detail) {}
};

class ContractError : public Error {
public:
    explicit ContractError(const std::string& detail) : Error("contract", detail) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& detail) : Error("non-finite", detail) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& detail) : Error("config", detail) {}
};

class JoinError : public Error {
public:
    explicit JoinError(const std::string& detail) : Error("join", detail) {}
};

// File-format problems. The category names the defect: bad-magic,
// bad-version, truncated-record, width-mismatch, token-count, bad-label,
// non-finite-value, checksum, trailing-bytes, io.
class FormatError : public Error {
public:
    FormatError(std::string category, const std::string& detail)
        : Error(std::move(category), detail) {}
};

} // namespace precofact
