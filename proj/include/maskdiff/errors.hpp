#pragma once

#include <stdexcept>
#include <string>

namespace maskdiff {

// Exit-code contract for the CLI: config/usage -> 2, data -> 3, numeric -> 4.
// Contract violations on in-process calls throw std::domain_error directly.

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// State space too large to enumerate or tabulate.
struct CapacityError : ConfigError {
    explicit CapacityError(const std::string& what) : ConfigError(what) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace maskdiff
