#pragma once

#include <stdexcept>
#include <string>

namespace vag {

// Error taxonomy used across the library. Everything derives from Error so
// callers can catch the whole family or a specific kind.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape disagreement between tensors (messages name both shapes).
struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Non-finite values or domain violations in numeric kernels.
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// A caller broke an API precondition.
struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(msg) {}
};

// Token id outside the vocabulary / embedding table.
struct OovError : Error {
    explicit OovError(const std::string& msg) : Error(msg) {}
};

// Task sequencing violated (e.g. tasks trained out of order).
struct ProtocolError : Error {
    explicit ProtocolError(const std::string& msg) : Error(msg) {}
};

// Invalid experiment configuration or config file.
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

}  // namespace vag
