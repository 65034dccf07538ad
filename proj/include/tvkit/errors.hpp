#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace tvkit {

// Bad shapes, mismatched block inventories, invalid hyperparameters.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid configuration or unusable input files.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed serialized data; carries the byte offset of the defect.
struct FormatError : std::runtime_error {
    FormatError(const std::string& what, std::uint64_t offset)
        : std::runtime_error(what + " (byte " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
    std::uint64_t byte_offset;
};

// Non-finite values or numeric breakdown during evaluation/training.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Violations of an experiment protocol (leakage, stale task vectors, ...).
struct ProtocolError : std::runtime_error {
    explicit ProtocolError(const std::string& what) : std::runtime_error(what) {}
};

// Composing a task vector against a base model it was not derived from.
struct StaleTaskVectorError : ProtocolError {
    explicit StaleTaskVectorError(const std::string& what) : ProtocolError(what) {}
};

}  // namespace tvkit
