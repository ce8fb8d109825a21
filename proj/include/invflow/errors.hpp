#pragma once

#include <stdexcept>
#include <string>

namespace invflow {

/// Shape or channel-count mismatch between operands.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed external data (IDX/CIFAR/checkpoint files).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Operation invoked before required initialization.
struct StateError : std::runtime_error {
    explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dense-oracle size guard exceeded.
struct CapacityError : std::runtime_error {
    explicit CapacityError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Matrix numerically singular where an inverse is required.
struct SingularError : std::runtime_error {
    explicit SingularError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid argument value (empty batch, non-finite input, bad step count).
struct ArgumentError : std::runtime_error {
    explicit ArgumentError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace invflow
