#pragma once

#include <stdexcept>
#include <string>

namespace spillover {

/// Malformed or missing input (files, CSV rows, configuration). Maps to CLI exit code 2.
class InputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A numerical routine could not produce a usable value (degenerate chain,
/// overflow, non-positive variance). Maps to CLI exit code 3.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace spillover
