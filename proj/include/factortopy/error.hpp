// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace factortopy {

/// Caller supplied something the operation cannot accept (bad shape, bad
/// flag, precondition violated). The CLI maps it to exit code 1.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// On-disk data is missing, truncated, or does not match its manifest.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Numerical failure during training or evaluation (non-finite loss, etc).
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace factortopy
