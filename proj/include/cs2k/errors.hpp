#pragma once

#include <stdexcept>
#include <string>

namespace cs2k {

// Invalid configuration: bad spec, shape mismatch, layout mismatch, missing
// history. The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Invalid data handed to an operation (label out of range, c == c').
class InputError : public std::runtime_error {
public:
    explicit InputError(const std::string& what) : std::runtime_error(what) {}
};

// Corrupt or unreadable file.
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

} // namespace cs2k
