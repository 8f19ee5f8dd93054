// Error taxonomy shared by all modules: usage errors for caller mistakes,
// state errors for out-of-order calls, integrity errors for corrupted or
// inconsistent data.
#pragma once

#include <stdexcept>
#include <string>

namespace sage {

class UsageError : public std::invalid_argument {
public:
    explicit UsageError(const std::string& msg) : std::invalid_argument(msg) {}
};

class StateError : public std::logic_error {
public:
    explicit StateError(const std::string& msg) : std::logic_error(msg) {}
};

class IntegrityError : public std::runtime_error {
public:
    explicit IntegrityError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace sage
