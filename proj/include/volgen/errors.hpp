#pragma once

#include <stdexcept>
#include <string>

namespace volgen {

// Base class for everything this library throws.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user input: config files, CLI flags, malformed volumes.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error(msg) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// Non-finite loss during optimization. Carries the step and the term name.
class DivergenceError : public Error {
public:
    DivergenceError(long long step, const std::string& term)
        : Error("non-finite loss at step " + std::to_string(step) + " in term " + term),
          step(step),
          term(term) {}
    long long step;
    std::string term;
};

}  // namespace volgen
