#pragma once

#include <stdexcept>
#include <string>

namespace clu {

// Every failure raised by the core derives from Error so the C boundary can
// translate it to a status code with one catch.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

// Non-finite loss during optimization. Carries where it happened.
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, std::size_t step)
        : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

// A protocol run finished but one of its hard invariants did not hold.
class AcceptanceError : public Error {
public:
    using Error::Error;
};

}  // namespace clu
