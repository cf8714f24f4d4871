#pragma once

#include <stdexcept>
#include <string>

namespace fourdgs {

// Thrown when an argument violates an operation precondition.
class InvalidInput : public std::runtime_error {
public:
    explicit InvalidInput(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a covariance is singular or numerically unusable.
class DegenerateCovariance : public std::runtime_error {
public:
    explicit DegenerateCovariance(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when a binary file has a bad magic/version or malformed layout.
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when stored data violates a type invariant.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Thrown when an API is called outside its documented mode.
class ContractViolation : public std::runtime_error {
public:
    explicit ContractViolation(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fourdgs
