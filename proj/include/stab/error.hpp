#pragma once

#include <stdexcept>
#include <string>

namespace stab {

enum class ErrorKind {
    invalid_input,
    out_of_range,
    training_failure,
    degenerate_attack,
};

/// Base class for every error raised by the toolkit. The kind drives CLI exit codes.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class InvalidInput : public Error {
public:
    explicit InvalidInput(const std::string& what) : Error(ErrorKind::invalid_input, what) {}
};

/// A vector has a component outside the range of a PSD metric.
class OutOfRange : public Error {
public:
    explicit OutOfRange(const std::string& what) : Error(ErrorKind::out_of_range, what) {}
};

class TrainingFailure : public Error {
public:
    explicit TrainingFailure(const std::string& what) : Error(ErrorKind::training_failure, what) {}
};

class DegenerateAttack : public Error {
public:
    explicit DegenerateAttack(const std::string& what) : Error(ErrorKind::degenerate_attack, what) {}
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw InvalidInput(what);
}

} // namespace stab
