#pragma once

#include <stdexcept>
#include <string>

namespace dynn {

// Violated precondition on shapes, lengths or ranges.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain of a formula (non-positive
// bandwidth, distance, frequency...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Non-finite value produced during evaluation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

}  // namespace detail
}  // namespace dynn
