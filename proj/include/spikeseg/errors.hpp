// spikeseg/errors.hpp
#pragma once

#include <stdexcept>
#include <string>

namespace spikeseg {

// Violated preconditions: empty references, non-scalar losses, bad
// lengths. The CLI maps these (and UsageError) to exit code 2.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class UsageError : public ContractError {
 public:
  using ContractError::ContractError;
};

class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Non-finite inputs or neuron state.
class NumericDomainError : public ContractError {
 public:
  using ContractError::ContractError;
};

// fixed_points() on a dynamics with a == 0.
class DegenerateDynamicsError : public ContractError {
 public:
  using ContractError::ContractError;
};

// scale_currents() on an all-zero current sequence.
class DegenerateInputError : public ContractError {
 public:
  using ContractError::ContractError;
};

// CTC target cannot be aligned to the given number of frames.
class InfeasibleAlignmentError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Decoder called with no fired states to attend to.
class DecodeContextError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Utterance shorter than the frontend's down-sampling factor.
class TooShortError : public ContractError {
 public:
  using ContractError::ContractError;
};

class ConfigError : public ContractError {
 public:
  using ContractError::ContractError;
};

// Missing or unreadable files. Exit code 1 in the CLI.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace spikeseg
