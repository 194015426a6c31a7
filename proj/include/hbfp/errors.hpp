#pragma once

#include <stdexcept>
#include <string>

namespace hbfp {

// Exit-code mapping used by the CLI: config=1, io=2, contract=3, numeric=4.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct ContractError : Error {
  using Error::Error;
};

// Shape mismatches are contract violations; kept separate so messages can
// name both offending shapes.
struct ShapeError : ContractError {
  using ContractError::ContractError;
};

struct NumericError : Error {
  using Error::Error;
};

}  // namespace hbfp
