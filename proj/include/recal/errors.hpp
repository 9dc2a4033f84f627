#pragma once

#include <stdexcept>
#include <string>

namespace recal {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Malformed text input (map files, cycle CSVs, config files). Carries
// line/field context in the message.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value or missing required key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Grid/axis/length mismatches between values that must agree structurally.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A numeric quantity left the finite domain; the message names the field.
class NumericalFault : public Error {
 public:
  using Error::Error;
};

// A cross-module contract was violated (e.g. policy normalization does not
// cover the map axes).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Unknown name in a keyed lookup (calibration variables, cycle registry).
class LookupError : public Error {
 public:
  using Error::Error;
};

// Fixed-point iteration failed to converge; message carries residuals.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

// Wire-format violations: bad tag, malformed payload.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// Incomplete or oversized frame on the transport.
class FramingError : public Error {
 public:
  using Error::Error;
};

}  // namespace recal
