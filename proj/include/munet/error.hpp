#pragma once

#include <stdexcept>
#include <string>

namespace munet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed text input (OBJ, PGM/PFM headers, config). Carries the 1-based line when known.
class ParseError : public Error {
public:
  ParseError(const std::string& what, int line = 0)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  int line() const { return line_; }

private:
  int line_;
};

/// Topology that violates a structural precondition (index out of range, boundary edge, ...).
class StructuralError : public Error {
public:
  using Error::Error;
};

/// Geometry that makes a quantity undefined (zero-area normals, collinear point sets).
class DegenerateGeometryError : public Error {
public:
  using Error::Error;
};

/// Operand widths or counts that do not line up.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// Non-finite values, failed gradient checks.
class NumericalError : public Error {
public:
  using Error::Error;
};

/// Filesystem and stream failures.
class IoError : public Error {
public:
  using Error::Error;
};

/// Invalid configuration key or value. `key()` names the offending key.
class ConfigError : public Error {
public:
  ConfigError(const std::string& key, const std::string& what)
      : Error(key + ": " + what), key_(key) {}
  const std::string& key() const { return key_; }

private:
  std::string key_;
};

} // namespace munet
