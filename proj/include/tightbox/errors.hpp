#pragma once

#include <stdexcept>
#include <string>

namespace tightbox {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A box violates x_min < x_max, y_min < y_max (or is non-finite).
class DegenerateBox : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

  /// 1-based line number, 0 when the error is not tied to a line.
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class InsufficientData : public Error {
 public:
  using Error::Error;
};

class UnsupportedBackbone : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class SizeMismatch : public Error {
 public:
  using Error::Error;
};

class EmptyDataset : public Error {
 public:
  using Error::Error;
};

class EmptyInput : public Error {
 public:
  using Error::Error;
};

class MissingPrelabels : public Error {
 public:
  using Error::Error;
};

class MissingFrame : public Error {
 public:
  using Error::Error;
};

/// A configuration file or value is malformed or out of range.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace tightbox
