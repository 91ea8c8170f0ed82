#pragma once

#include <stdexcept>
#include <string>

namespace cart {

// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// A path that does not exist or cannot be opened.
class FileNotFoundError : public Error {
 public:
  using Error::Error;
};

// A file whose header or payload does not parse.
class MalformedInputError : public Error {
 public:
  using Error::Error;
};

// A file that parses but uses a feature we do not support (e.g. 16-bit depth).
class UnsupportedFormatError : public Error {
 public:
  using Error::Error;
};

// Incompatible tensor/image shapes, reported with both shapes in the message.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace cart
