#pragma once

#include <stdexcept>
#include <string>

namespace ctxdet {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A mask needed for attachment or Hausdorff distance has no points.
class MissingSegmentation : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

// Malformed input file. `path()` is the JSON field path, e.g. "annotations[3].bbox".
class SchemaError : public Error {
 public:
  SchemaError(std::string field_path, const std::string& what)
      : Error(field_path + ": " + what), path_(std::move(field_path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// Invalid or missing run configuration (CLI maps this to exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace ctxdet
