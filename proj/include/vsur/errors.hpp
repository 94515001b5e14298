#pragma once

#include <stdexcept>
#include <string>

namespace vsur {

/// Input that fails a schema or range check. `field()` names the offending
/// parameter or field so callers (CLI, HTTP 422) can report it.
class ValidationError : public std::runtime_error {
 public:
  ValidationError(std::string field, const std::string& message)
      : std::runtime_error(field.empty() ? message : field + ": " + message),
        field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Failure to read or interpret a file on disk (manifest, checkpoint, image).
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor/vector dimensions disagree with the configured model.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace vsur
