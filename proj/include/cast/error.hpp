// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cast {

// Every error raised by the library derives from Error. The CLI maps the
// subclasses onto distinct exit codes (see tools/castctl.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

// A caller broke an operation's precondition (frozen tensor updated, missing
// gradient, non-scalar loss, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class ConflictError : public Error {
 public:
  using Error::Error;
};

class IntegrityError : public Error {
 public:
  using Error::Error;
};

// NaN or infinity produced by an operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

// performance_ratio with ceiling <= base.
class UndefinedRatioError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class MissingArtifactError : public Error {
 public:
  MissingArtifactError(const std::string& path, const std::string& producing_stage)
      : Error("missing artifact '" + path + "'; run the '" + producing_stage + "' stage first"),
        stage_(producing_stage) {}

  const std::string& producing_stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

// Artifact decoding failures. Each failure mode has its own type so callers
// and tests can tell them apart.
class FormatError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class UnsupportedVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Well-formed bytes whose content is inconsistent (e.g. declared rank does
// not match the stored tensor shapes).
class ValidationError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace cast
