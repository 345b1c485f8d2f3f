#pragma once

#include <stdexcept>
#include <string>

namespace qbc {

enum class ErrorKind {
  kDimension,
  kValue,
  kConfig,
  kArgument,
  kInstability,
  kGraph,
  kNumeric,
  kFormat,
  kIo,
  kValidation,
};

const char* to_string(ErrorKind kind);

/// Base of every exception thrown by the library. The kind selects the CLI
/// exit code, so callers normally only need to catch this one type.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define QBC_DEFINE_ERROR(Name, Kind)                                      \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string& message) : Error(Kind, message) {}   \
  };

QBC_DEFINE_ERROR(DimensionError, ErrorKind::kDimension)
QBC_DEFINE_ERROR(ValueError, ErrorKind::kValue)
QBC_DEFINE_ERROR(ConfigError, ErrorKind::kConfig)
QBC_DEFINE_ERROR(ArgumentError, ErrorKind::kArgument)
QBC_DEFINE_ERROR(InstabilityError, ErrorKind::kInstability)
QBC_DEFINE_ERROR(GraphError, ErrorKind::kGraph)
QBC_DEFINE_ERROR(NumericError, ErrorKind::kNumeric)
QBC_DEFINE_ERROR(FormatError, ErrorKind::kFormat)
QBC_DEFINE_ERROR(IoError, ErrorKind::kIo)
QBC_DEFINE_ERROR(ValidationError, ErrorKind::kValidation)

#undef QBC_DEFINE_ERROR

}  // namespace qbc
