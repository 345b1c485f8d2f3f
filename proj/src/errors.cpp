#include "qbc/errors.hpp"

namespace qbc {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kValue: return "value error";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kArgument: return "argument error";
    case ErrorKind::kInstability: return "instability error";
    case ErrorKind::kGraph: return "graph error";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kFormat: return "format error";
    case ErrorKind::kIo: return "io error";
    case ErrorKind::kValidation: return "validation error";
  }
  return "error";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

}  // namespace qbc
