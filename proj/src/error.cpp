#include "pnr/error.hpp"

namespace pnr {

std::string_view category_name(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::invalid_argument: return "invalid_argument";
    case ErrorCategory::io: return "io";
    case ErrorCategory::format: return "format";
    case ErrorCategory::data: return "data";
    case ErrorCategory::convergence: return "convergence";
  }
  return "unknown";
}

}  // namespace pnr
