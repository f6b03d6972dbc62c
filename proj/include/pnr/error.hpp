#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pnr {

// Coarse error classes; the CLI maps each one to a distinct exit status.
enum class ErrorCategory {
  invalid_argument,
  io,
  format,
  data,
  convergence,
};

std::string_view category_name(ErrorCategory category);

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory category, const std::string& what) {
  throw Error(category, what);
}

inline void require(bool condition, const std::string& what) {
  if (!condition) fail(ErrorCategory::invalid_argument, what);
}

}  // namespace pnr
