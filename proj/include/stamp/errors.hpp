#pragma once

#include <stdexcept>
#include <string>

namespace stamp {

enum class ErrorKind {
  Config,      // invalid configuration or mode combination
  Parse,       // config text could not be parsed
  Shape,       // tensor/volume dimensions disagree
  Usage,       // contract violated by the caller
  Format,      // malformed file contents
  Data,        // missing or unreadable input data
  Sampling,    // no admissible sample exists
  Split,       // patient leakage across folds
  Metric,      // metric undefined for the input
  Checkpoint,  // checkpoint missing, corrupt or incompatible
  Numeric,     // non-finite values during training
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

inline void check(bool ok, ErrorKind kind, const std::string& message) {
  if (!ok) fail(kind, message);
}

}  // namespace stamp
