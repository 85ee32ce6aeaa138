#include "stamp/errors.hpp"

namespace stamp {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return "config";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Usage: return "usage";
    case ErrorKind::Format: return "format";
    case ErrorKind::Data: return "data";
    case ErrorKind::Sampling: return "sampling";
    case ErrorKind::Split: return "split";
    case ErrorKind::Metric: return "metric";
    case ErrorKind::Checkpoint: return "checkpoint";
    case ErrorKind::Numeric: return "numeric";
  }
  return "unknown";
}

}  // namespace stamp
