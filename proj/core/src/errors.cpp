#include "crash/errors.hpp"

namespace crash {

const char* error_kind_name(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Shape: return "shape";
        case ErrorKind::Input: return "input";
        case ErrorKind::Config: return "config";
        case ErrorKind::Parameter: return "parameter";
        case ErrorKind::Format: return "format";
        case ErrorKind::Provenance: return "provenance";
        case ErrorKind::DegenerateInput: return "degenerate_input";
        case ErrorKind::DegenerateGeometry: return "degenerate_geometry";
        case ErrorKind::Numeric: return "numeric";
        case ErrorKind::Training: return "training";
    }
    return "unknown";
}

}  // namespace crash
