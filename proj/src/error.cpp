#include "mrsim/error.hpp"

namespace mrsim {

const char* error_code_name(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::invalid_argument: return "invalid_argument";
        case ErrorCode::dimension_mismatch: return "dimension_mismatch";
        case ErrorCode::stability: return "stability";
        case ErrorCode::numerical: return "numerical";
        case ErrorCode::root_find: return "root_find";
        case ErrorCode::regression: return "regression";
        case ErrorCode::config: return "config";
        case ErrorCode::io: return "io";
        case ErrorCode::internal: return "internal";
    }
    return "unknown";
}

}  // namespace mrsim
