#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace mrsim {

/// Failure categories shared by the C++ API and the C error codes.
enum class ErrorCode : int {
    invalid_argument = 1,
    dimension_mismatch = 2,
    stability = 3,
    numerical = 4,
    root_find = 5,
    regression = 6,
    config = 7,
    io = 8,
    internal = 9,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what, std::optional<std::size_t> step = std::nullopt)
        : std::runtime_error(what), code_(code), step_(step) {}

    ErrorCode code() const noexcept { return code_; }
    /// Time-step index at which a solver failed, when applicable.
    std::optional<std::size_t> step() const noexcept { return step_; }

private:
    ErrorCode code_;
    std::optional<std::size_t> step_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what,
                              std::optional<std::size_t> step = std::nullopt) {
    throw Error(code, what, step);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
    if (!cond) fail(code, what);
}

}  // namespace mrsim
