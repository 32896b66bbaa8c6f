#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace derail {

enum class ErrorKind {
    io,
    schema,
    precondition,
    not_found,
    backend,
    conflict,
    infeasible,
    config,
};

std::string_view to_string(ErrorKind kind);

// Library-wide exception. The kind maps onto the CLI's machine-readable
// error JSON and onto HTTP status codes in the game server.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
    throw Error(kind, message);
}

} // namespace derail
