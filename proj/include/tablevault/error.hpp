#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace tablevault {

enum class ErrorKind {
    Validation,
    BuilderValidation,
    Parse,
    NotFound,
    RepositoryConflict,
    NameConflict,
    AccessDenied,
    State,
    Busy,
    Reverted,
    Scope,
    Resolve,
    Context,
    Type,
    Range,
    Lineage,
    Io,
    Internal,
};

std::string_view to_string(ErrorKind kind) noexcept;

// Exit code contract of the command line frontend.
int exit_code_for(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string detail);
    Error(ErrorKind kind, std::string detail, std::size_t offset);

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }
    [[nodiscard]] const std::string& detail() const noexcept { return detail_; }
    // Byte offset into the source text, set for parse errors.
    [[nodiscard]] std::optional<std::size_t> offset() const noexcept { return offset_; }

private:
    ErrorKind kind_;
    std::string detail_;
    std::optional<std::size_t> offset_;
};

[[noreturn]] inline void fail(ErrorKind kind, std::string detail) {
    throw Error(kind, std::move(detail));
}

}  // namespace tablevault
