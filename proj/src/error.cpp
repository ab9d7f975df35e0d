#include "tablevault/error.hpp"

namespace tablevault {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::Validation: return "ValidationError";
        case ErrorKind::BuilderValidation: return "BuilderValidationError";
        case ErrorKind::Parse: return "ParseError";
        case ErrorKind::NotFound: return "NotFound";
        case ErrorKind::RepositoryConflict: return "RepositoryConflict";
        case ErrorKind::NameConflict: return "NameConflict";
        case ErrorKind::AccessDenied: return "AccessDenied";
        case ErrorKind::State: return "StateError";
        case ErrorKind::Busy: return "Busy";
        case ErrorKind::Reverted: return "Reverted";
        case ErrorKind::Scope: return "ScopeError";
        case ErrorKind::Resolve: return "ResolveError";
        case ErrorKind::Context: return "ContextError";
        case ErrorKind::Type: return "TypeError";
        case ErrorKind::Range: return "RangeError";
        case ErrorKind::Lineage: return "LineageError";
        case ErrorKind::Io: return "IoError";
        case ErrorKind::Internal: return "InternalError";
    }
    return "InternalError";
}

int exit_code_for(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::NotFound: return 3;
        case ErrorKind::Busy: return 4;
        case ErrorKind::Reverted:
        case ErrorKind::Scope:
        case ErrorKind::Lineage: return 5;
        case ErrorKind::Io:
        case ErrorKind::Internal: return 1;
        default: return 2;
    }
}

Error::Error(ErrorKind kind, std::string detail)
    : std::runtime_error(std::string(to_string(kind)) + ": " + detail),
      kind_(kind),
      detail_(std::move(detail)) {}

Error::Error(ErrorKind kind, std::string detail, std::size_t offset)
    : std::runtime_error(std::string(to_string(kind)) + " at offset " + std::to_string(offset) + ": " +
                         detail),
      kind_(kind),
      detail_(std::move(detail)),
      offset_(offset) {}

}  // namespace tablevault
