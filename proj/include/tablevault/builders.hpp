#pragma once

#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "tablevault/refparse.hpp"
#include "tablevault/tabular.hpp"
#include "tablevault/util.hpp"

namespace tablevault {

enum class BuilderType { Index, Column };
enum class OnError { Revert, Pause };

std::string_view to_string(BuilderType type) noexcept;

/// A builder argument: a plain YAML value or a parsed reference string.
struct BuilderArgument {
    Json literal;
    std::optional<ref::RefExpr> ref;

    [[nodiscard]] bool is_reference() const noexcept { return ref.has_value(); }
};

/// Parsed builder document. Field names follow the YAML keys verbatim.
struct BuilderSpec {
    std::string name;
    BuilderType builder_type = BuilderType::Column;
    std::vector<std::string> changed_columns;
    std::vector<std::string> primary_key;
    std::string python_function;
    std::string code_module;
    bool is_custom = false;
    std::map<std::string, BuilderArgument> arguments;
    std::map<std::string, Dtype> dtypes;
    std::optional<BuilderArgument> nthreads;
    OnError on_error = OnError::Revert;
    int retries = 0;
    Json document;  // the whole document, unknown keys included

    /// Every argument (nthreads included) with the lineage slot it feeds.
    [[nodiscard]] std::vector<std::pair<std::string, const BuilderArgument*>> slots() const;
};

/// Throws Error(BuilderValidation) naming the offending field.
BuilderSpec load_builder(std::string_view bytes, std::string name = {});

/// One executor invocation. `args` holds resolved arguments as JSON
/// (frames use the TabularData JSON form, artifact cells are absolute paths).
struct ExecutorCall {
    Json args = Json::object();
    std::optional<fs::path> artifact_folder;
    std::string op_id;
    std::optional<std::size_t> row;
    std::vector<std::string> columns;  // the builder's changed_columns
};

/// Returns the produced value; throws to signal a failed call.
using Executor = std::function<Json(const ExecutorCall&)>;

struct ExecutorEntry {
    Executor fn;
    bool serial = false;  // forces nthreads = 1
};

class ExecutorRegistry {
public:
    /// Registry preloaded with the builtin modules.
    ExecutorRegistry();

    void register_builtin(const std::string& module, const std::string& function, Executor fn,
                          bool serial = false);
    /// Builtins first, then an executable `code_modules/<module>/<function>`.
    [[nodiscard]] std::optional<ExecutorEntry> find(const std::string& module, const std::string& function,
                                                    const fs::path& code_modules) const;
    [[nodiscard]] bool is_builtin(const std::string& module) const;

private:
    mutable std::mutex mu_;
    std::map<std::pair<std::string, std::string>, ExecutorEntry> builtins_;
};

/// Runs `program` with `payload` on stdin; expects `{"value":...}` or
/// `{"error":...}` on stdout. Non-zero exit and `error` both throw.
Json invoke_subprocess(const fs::path& program, const Json& payload);

/// JSON form of a resolved reference value, as handed to executors.
Json value_to_argument(const ref::Value& value);

struct RowOutcome {
    std::optional<Json> value;
    std::string error;
};

/// Evaluates `call(row)` for every row lacking an outcome in `done`, with up
/// to `nthreads` calls in flight. `on_done` runs (serialized) after each row.
/// `should_stop` is checked before each row is taken. Returns outcomes in row
/// order; rows never started have neither value nor error.
std::vector<RowOutcome> evaluate_rows(std::size_t rows, std::size_t nthreads,
                                      const std::function<Json(std::size_t)>& call,
                                      const std::vector<std::optional<Json>>& done,
                                      const std::function<void(std::size_t, const RowOutcome&)>& on_done,
                                      const std::function<bool()>& should_stop, int retries = 0);

}  // namespace tablevault
