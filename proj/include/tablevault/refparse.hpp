#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "tablevault/tabular.hpp"
#include "tablevault/util.hpp"

// TableReference strings: `<<table@instance.column#facet[key::value, ...]>>`.
namespace tablevault::ref {

/// Owning pointer with value semantics (deep copy, deep equality).
template <typename T>
class Box {
public:
    Box() : ptr_(std::make_unique<T>()) {}
    Box(T value) : ptr_(std::make_unique<T>(std::move(value))) {}  // NOLINT(google-explicit-constructor)
    Box(const Box& other) : ptr_(std::make_unique<T>(*other.ptr_)) {}
    Box(Box&&) noexcept = default;
    Box& operator=(const Box& other) {
        if (this != &other) ptr_ = std::make_unique<T>(*other.ptr_);
        return *this;
    }
    Box& operator=(Box&&) noexcept = default;
    ~Box() = default;

    T& operator*() { return *ptr_; }
    const T& operator*() const { return *ptr_; }
    T* operator->() { return ptr_.get(); }
    const T* operator->() const { return ptr_.get(); }

    friend bool operator==(const Box& a, const Box& b) { return *a.ptr_ == *b.ptr_; }

private:
    std::unique_ptr<T> ptr_;
};

enum class Keyword { ArtifactFolder, Id };

/// `self.index` with an optional signed offset.
struct SelfIndex {
    std::int64_t offset = 0;
    friend bool operator==(const SelfIndex&, const SelfIndex&) = default;
};

/// `self.<column>`: the current row's value in the executing instance.
struct SelfColumn {
    std::string column;
    friend bool operator==(const SelfColumn&, const SelfColumn&) = default;
};

using Term = std::variant<std::int64_t, std::string, SelfIndex, SelfColumn, Keyword>;

struct Slice {
    std::optional<Term> start;
    std::optional<Term> stop;
    friend bool operator==(const Slice&, const Slice&) = default;
};

struct RefExpr;

struct FilterKey {
    enum class Kind { Bare, Index, Operation, Column };
    Kind kind = Kind::Bare;
    std::string column;  // set for Kind::Column

    [[nodiscard]] bool is_index() const noexcept { return kind == Kind::Bare || kind == Kind::Index; }
    friend bool operator==(const FilterKey&, const FilterKey&) = default;
};

using FilterValue = std::variant<Term, Slice, Box<RefExpr>>;

struct Filter {
    FilterKey key;
    FilterValue value;
    friend bool operator==(const Filter&, const Filter&) = default;
};

struct RefExpr {
    std::optional<Keyword> keyword;  // bare `~keyword~` expression
    bool self = false;
    std::string table;
    std::optional<std::string> instance;
    std::optional<std::string> column;
    std::optional<std::string> facet;  // e.g. "lineage", "builders.index"
    std::vector<Filter> filters;
    std::string raw;

    [[nodiscard]] bool is_keyword() const noexcept { return keyword.has_value(); }
    // raw text is not part of the structure
    friend bool operator==(const RefExpr& a, const RefExpr& b) {
        return a.keyword == b.keyword && a.self == b.self && a.table == b.table && a.instance == b.instance &&
               a.column == b.column && a.facet == b.facet && a.filters == b.filters;
    }
};

enum class AccessPattern { Reduction, OneToOne, Cumulation, Convolution, Selection };

std::string_view to_string(AccessPattern pattern) noexcept;
AccessPattern parse_access_pattern(std::string_view name);
std::string_view to_string(Keyword keyword) noexcept;

/// True when the (trimmed) text is a reference string or a bare keyword.
bool is_reference(std::string_view text);

/// Throws Error(Parse) carrying the byte offset of the problem.
RefExpr parse(std::string_view source);
std::string print(const RefExpr& expr);

AccessPattern classify(const RefExpr& expr);
/// True when any term (nested included) depends on the current row.
bool is_row_dependent(const RefExpr& expr);
/// Tables named anywhere in the expression, SELF excluded.
std::set<std::string> referenced_tables(const RefExpr& expr);

// ---- resolution --------------------------------------------------------------------

/// Committed repository state as seen by the resolver.
class RepositoryView {
public:
    virtual ~RepositoryView() = default;
    /// Newest committed instance; throws Resolve if the table has none.
    [[nodiscard]] virtual std::string latest_instance(const std::string& table) const = 0;
    [[nodiscard]] virtual bool has_instance(const std::string& table, const std::string& instance) const = 0;
    [[nodiscard]] virtual std::shared_ptr<const TabularData> frame(const std::string& table,
                                                                   const std::string& instance) const = 0;
    [[nodiscard]] virtual fs::path artifact_dir(const std::string& table, const std::string& instance) const = 0;
    [[nodiscard]] virtual Json metadata(const std::string& table, const std::string& instance,
                                        const std::string& facet) const = 0;
};

/// The instance being built, visible through `self`.
struct SelfView {
    std::shared_ptr<const TabularData> frame;
    fs::path artifact_dir;
    std::function<Json(const std::string& facet)> metadata;
};

/// One read performed by the resolver against a non-SELF instance.
struct Access {
    std::string table;
    std::string instance;
    std::optional<std::string> column;
    bool metadata = false;
    bool operation_fallback = false;
};

struct ResolutionContext {
    const RepositoryView* repo = nullptr;
    std::optional<std::size_t> row;
    std::optional<std::string> op_id;
    std::optional<fs::path> artifact_folder;
    const SelfView* self = nullptr;
    /// table -> instance bindings fixed for the duration of an operation
    std::map<std::string, std::string> pins;
    std::function<void(const Access&)> on_access;
};

/// Scalar, column, frame, or metadata document.
class Value {
public:
    using Column = std::vector<Cell>;
    using Data = std::variant<Cell, Column, TabularData, Json>;

    Value() = default;
    explicit Value(Data data) : data_(std::move(data)) {}

    [[nodiscard]] bool is_scalar() const noexcept { return data_.index() == 0; }
    [[nodiscard]] bool is_column() const noexcept { return data_.index() == 1; }
    [[nodiscard]] bool is_frame() const noexcept { return data_.index() == 2; }
    [[nodiscard]] bool is_document() const noexcept { return data_.index() == 3; }

    [[nodiscard]] const Cell& scalar() const { return std::get<Cell>(data_); }
    [[nodiscard]] const Column& column() const { return std::get<Column>(data_); }
    [[nodiscard]] const TabularData& frame() const { return std::get<TabularData>(data_); }
    [[nodiscard]] const Json& document() const { return std::get<Json>(data_); }

    /// Collapses single-element columns and 1x1 frames; throws Type otherwise.
    [[nodiscard]] Cell as_scalar() const;
    [[nodiscard]] Json to_json() const;

private:
    Data data_;
};

Value resolve(const RefExpr& expr, const ResolutionContext& ctx);
/// Facet read for expressions with a `#facet` accessor.
Json resolve_metadata(const RefExpr& expr, const ResolutionContext& ctx);

struct Dependency {
    std::string table;
    std::string instance;
    std::set<std::string> columns;  // empty = whole frame
    AccessPattern pattern = AccessPattern::Reduction;

    friend bool operator==(const Dependency&, const Dependency&) = default;
};

/// One entry per distinct (table, instance), nested references included.
std::vector<Dependency> extract_dependencies(const RefExpr& expr, const ResolutionContext& ctx);

}  // namespace tablevault::ref
