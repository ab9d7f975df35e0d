#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "tablevault/util.hpp"

namespace tablevault {

enum class Dtype { String, Int, Float, Bool, ArtifactString };

std::string_view to_string(Dtype dtype) noexcept;
/// Throws Validation on an unknown dtype name.
Dtype parse_dtype(std::string_view name);

/// One dataframe cell. monostate is a missing value.
using Cell = std::variant<std::monostate, std::string, std::int64_t, double, bool>;

bool is_null(const Cell& cell) noexcept;
Json cell_to_json(const Cell& cell);
std::string cell_to_text(const Cell& cell);
/// Parse serialized text into a cell of the given dtype; nullopt when it does not fit.
std::optional<Cell> cell_from_text(std::string_view text, Dtype dtype);
/// Convert a cell or JSON value to the target dtype; nullopt when it does not fit.
std::optional<Cell> coerce(const Cell& cell, Dtype dtype);
std::optional<Cell> coerce(const Json& value, Dtype dtype);
bool cell_matches(const Cell& cell, Dtype dtype) noexcept;

struct ColumnSpec {
    std::string name;
    Dtype dtype = Dtype::String;

    friend bool operator==(const ColumnSpec&, const ColumnSpec&) = default;
};

/// An ordered set of typed columns with positional rows.
class TabularData {
public:
    TabularData() = default;
    explicit TabularData(std::vector<ColumnSpec> columns, std::vector<std::string> primary_key = {});

    [[nodiscard]] const std::vector<ColumnSpec>& columns() const noexcept { return columns_; }
    [[nodiscard]] const std::vector<std::string>& primary_key() const noexcept { return primary_key_; }
    [[nodiscard]] const std::vector<std::vector<Cell>>& rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t num_rows() const noexcept { return rows_.size(); }
    [[nodiscard]] std::size_t num_columns() const noexcept { return columns_.size(); }
    [[nodiscard]] std::optional<std::size_t> column_index(std::string_view name) const;
    /// Throws Resolve when the column does not exist.
    [[nodiscard]] std::size_t require_column(std::string_view name) const;

    [[nodiscard]] const Cell& at(std::size_t row, std::size_t col) const { return rows_.at(row).at(col); }
    Cell& at(std::size_t row, std::size_t col) { return rows_.at(row).at(col); }

    void set_primary_key(std::vector<std::string> key) { primary_key_ = std::move(key); }
    void add_row(std::vector<Cell> row);
    /// Appends a column filled with missing values.
    std::size_t add_column(ColumnSpec spec);
    [[nodiscard]] TabularData select_rows(const std::vector<std::size_t>& positions) const;
    [[nodiscard]] std::vector<Cell> column_values(std::size_t col) const;

    /// Canonical CSV: RFC 4180 quoting, '\n' line ends, header row first.
    [[nodiscard]] std::string to_csv() const;
    static TabularData from_csv(std::string_view text, const std::vector<ColumnSpec>& schema,
                                std::vector<std::string> primary_key = {});
    /// CSV whose header defines the columns; dtypes looked up in `dtypes`, else string.
    static TabularData from_csv_header(std::string_view text,
                                       const std::vector<ColumnSpec>& dtypes,
                                       std::vector<std::string> primary_key = {});

    [[nodiscard]] Json schema_json() const;
    static std::pair<std::vector<ColumnSpec>, std::vector<std::string>> schema_from_json(const Json& doc);

    /// {"columns":[{name,dtype}],"primary_key":[...],"rows":[[...]]}
    [[nodiscard]] Json to_json() const;
    static TabularData from_json(const Json& doc);

    friend bool operator==(const TabularData&, const TabularData&) = default;

private:
    std::vector<ColumnSpec> columns_;
    std::vector<std::string> primary_key_;
    std::vector<std::vector<Cell>> rows_;
};

/// Throws Validation describing the first violation: dtype mismatch, dangling
/// or escaping artifact path, duplicate primary key.
void validate_frame(const TabularData& frame, const fs::path& artifact_dir);

/// Digest over canonical CSV bytes plus sorted (artifact path, artifact hash) pairs.
std::string instance_digest(std::string_view csv_bytes, const fs::path& artifact_dir);

std::vector<std::vector<std::string>> parse_csv_records(std::string_view text);

}  // namespace tablevault
