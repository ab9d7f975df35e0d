#include "tablevault/tabular.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>

#include "tablevault/error.hpp"

namespace tablevault {

std::string_view to_string(Dtype dtype) noexcept {
    switch (dtype) {
        case Dtype::String: return "string";
        case Dtype::Int: return "int";
        case Dtype::Float: return "float";
        case Dtype::Bool: return "bool";
        case Dtype::ArtifactString: return "artifact_string";
    }
    return "string";
}

Dtype parse_dtype(std::string_view name) {
    if (name == "string" || name == "str") return Dtype::String;
    if (name == "int") return Dtype::Int;
    if (name == "float") return Dtype::Float;
    if (name == "bool") return Dtype::Bool;
    if (name == "artifact_string") return Dtype::ArtifactString;
    fail(ErrorKind::Validation, "unknown dtype '" + std::string(name) + "'");
}

bool is_null(const Cell& cell) noexcept { return std::holds_alternative<std::monostate>(cell); }

Json cell_to_json(const Cell& cell) {
    return std::visit(
        [](const auto& v) -> Json {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, std::monostate>) {
                return nullptr;
            } else {
                return v;
            }
        },
        cell);
}

std::string cell_to_text(const Cell& cell) {
    return std::visit(
        [](const auto& v) -> std::string {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, std::monostate>) {
                return "";
            } else if constexpr (std::is_same_v<T, std::string>) {
                return v;
            } else if constexpr (std::is_same_v<T, bool>) {
                return v ? "true" : "false";
            } else if constexpr (std::is_same_v<T, double>) {
                char buf[64];
                auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
                std::string s(buf, p);
                // Keep floats distinguishable from ints in text form.
                if (std::isfinite(v) && s.find_first_of(".eE") == std::string::npos) s += ".0";
                return s;
            } else {
                return std::to_string(v);
            }
        },
        cell);
}

std::optional<Cell> cell_from_text(std::string_view text, Dtype dtype) {
    switch (dtype) {
        case Dtype::String: return Cell{std::string(text)};
        case Dtype::ArtifactString:
            // an empty path is never valid, so it can only be a missing value
            if (text.empty()) return Cell{};
            return Cell{std::string(text)};
        case Dtype::Int: {
            if (text.empty()) return Cell{};
            std::int64_t v = 0;
            auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
            if (ec != std::errc() || p != text.data() + text.size()) return std::nullopt;
            return Cell{v};
        }
        case Dtype::Float: {
            if (text.empty()) return Cell{};
            double v = 0;
            auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
            if (ec != std::errc() || p != text.data() + text.size()) return std::nullopt;
            return Cell{v};
        }
        case Dtype::Bool:
            if (text.empty()) return Cell{};
            if (text == "true" || text == "True" || text == "1") return Cell{true};
            if (text == "false" || text == "False" || text == "0") return Cell{false};
            return std::nullopt;
    }
    return std::nullopt;
}

std::optional<Cell> coerce(const Cell& cell, Dtype dtype) {
    if (is_null(cell)) return Cell{};
    if (cell_matches(cell, dtype)) return cell;
    if (dtype == Dtype::Float) {
        if (const auto* i = std::get_if<std::int64_t>(&cell)) return Cell{static_cast<double>(*i)};
    }
    if (dtype == Dtype::Int) {
        if (const auto* d = std::get_if<double>(&cell)) {
            if (std::floor(*d) == *d && std::abs(*d) < 9.0e18) return Cell{static_cast<std::int64_t>(*d)};
            return std::nullopt;
        }
    }
    return cell_from_text(cell_to_text(cell), dtype);
}

std::optional<Cell> coerce(const Json& value, Dtype dtype) {
    switch (value.type()) {
        case Json::value_t::null: return Cell{};
        case Json::value_t::boolean: return coerce(Cell{value.get<bool>()}, dtype);
        case Json::value_t::number_integer:
        case Json::value_t::number_unsigned: return coerce(Cell{value.get<std::int64_t>()}, dtype);
        case Json::value_t::number_float: return coerce(Cell{value.get<double>()}, dtype);
        case Json::value_t::string: return coerce(Cell{value.get<std::string>()}, dtype);
        default: return std::nullopt;
    }
}

bool cell_matches(const Cell& cell, Dtype dtype) noexcept {
    if (is_null(cell)) return true;
    switch (dtype) {
        case Dtype::String:
        case Dtype::ArtifactString: return std::holds_alternative<std::string>(cell);
        case Dtype::Int: return std::holds_alternative<std::int64_t>(cell);
        case Dtype::Float: return std::holds_alternative<double>(cell);
        case Dtype::Bool: return std::holds_alternative<bool>(cell);
    }
    return false;
}

// ---- TabularData ------------------------------------------------------------

TabularData::TabularData(std::vector<ColumnSpec> columns, std::vector<std::string> primary_key)
    : columns_(std::move(columns)), primary_key_(std::move(primary_key)) {
    std::set<std::string> seen;
    for (const auto& c : columns_) {
        if (c.name.empty()) fail(ErrorKind::Validation, "empty column name");
        if (!seen.insert(c.name).second) fail(ErrorKind::Validation, "duplicate column '" + c.name + "'");
    }
    for (const auto& k : primary_key_) {
        if (!seen.count(k)) fail(ErrorKind::Validation, "primary key column '" + k + "' is not a column");
    }
}

std::optional<std::size_t> TabularData::column_index(std::string_view name) const {
    for (std::size_t i = 0; i < columns_.size(); ++i) {
        if (columns_[i].name == name) return i;
    }
    return std::nullopt;
}

std::size_t TabularData::require_column(std::string_view name) const {
    if (auto idx = column_index(name)) return *idx;
    fail(ErrorKind::Resolve, "unknown column '" + std::string(name) + "'");
}

void TabularData::add_row(std::vector<Cell> row) {
    if (row.size() != columns_.size()) {
        fail(ErrorKind::Validation, "row has " + std::to_string(row.size()) + " cells, expected " +
                                        std::to_string(columns_.size()));
    }
    rows_.push_back(std::move(row));
}

std::size_t TabularData::add_column(ColumnSpec spec) {
    if (column_index(spec.name)) fail(ErrorKind::Validation, "duplicate column '" + spec.name + "'");
    columns_.push_back(std::move(spec));
    for (auto& r : rows_) r.emplace_back();
    return columns_.size() - 1;
}

TabularData TabularData::select_rows(const std::vector<std::size_t>& positions) const {
    TabularData out(columns_, primary_key_);
    for (auto p : positions) out.rows_.push_back(rows_.at(p));
    return out;
}

std::vector<Cell> TabularData::column_values(std::size_t col) const {
    std::vector<Cell> out;
    out.reserve(rows_.size());
    for (const auto& r : rows_) out.push_back(r.at(col));
    return out;
}

namespace {

void append_csv_field(std::string& out, std::string_view field) {
    const bool quote = field.find_first_of(",\"\r\n") != std::string_view::npos ||
                       (!field.empty() && (field.front() == ' ' || field.back() == ' '));
    if (!quote) {
        out.append(field);
        return;
    }
    out.push_back('"');
    for (char c : field) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    out.push_back('"');
}

}  // namespace

std::vector<std::vector<std::string>> parse_csv_records(std::string_view text) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> record;
    std::string field;
    bool in_quotes = false;
    bool field_started = false;
    std::size_t i = 0;
    const auto end_record = [&] {
        record.push_back(std::move(field));
        field.clear();
        records.push_back(std::move(record));
        record.clear();
        field_started = false;
    };
    while (i < text.size()) {
        const char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    i += 2;
                    continue;
                }
                in_quotes = false;
                ++i;
                continue;
            }
            field.push_back(c);
            ++i;
            continue;
        }
        if (c == '"' && field.empty()) {
            in_quotes = true;
            field_started = true;
            ++i;
        } else if (c == ',') {
            record.push_back(std::move(field));
            field.clear();
            field_started = true;
            ++i;
        } else if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
            end_record();
            i += 2;
        } else if (c == '\n') {
            end_record();
            ++i;
        } else {
            field.push_back(c);
            field_started = true;
            ++i;
        }
    }
    if (in_quotes) fail(ErrorKind::Validation, "unterminated quoted CSV field");
    if (field_started || !field.empty() || !record.empty()) end_record();
    return records;
}

std::string TabularData::to_csv() const {
    std::string out;
    for (std::size_t i = 0; i < columns_.size(); ++i) {
        if (i) out.push_back(',');
        append_csv_field(out, columns_[i].name);
    }
    out.push_back('\n');
    for (const auto& r : rows_) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            if (i) out.push_back(',');
            const auto text = cell_to_text(r[i]);
            // A single empty field would read back as a blank line.
            if (r.size() == 1 && text.empty()) {
                out.append("\"\"");
            } else {
                append_csv_field(out, text);
            }
        }
        out.push_back('\n');
    }
    return out;
}

namespace {

TabularData fill_rows(TabularData frame, const std::vector<std::vector<std::string>>& records) {
    const auto& cols = frame.columns();
    for (std::size_t r = 1; r < records.size(); ++r) {
        const auto& rec = records[r];
        if (rec.size() != cols.size()) {
            fail(ErrorKind::Validation, "CSV record " + std::to_string(r) + " has " + std::to_string(rec.size()) +
                                            " fields, expected " + std::to_string(cols.size()));
        }
        std::vector<Cell> row;
        row.reserve(cols.size());
        for (std::size_t c = 0; c < cols.size(); ++c) {
            auto cell = cell_from_text(rec[c], cols[c].dtype);
            if (!cell) {
                fail(ErrorKind::Validation, "value '" + rec[c] + "' in column '" + cols[c].name + "' is not " +
                                                std::string(to_string(cols[c].dtype)));
            }
            row.push_back(std::move(*cell));
        }
        frame.add_row(std::move(row));
    }
    return frame;
}

}  // namespace

TabularData TabularData::from_csv(std::string_view text, const std::vector<ColumnSpec>& schema,
                                  std::vector<std::string> primary_key) {
    const auto records = parse_csv_records(text);
    if (records.empty()) fail(ErrorKind::Validation, "CSV has no header");
    const auto& header = records.front();
    const bool empty_header = schema.empty() && header.size() == 1 && header[0].empty();
    if (!empty_header) {
        if (header.size() != schema.size()) fail(ErrorKind::Validation, "CSV header does not match schema");
        for (std::size_t i = 0; i < schema.size(); ++i) {
            if (header[i] != schema[i].name) {
                fail(ErrorKind::Validation, "CSV header column '" + header[i] + "' does not match schema '" +
                                                schema[i].name + "'");
            }
        }
    }
    return fill_rows(TabularData(schema, std::move(primary_key)), records);
}

TabularData TabularData::from_csv_header(std::string_view text, const std::vector<ColumnSpec>& dtypes,
                                         std::vector<std::string> primary_key) {
    const auto records = parse_csv_records(text);
    if (records.empty()) fail(ErrorKind::Validation, "CSV has no header");
    std::vector<ColumnSpec> cols;
    for (const auto& name : records.front()) {
        ColumnSpec spec{name, Dtype::String};
        for (const auto& d : dtypes) {
            if (d.name == name) spec.dtype = d.dtype;
        }
        cols.push_back(spec);
    }
    return fill_rows(TabularData(std::move(cols), std::move(primary_key)), records);
}

Json TabularData::schema_json() const {
    Json cols = Json::array();
    for (const auto& c : columns_) cols.push_back({{"name", c.name}, {"dtype", std::string(to_string(c.dtype))}});
    return {{"format_version", 1}, {"columns", cols}, {"primary_key", primary_key_}};
}

std::pair<std::vector<ColumnSpec>, std::vector<std::string>> TabularData::schema_from_json(const Json& doc) {
    std::vector<ColumnSpec> cols;
    for (const auto& c : doc.at("columns")) {
        cols.push_back({c.at("name").get<std::string>(), parse_dtype(c.at("dtype").get<std::string>())});
    }
    std::vector<std::string> pk;
    if (doc.contains("primary_key") && doc["primary_key"].is_array()) {
        pk = doc["primary_key"].get<std::vector<std::string>>();
    }
    return {cols, pk};
}

Json TabularData::to_json() const {
    Json doc = schema_json();
    doc.erase("format_version");
    Json rows = Json::array();
    for (const auto& r : rows_) {
        Json row = Json::array();
        for (const auto& c : r) row.push_back(cell_to_json(c));
        rows.push_back(std::move(row));
    }
    doc["rows"] = std::move(rows);
    return doc;
}

TabularData TabularData::from_json(const Json& doc) {
    auto [cols, pk] = schema_from_json(doc);
    TabularData frame(cols, pk);
    if (doc.contains("rows")) {
        for (const auto& r : doc.at("rows")) {
            if (!r.is_array() || r.size() != cols.size()) fail(ErrorKind::Validation, "row width mismatch");
            std::vector<Cell> row;
            for (std::size_t c = 0; c < cols.size(); ++c) {
                auto cell = coerce(r[c], cols[c].dtype);
                if (!cell) fail(ErrorKind::Validation, "value in column '" + cols[c].name + "' has wrong type");
                row.push_back(std::move(*cell));
            }
            frame.add_row(std::move(row));
        }
    }
    return frame;
}

// ---- validation / digest --------------------------------------------------------

void validate_frame(const TabularData& frame, const fs::path& artifact_dir) {
    const auto& cols = frame.columns();
    for (std::size_t r = 0; r < frame.num_rows(); ++r) {
        for (std::size_t c = 0; c < cols.size(); ++c) {
            const auto& cell = frame.at(r, c);
            if (!cell_matches(cell, cols[c].dtype)) {
                fail(ErrorKind::Validation, "row " + std::to_string(r) + " column '" + cols[c].name +
                                                "' does not match dtype " + std::string(to_string(cols[c].dtype)));
            }
            if (cols[c].dtype == Dtype::ArtifactString && !is_null(cell)) {
                const auto& rel = std::get<std::string>(cell);
                const fs::path p(rel);
                const auto norm = p.lexically_normal().generic_string();
                if (rel.empty() || p.is_absolute() || norm.rfind("..", 0) == 0) {
                    fail(ErrorKind::Validation, "artifact path '" + rel + "' escapes the artifact folder");
                }
                if (!fs::is_regular_file(artifact_dir / p)) {
                    fail(ErrorKind::Validation, "artifact '" + rel + "' does not exist in the artifact folder");
                }
            }
        }
    }
    if (!frame.primary_key().empty()) {
        std::vector<std::size_t> key_cols;
        for (const auto& k : frame.primary_key()) key_cols.push_back(frame.require_column(k));
        std::set<std::vector<std::string>> seen;
        for (std::size_t r = 0; r < frame.num_rows(); ++r) {
            std::vector<std::string> key;
            for (auto c : key_cols) key.push_back(cell_to_text(frame.at(r, c)));
            if (!seen.insert(key).second) {
                fail(ErrorKind::Validation, "duplicate primary key at row " + std::to_string(r));
            }
        }
    }
}

std::string instance_digest(std::string_view csv_bytes, const fs::path& artifact_dir) {
    std::vector<std::pair<std::string, std::string>> artifacts;
    if (fs::is_directory(artifact_dir)) {
        for (const auto& e : fs::recursive_directory_iterator(artifact_dir)) {
            if (!e.is_regular_file()) continue;
            artifacts.emplace_back(e.path().lexically_relative(artifact_dir).generic_string(),
                                   sha256_file(e.path()));
        }
    }
    std::sort(artifacts.begin(), artifacts.end());
    std::string material = "data " + sha256_hex(csv_bytes) + "\n";
    for (const auto& [name, digest] : artifacts) material += "artifact " + name + " " + digest + "\n";
    return sha256_hex(material);
}

}  // namespace tablevault
