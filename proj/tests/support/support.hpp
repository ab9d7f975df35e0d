#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "tablevault/error.hpp"
#include "tablevault/layout.hpp"
#include "tablevault/refparse.hpp"
#include "tablevault/repository.hpp"
#include "tablevault/tabular.hpp"
#include "tablevault/util.hpp"
#include "tablevault/yaml_json.hpp"

namespace tvtest {

namespace fs = std::filesystem;
using tablevault::Json;

class TempDir {
public:
    TempDir() {
        std::string tmpl = (fs::temp_directory_path() / "tablevault-test-XXXXXX").string();
        if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
        path_ = tmpl;
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    [[nodiscard]] const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    fs::path path_;
};

inline void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
}

inline tablevault::RepositoryOptions quick_options(bool fsync = false) {
    tablevault::RepositoryOptions o;
    o.fsync = fsync;
    o.lock_timeout = std::chrono::milliseconds(2000);
    return o;
}

inline tablevault::RepositoryOptions deterministic_options(std::uint64_t seed, int start_year_offset = 0,
                                                           bool fsync = false) {
    auto o = quick_options(fsync);
    using namespace std::chrono;
    const auto start = sys_days{year{2030 + start_year_offset} / January / 1};
    o.env = tablevault::Environment::deterministic(seed, time_point_cast<system_clock::duration>(start));
    return o;
}

inline std::string content_digest(const fs::path& root) {
    return tablevault::tree_digest(root, tablevault::Layout::content_subtrees());
}

/// Every regular file below root, relative, sorted.
inline std::vector<std::string> files_below(const fs::path& root) {
    std::vector<std::string> out;
    if (!fs::exists(root)) return out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root).generic_string());
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline std::string index_yaml(const std::string& folder_ref) {
    return "builder_type: 'IndexBuilder'\n"
           "changed_columns: ['file_name']\n"
           "primary_key: ['file_name']\n"
           "python_function: 'create_data_table_from_table'\n"
           "code_module: 'table_generation'\n"
           "is_custom: false\n"
           "arguments:\n"
           "    folder_dir: '" + folder_ref + "'\n";
}

/// Column builder calling testing.probe with the given argument block (already indented).
inline std::string probe_yaml(const std::string& column, const std::string& args, const std::string& extra = {}) {
    return "builder_type: 'ColumnBuilder'\n"
           "changed_columns: ['" + column + "']\n"
           "python_function: 'probe'\n"
           "code_module: 'testing'\n" + extra +
           "arguments:\n" + args;
}

/// An external table with a single string column `k` holding the given values.
inline std::string seed_keys(tablevault::Repository& repo, const std::string& author, const std::string& table,
                             const std::vector<std::string>& keys) {
    using namespace tablevault;
    if (!fs::exists(repo.layout().table_dir(table))) repo.create_table(author, table);
    repo.create_instance(author, table, true);
    TabularData frame({{"k", Dtype::String}});
    for (const auto& k : keys) frame.add_row({Cell{k}});
    return *repo.write_instance(author, table, frame, "seed keys").instance;
}

inline std::vector<std::string> numbered(std::size_t n, const std::string& prefix = "r") {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%s%03zu", prefix.c_str(), i);
        out.emplace_back(buf);
    }
    return out;
}

// ---- reference-expression generator -----------------------------------------------

class RefGen {
public:
    explicit RefGen(std::uint64_t seed) : rng_(seed) {}

    tablevault::ref::RefExpr expr(int depth = 0) {
        using namespace tablevault::ref;
        RefExpr e;
        if (depth == 0 && pick(16) == 0) {  // a nested keyword is a term, not an expression
            e.keyword = pick(2) ? Keyword::Id : Keyword::ArtifactFolder;
            return e;
        }
        if (pick(6) == 0) {
            e.self = true;
        } else {
            e.table = ident();
            if (pick(4) == 0) e.instance = instance_id();
        }
        if (pick(2)) e.column = ident();
        if (pick(8) == 0) {
            e.facet = pick(2) ? "lineage" : "builders." + ident();
            return e;
        }
        const int nfilters = static_cast<int>(pick(4));
        for (int i = 0; i < nfilters; ++i) e.filters.push_back(filter(depth));
        return e;
    }

    std::uint64_t pick(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(rng_); }

private:
    tablevault::ref::Filter filter(int depth) {
        using namespace tablevault::ref;
        Filter f;
        switch (pick(4)) {
            case 0: f.key.kind = FilterKey::Kind::Bare; break;
            case 1: f.key.kind = FilterKey::Kind::Index; break;
            case 2: f.key.kind = FilterKey::Kind::Operation; break;
            default:
                f.key.kind = FilterKey::Kind::Column;
                f.key.column = ident();
        }
        const auto choice = pick(depth < 3 ? 3 : 2);
        if (choice == 2) {
            f.value = Box<RefExpr>(expr(depth + 1));
        } else if (choice == 1 && f.key.is_index()) {
            Slice s;
            if (pick(3)) s.start = bound();
            if (pick(3)) s.stop = bound();
            f.value = s;
        } else {
            f.value = term();
        }
        return f;
    }

    tablevault::ref::Term bound() {
        using namespace tablevault::ref;
        if (pick(2)) return SelfIndex{static_cast<std::int64_t>(pick(17)) - 8};
        return static_cast<std::int64_t>(pick(200)) - 100;
    }

    tablevault::ref::Term term() {
        using namespace tablevault::ref;
        switch (pick(5)) {
            case 0: return static_cast<std::int64_t>(pick(2001)) - 1000;
            case 1: return string_literal();
            case 2: return SelfIndex{static_cast<std::int64_t>(pick(17)) - 8};
            case 3: return SelfColumn{"c" + ident()};
            default: return pick(2) ? Keyword::Id : Keyword::ArtifactFolder;
        }
    }

    std::string ident() {
        static const char* const kStart = "abcdefghjkmnpqrtuvwxyz_";
        static const char* const kRest = "abcdefghijklmnopqrstuvwxyz0123456789_-";
        std::string s(1, kStart[pick(23)]);
        const auto len = pick(10);
        for (std::uint64_t i = 0; i < len; ++i) s.push_back(kRest[pick(38)]);
        return s;
    }

    std::string string_literal() {
        static const std::string kChars = "abc XYZ09_-.,:[]<>~#@'\"\\";
        std::string s;
        const auto len = pick(12);
        for (std::uint64_t i = 0; i < len; ++i) s.push_back(kChars[pick(kChars.size())]);
        return s;
    }

    std::string instance_id() {
        char buf[40];
        std::snprintf(buf, sizeof buf, "2026%02u%02uT%02u%02u%02u.%06u_%c%c%c%c%c%c",
                      static_cast<unsigned>(pick(12) + 1), static_cast<unsigned>(pick(28) + 1),
                      static_cast<unsigned>(pick(24)), static_cast<unsigned>(pick(60)),
                      static_cast<unsigned>(pick(60)), static_cast<unsigned>(pick(1000000)),
                      'a' + static_cast<char>(pick(26)), 'a' + static_cast<char>(pick(26)),
                      '0' + static_cast<char>(pick(10)), 'a' + static_cast<char>(pick(26)),
                      'a' + static_cast<char>(pick(26)), 'a' + static_cast<char>(pick(26)));
        return buf;
    }

    std::mt19937_64 rng_;
};

// ---- slice oracle --------------------------------------------------------------------

/// Rows [start, stop) of an n-row frame with Pythonic clamping to [0, n].
inline std::vector<std::size_t> slice_oracle(std::int64_t n, std::optional<std::int64_t> start,
                                             std::optional<std::int64_t> stop) {
    const auto lo = std::clamp<std::int64_t>(start.value_or(0), 0, n);
    const auto hi = std::clamp<std::int64_t>(stop.value_or(n), 0, n);
    std::vector<std::size_t> out;
    for (auto i = lo; i < hi; ++i) out.push_back(static_cast<std::size_t>(i));
    return out;
}

/// In-memory committed state for resolver tests.
class MemoryView : public tablevault::ref::RepositoryView {
public:
    void add(const std::string& table, const std::string& instance, tablevault::TabularData frame) {
        frames_[{table, instance}] = std::make_shared<tablevault::TabularData>(std::move(frame));
        if (!latest_.count(table) || latest_[table] < instance) latest_[table] = instance;
    }

    [[nodiscard]] std::string latest_instance(const std::string& table) const override {
        const auto it = latest_.find(table);
        if (it == latest_.end()) tablevault::fail(tablevault::ErrorKind::Resolve, "no table " + table);
        return it->second;
    }
    [[nodiscard]] bool has_instance(const std::string& table, const std::string& instance) const override {
        return frames_.count({table, instance}) > 0;
    }
    [[nodiscard]] std::shared_ptr<const tablevault::TabularData> frame(const std::string& table,
                                                                       const std::string& instance) const override {
        const auto it = frames_.find({table, instance});
        if (it == frames_.end()) tablevault::fail(tablevault::ErrorKind::Resolve, "no instance " + table + "@" + instance);
        return it->second;
    }
    [[nodiscard]] fs::path artifact_dir(const std::string& table, const std::string& instance) const override {
        return fs::path("/artifacts") / table / instance;
    }
    [[nodiscard]] Json metadata(const std::string& table, const std::string& instance,
                                const std::string& facet) const override {
        return Json{{"table", table}, {"instance", instance}, {"facet", facet}};
    }

private:
    std::map<std::pair<std::string, std::string>, std::shared_ptr<const tablevault::TabularData>> frames_;
    std::map<std::string, std::string> latest_;
};

/// n rows of (i:int, name:string "n<i>").
inline tablevault::TabularData counting_frame(std::size_t n) {
    using namespace tablevault;
    TabularData f({{"i", Dtype::Int}, {"name", Dtype::String}});
    for (std::size_t r = 0; r < n; ++r) f.add_row({Cell{static_cast<std::int64_t>(r)}, Cell{"n" + std::to_string(r)}});
    return f;
}

}  // namespace tvtest
