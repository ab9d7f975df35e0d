#pragma once

#include <string>

#include "tablevault/util.hpp"

namespace tablevault {

/// Canonical on-disk layout below a repository root.
struct Layout {
    fs::path root;

    [[nodiscard]] fs::path metadata() const { return root / "metadata"; }
    [[nodiscard]] fs::path config_file() const { return metadata() / "repository.yaml"; }
    [[nodiscard]] fs::path active_log() const { return metadata() / "active_log"; }
    [[nodiscard]] fs::path wal_file(const std::string& op_id) const { return active_log() / (op_id + ".wal"); }
    [[nodiscard]] fs::path completed_log() const { return metadata() / "completed_log.jsonl"; }
    [[nodiscard]] fs::path locks() const { return metadata() / "locks"; }
    [[nodiscard]] fs::path heartbeats() const { return metadata() / "heartbeats"; }
    [[nodiscard]] fs::path ops() const { return metadata() / "ops"; }
    [[nodiscard]] fs::path op_dir(const std::string& op_id) const { return ops() / op_id; }
    [[nodiscard]] fs::path archive() const { return metadata() / "archive"; }
    [[nodiscard]] fs::path lineage_index() const { return metadata() / "lineage_index"; }
    [[nodiscard]] fs::path code_modules() const { return root / "code_modules"; }
    [[nodiscard]] fs::path code_module(const std::string& name) const { return code_modules() / name; }
    [[nodiscard]] fs::path tables() const { return root / "tables"; }
    [[nodiscard]] fs::path table_dir(const std::string& table) const { return tables() / table; }
    [[nodiscard]] fs::path pending_builders(const std::string& table) const { return table_dir(table) / "builders"; }
    [[nodiscard]] fs::path instance_dir(const std::string& table, const std::string& instance) const {
        return table_dir(table) / instance;
    }
    [[nodiscard]] fs::path archive_table(const std::string& table) const { return archive() / table; }
    [[nodiscard]] fs::path archive_instance(const std::string& table, const std::string& instance) const {
        return archive() / table / instance;
    }
    [[nodiscard]] fs::path reverse_index(const std::string& table, const std::string& instance) const {
        return lineage_index() / table / (instance + ".jsonl");
    }

    /// Subtrees that make up repository content (the rest is operational state).
    static std::vector<std::string> content_subtrees() {
        return {"tables", "code_modules", "metadata/archive", "metadata/lineage_index"};
    }
};

}  // namespace tablevault
