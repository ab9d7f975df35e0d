#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "tablevault/builders.hpp"
#include "tablevault/layout.hpp"
#include "tablevault/lineage.hpp"
#include "tablevault/opexec.hpp"
#include "tablevault/refparse.hpp"
#include "tablevault/tabular.hpp"

namespace tablevault {

struct RepositoryOptions {
    std::shared_ptr<Environment> env;  // system clock when null
    std::optional<bool> fsync;         // repository.yaml setting when unset
    std::chrono::milliseconds lock_timeout{30'000};
    std::chrono::milliseconds heartbeat_interval{2'000};
    std::chrono::milliseconds stale_after{30'000};
};

/// Result of a mutating call.
struct Receipt {
    std::string op_id;
    std::string op_type;
    std::string table;
    std::optional<std::string> instance;
    std::string state = "committed";  // or "paused"
    std::vector<std::string> archived;  // instances whose metadata moved to the archive
    std::optional<std::string> path;    // editable document, for builder/module creation

    [[nodiscard]] Json to_json() const;
};

struct InstanceInfo {
    std::string id;
    std::string status;  // temporary | committed
    std::string author;
    bool external = false;
    std::string created_at;
    std::string op_id;  // operation that committed (or is building) the instance

    [[nodiscard]] Json to_json() const;
};

struct ExecuteOptions {
    std::optional<std::string> instance;  // newest pending non-external instance by default
};

/// Committed repository state for the reference resolver, with a frame cache.
class CommittedView : public ref::RepositoryView {
public:
    explicit CommittedView(Layout layout) : layout_(std::move(layout)) {}

    [[nodiscard]] std::string latest_instance(const std::string& table) const override;
    [[nodiscard]] bool has_instance(const std::string& table, const std::string& instance) const override;
    [[nodiscard]] std::shared_ptr<const TabularData> frame(const std::string& table,
                                                           const std::string& instance) const override;
    [[nodiscard]] fs::path artifact_dir(const std::string& table, const std::string& instance) const override;
    [[nodiscard]] Json metadata(const std::string& table, const std::string& instance,
                                const std::string& facet) const override;

private:
    Layout layout_;
    mutable std::mutex mu_;
    mutable std::map<std::pair<std::string, std::string>, std::shared_ptr<const TabularData>> cache_;
};

/// Reads an instance directory's frame (data.csv + schema.yaml).
TabularData read_frame(const fs::path& instance_dir);
/// Facet document of a live or archived instance: description, lineage,
/// builders[.<name>], code, ingestion, operations.
Json instance_facet(const Layout& layout, const std::string& table, const std::string& instance,
                    const std::string& facet);

/// Names of the public repository operations (the CLI serves each one).
std::vector<std::string> api_operations();

class Repository {
public:
    /// Creates the repository, or opens it when `path` already is one.
    static Repository init(const fs::path& path, const std::string& author, RepositoryOptions options = {});
    /// Throws NotFound when `path` is not a repository.
    static Repository open(const fs::path& path, RepositoryOptions options = {});
    static bool is_repository(const fs::path& path);

    Repository(Repository&&) noexcept;
    ~Repository();

    [[nodiscard]] const Layout& layout() const noexcept;
    [[nodiscard]] ops::OperationManager& operations();
    [[nodiscard]] ExecutorRegistry& executors();
    [[nodiscard]] const CommittedView& view() const;

    Receipt create_table(const std::string& author, const std::string& name, const std::string& description = {});
    Receipt delete_table(const std::string& author, const std::string& name);
    Receipt create_instance(const std::string& author, const std::string& table, bool external = false);
    /// Imports a frame (plus optional artifact files) into the pending external instance.
    Receipt write_instance(const std::string& author, const std::string& table, const TabularData& frame,
                           const std::string& description, const std::optional<fs::path>& artifacts = {},
                           const std::string& source_note = {});
    Receipt delete_instance(const std::string& author, const std::string& table, const std::string& instance);
    Receipt create_builder_file(const std::string& author, const std::string& table, const std::string& builder,
                                const std::optional<std::string>& content = {});
    Receipt create_code_module(const std::string& author, const std::string& name,
                               const std::string& description = {});
    Receipt execute_instance(const std::string& author, const std::string& table, const ExecuteOptions& opts = {});

    /// Newest committed instance when `instance` is unset. Temporary instances
    /// are readable by their author (or the author's ancestors) only.
    TabularData get_dataframe(const std::string& caller, const std::string& table,
                              const std::optional<std::string>& instance = {});
    /// Records the query in the completed log.
    Json query_metadata(const std::string& caller, const std::string& table,
                        const std::optional<std::string>& instance, const std::string& facet);

    [[nodiscard]] std::vector<std::string> list_tables() const;
    [[nodiscard]] std::vector<InstanceInfo> list_instances(const std::string& table) const;
    [[nodiscard]] InstanceInfo instance_info(const std::string& table, const std::string& instance) const;
    [[nodiscard]] std::vector<std::string> list_code_modules() const;
    [[nodiscard]] std::vector<std::string> list_builders(const std::string& table) const;
    [[nodiscard]] fs::path builder_path(const std::string& table, const std::string& builder) const;
    [[nodiscard]] std::set<std::string> authors() const;

    lineage::Graph trace(const std::string& table, const std::optional<std::string>& instance,
                         lineage::Direction direction, std::optional<int> depth = std::nullopt) const;

    // Operation control.
    [[nodiscard]] std::vector<ops::OperationRecord> list_operations(bool include_completed = false) const;
    [[nodiscard]] ops::OperationRecord operation_status(const std::string& op_id) const;
    void pause(const std::string& caller, const std::string& op_id);
    /// Continues a paused operation in this process until it finishes or pauses again.
    Receipt resume(const std::string& caller, const std::string& op_id);
    /// revert=false commits when the operation's work is complete and valid.
    Receipt stop(const std::string& caller, const std::string& op_id, bool revert);
    ops::RecoveryReport recover();

    /// Violations of the layout and (builders or ingestion) invariants; empty when sound.
    [[nodiscard]] std::vector<std::string> audit() const;

private:
    struct Impl;
    explicit Repository(std::unique_ptr<Impl> impl);
    std::unique_ptr<Impl> impl_;

    friend struct ExecuteDriver;
};

}  // namespace tablevault
