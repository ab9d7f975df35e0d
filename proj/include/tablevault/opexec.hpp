#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tablevault/layout.hpp"
#include "tablevault/util.hpp"

// Operation lifecycle: conservative two-phase locking over on-disk lock files,
// one JSON-lines write-ahead log per operation, hard-link copy-on-write, and
// crash recovery.
namespace tablevault::ops {

enum class LockMode { Shared, Exclusive };
enum class OpState { Pending, Active, Paused, Committed, Reverted };

enum class OpType {
    InitRepository,
    CreateTable,
    DeleteTable,
    CreateInstance,
    DeleteInstance,
    WriteInstance,
    ExecuteInstance,
    CreateBuilderFile,
    CreateCodeModule,
};

std::string_view to_string(LockMode mode) noexcept;
std::string_view to_string(OpState state) noexcept;
std::string_view to_string(OpType type) noexcept;
OpType parse_op_type(std::string_view name);
OpState parse_op_state(std::string_view name);

/// A lockable resource, named by its repository-relative path
/// ("tables/<t>", "tables/<t>/<instance>", "code_modules/<m>", ...).
/// Locks on a path cover everything below it.
struct LockTarget {
    std::string resource;
    LockMode mode = LockMode::Shared;

    friend bool operator==(const LockTarget&, const LockTarget&) = default;
};

LockTarget table_target(const std::string& table, LockMode mode);
LockTarget instance_target(const std::string& table, const std::string& instance, LockMode mode);

/// True when one resource equals or contains the other.
bool resources_overlap(std::string_view a, std::string_view b) noexcept;
bool conflicts(const LockTarget& a, const LockTarget& b) noexcept;

struct Decision {
    std::string timestamp;
    std::string author;
    std::string action;  // pause | resume | stop | revert
    std::string reason;
};

struct OperationRecord {
    std::string op_id;
    std::string author;
    OpType op_type = OpType::CreateTable;
    std::vector<LockTarget> targets;
    OpState state = OpState::Pending;
    std::string wal_path;
    std::string started_at;
    std::optional<std::string> finished_at;
    std::optional<std::string> parent;
    std::vector<Decision> decision_log;
    Json subject = Json::object();
    std::string reason;
    int pid = 0;
    std::string host;

    [[nodiscard]] Json to_json() const;
    static OperationRecord from_json(const Json& doc);
};

struct WalEntry {
    std::uint64_t seq = 0;
    std::string kind;
    std::string ts;
    Json payload = Json::object();
};

struct RecoveryEntry {
    std::string op_id;
    std::string disposition;  // rolled_back | rolled_forward | left_paused | cleaned_up
    bool torn_tail = false;
};

struct RecoveryReport {
    std::vector<RecoveryEntry> entries;
    std::size_t stale_locks_removed = 0;

    [[nodiscard]] bool empty() const noexcept { return entries.empty() && stale_locks_removed == 0; }
    [[nodiscard]] Json to_json() const;
};

struct ExecOptions {
    bool fsync = true;
    std::chrono::milliseconds lock_timeout{30'000};
    std::chrono::milliseconds heartbeat_interval{2'000};
    std::chrono::milliseconds stale_after{30'000};
};

/// Pending control request delivered to the process driving an operation.
enum class Control { None, Pause, Stop, StopCommit };

class OperationManager;

/// Handle on one active operation. Move-only. Destroying a handle whose
/// operation is still active reverts it.
class Operation {
public:
    using Check = std::function<std::optional<std::string>()>;

    Operation(Operation&&) noexcept;
    Operation& operator=(Operation&&) = delete;
    Operation(const Operation&) = delete;
    ~Operation();

    [[nodiscard]] const std::string& id() const noexcept;
    [[nodiscard]] const OperationRecord& record() const noexcept;
    [[nodiscard]] OpState state() const noexcept;
    /// Operation-private scratch area; removed when the operation ends.
    [[nodiscard]] fs::path work_dir() const;

    /// Copy-on-write file write. Throws Scope (after reverting) when `path` is
    /// not inside an exclusively locked resource.
    void stage_write(const fs::path& path, std::string_view bytes);
    void stage_copy(const fs::path& source, const fs::path& path);
    void stage_mkdir(const fs::path& dir);
    /// Directory the operation may fill freely; removed entirely on revert.
    /// Must not exist yet.
    void stage_owned_dir(const fs::path& dir);

    // Roll-forward actions applied after the commit point.
    void defer_remove(const fs::path& path);
    void defer_rename(const fs::path& from, const fs::path& to);
    void defer_append(const fs::path& file, const std::string& line);

    /// Runs checks; the first failure reverts and throws Error(Reverted).
    void commit(const std::vector<Check>& checks = {}, const Json& event_extra = Json::object());
    void revert(const std::string& reason);

    /// Driver-side pause: locks and WAL stay in place.
    void pause(const std::string& author, const std::string& reason = {});
    [[nodiscard]] Control poll_control() const;
    /// Records a stop decision issued through a control request.
    void acknowledge_stop(const std::string& author);

private:
    friend class OperationManager;
    struct State;
    explicit Operation(std::unique_ptr<State> state);
    std::unique_ptr<State> s_;
};

class OperationManager {
public:
    OperationManager(Layout layout, std::shared_ptr<Environment> env, ExecOptions options);
    ~OperationManager();
    OperationManager(const OperationManager&) = delete;
    OperationManager& operator=(const OperationManager&) = delete;

    /// Acquires every lock at once (sorted), then hard-links `protect` files
    /// into the backup area. Throws Busy after the lock timeout.
    Operation begin(const std::string& author, OpType type, std::vector<LockTarget> targets,
                    const std::vector<fs::path>& protect = {}, Json subject = Json::object());

    /// Re-attaches to a paused operation and records the decision (`action`
    /// is "resume", or "stop" when re-attaching only to finish a stop).
    Operation resume(const std::string& op_id, const std::string& caller, const std::string& action = "resume");
    /// Reverts a paused operation.
    void stop_paused(const std::string& op_id, const std::string& caller);

    /// Asks the driving process to pause/stop, then waits for it to act.
    void request(const std::string& op_id, const std::string& caller, Control control);

    RecoveryReport recover();

    [[nodiscard]] std::optional<OperationRecord> find(const std::string& op_id) const;
    [[nodiscard]] std::vector<OperationRecord> list_active() const;
    [[nodiscard]] std::vector<Json> completed_events() const;
    void append_event(Json event);

    /// [author, author's author, ...] ending at the first non-operation author.
    [[nodiscard]] std::vector<std::string> author_chain(const std::string& author) const;
    [[nodiscard]] bool is_authorized(const OperationRecord& record, const std::string& caller) const;

    [[nodiscard]] const Layout& layout() const noexcept { return layout_; }
    [[nodiscard]] const ExecOptions& options() const noexcept { return options_; }
    [[nodiscard]] Environment& env() const noexcept { return *env_; }

    /// Entries of a WAL file; a torn final line is dropped and reported.
    static std::vector<WalEntry> read_wal(const fs::path& path, bool* torn = nullptr);

private:
    friend class Operation;
    std::string now_iso() const;
    void acquire_locks(const std::string& op_id, std::vector<LockTarget>& targets);
    void release_locks(const std::string& op_id);
    [[nodiscard]] bool holder_alive(const OperationRecord& record) const;
    void touch_heartbeat();

    Layout layout_;
    std::shared_ptr<Environment> env_;
    ExecOptions options_;
};

}  // namespace tablevault::ops
