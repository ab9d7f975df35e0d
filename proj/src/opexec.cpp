#include "tablevault/opexec.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "tablevault/error.hpp"
#include "tablevault/fault.hpp"

namespace tablevault::ops {

std::string_view to_string(LockMode mode) noexcept { return mode == LockMode::Shared ? "shared" : "exclusive"; }

std::string_view to_string(OpState state) noexcept {
    switch (state) {
        case OpState::Pending: return "pending";
        case OpState::Active: return "active";
        case OpState::Paused: return "paused";
        case OpState::Committed: return "committed";
        case OpState::Reverted: return "reverted";
    }
    return "pending";
}

namespace {
constexpr std::pair<OpType, std::string_view> kOpTypeNames[] = {
    {OpType::InitRepository, "init_repository"},       {OpType::CreateTable, "create_table"},
    {OpType::DeleteTable, "delete_table"},             {OpType::CreateInstance, "create_instance"},
    {OpType::DeleteInstance, "delete_instance"},       {OpType::WriteInstance, "write_instance"},
    {OpType::ExecuteInstance, "execute_instance"},     {OpType::CreateBuilderFile, "create_builder_file"},
    {OpType::CreateCodeModule, "create_code_module"},
};
}  // namespace

std::string_view to_string(OpType type) noexcept {
    for (const auto& [t, name] : kOpTypeNames) {
        if (t == type) return name;
    }
    return "unknown";
}

OpType parse_op_type(std::string_view name) {
    for (const auto& [t, n] : kOpTypeNames) {
        if (n == name) return t;
    }
    fail(ErrorKind::Validation, "unknown operation type '" + std::string(name) + "'");
}

OpState parse_op_state(std::string_view name) {
    for (auto s : {OpState::Pending, OpState::Active, OpState::Paused, OpState::Committed, OpState::Reverted}) {
        if (to_string(s) == name) return s;
    }
    fail(ErrorKind::Validation, "unknown operation state '" + std::string(name) + "'");
}

LockTarget table_target(const std::string& table, LockMode mode) { return {"tables/" + table, mode}; }

LockTarget instance_target(const std::string& table, const std::string& instance, LockMode mode) {
    return {"tables/" + table + "/" + instance, mode};
}

bool resources_overlap(std::string_view a, std::string_view b) noexcept {
    if (a.size() > b.size()) std::swap(a, b);
    if (b.substr(0, a.size()) != a) return false;
    return b.size() == a.size() || b[a.size()] == '/';
}

bool conflicts(const LockTarget& a, const LockTarget& b) noexcept {
    if (a.mode == LockMode::Shared && b.mode == LockMode::Shared) return false;
    return resources_overlap(a.resource, b.resource);
}

namespace {

Json targets_json(const std::vector<LockTarget>& targets) {
    Json arr = Json::array();
    for (const auto& t : targets) arr.push_back({{"resource", t.resource}, {"mode", std::string(to_string(t.mode))}});
    return arr;
}

std::vector<LockTarget> targets_from_json(const Json& arr) {
    std::vector<LockTarget> out;
    for (const auto& t : arr) {
        out.push_back({t.at("resource").get<std::string>(),
                       t.at("mode").get<std::string>() == "shared" ? LockMode::Shared : LockMode::Exclusive});
    }
    return out;
}

std::string hostname() {
    char buf[256] = {};
    ::gethostname(buf, sizeof buf - 1);
    return buf;
}

std::string lock_file_name(const std::string& resource, const std::string& op_id) {
    std::string name = resource;
    std::replace(name.begin(), name.end(), '/', '+');
    return name + "~" + op_id + ".lock";
}

bool starts_with(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }

// ---- heartbeat ------------------------------------------------------------------------

class Heartbeat {
public:
    static void touch(const fs::path& file, std::chrono::milliseconds interval) {
        auto* hb = instance(interval);
        {
            std::lock_guard lock(hb->mu_);
            hb->files_.insert(file);
        }
        write_now(file);
    }

    static void write_now(const fs::path& file) {
        const int fd = ::open(file.c_str(), O_WRONLY | O_CREAT | O_CLOEXEC, 0644);
        if (fd >= 0) {
            ::futimens(fd, nullptr);
            ::close(fd);
        }
    }

private:
    static Heartbeat* instance(std::chrono::milliseconds interval) {
        static std::mutex guard;
        static Heartbeat* current = nullptr;
        std::lock_guard lock(guard);
        // A forked child inherits the pointer but not the thread: start anew.
        if (current == nullptr || current->owner_ != ::getpid()) {
            current = new Heartbeat(interval);  // intentionally leaked, see above
            std::thread([hb = current] { hb->run(); }).detach();
        }
        return current;
    }

    explicit Heartbeat(std::chrono::milliseconds interval) : owner_(::getpid()), interval_(interval) {}

    void run() {
        for (;;) {
            std::this_thread::sleep_for(interval_);
            std::set<fs::path> files;
            {
                std::lock_guard lock(mu_);
                files = files_;
            }
            for (const auto& f : files) write_now(f);
        }
    }

    pid_t owner_;
    std::chrono::milliseconds interval_;
    std::mutex mu_;
    std::set<fs::path> files_;
};

// Lock files are released without the guard, so one may vanish between listing and reading.
Json read_lock_doc(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return Json();
    std::ostringstream text;
    text << in.rdbuf();
    return Json::parse(text.str(), nullptr, false);
}

fs::path heartbeat_file(const Layout& layout, const std::string& host, int pid) {
    return layout.heartbeats() / (host + "-" + std::to_string(pid));
}

// ---- WAL replay helpers --------------------------------------------------------------------

OperationRecord record_from_wal(const std::vector<WalEntry>& entries, const fs::path& wal_path) {
    if (entries.empty() || entries.front().kind != "begin") {
        fail(ErrorKind::Internal, "WAL " + wal_path.string() + " has no begin entry");
    }
    const auto& b = entries.front().payload;
    OperationRecord rec;
    rec.op_id = b.at("op_id").get<std::string>();
    rec.author = b.at("author").get<std::string>();
    rec.op_type = parse_op_type(b.at("op_type").get<std::string>());
    rec.targets = targets_from_json(b.at("targets"));
    rec.state = OpState::Active;
    rec.wal_path = wal_path.string();
    rec.started_at = entries.front().ts;
    rec.subject = b.value("subject", Json::object());
    rec.pid = b.value("pid", 0);
    rec.host = b.value("host", std::string());
    if (b.contains("parent") && b["parent"].is_string()) rec.parent = b["parent"].get<std::string>();
    for (const auto& e : entries) {
        if (e.kind == "decision") {
            Decision d{e.ts, e.payload.value("author", std::string()), e.payload.value("action", std::string()),
                       e.payload.value("reason", std::string())};
            rec.decision_log.push_back(d);
            rec.state = parse_op_state(e.payload.value("state", std::string("active")));
            if (e.payload.contains("pid")) rec.pid = e.payload["pid"].get<int>();
            if (e.payload.contains("host")) rec.host = e.payload["host"].get<std::string>();
        } else if (e.kind == "commit_point") {
            rec.state = OpState::Committed;
        } else if (e.kind == "rollback_done") {
            rec.state = OpState::Reverted;
            rec.reason = e.payload.value("reason", std::string());
            rec.finished_at = e.ts;
        }
    }
    return rec;
}

bool file_contains_line(const fs::path& file, const std::string& line) {
    std::ifstream in(file);
    std::string l;
    while (std::getline(in, l)) {
        if (l == line) return true;
    }
    return false;
}

bool event_logged(const fs::path& log, const std::string& op_id, const std::string& kind) {
    std::ifstream in(log);
    std::string l;
    while (std::getline(in, l)) {
        if (l.find(op_id) == std::string::npos) continue;
        const auto j = Json::parse(l, nullptr, false);
        if (j.is_object() && j.value("op_id", std::string()) == op_id && j.value("event", std::string()) == kind) {
            return true;
        }
    }
    return false;
}

void rollback_writes(const Layout& layout, const std::string& op_id, const std::vector<WalEntry>& entries) {
    const auto work = layout.op_dir(op_id);
    std::set<std::string> seen;
    std::vector<const WalEntry*> firsts;
    for (const auto& e : entries) {
        if (e.kind != "file_write") continue;
        if (seen.insert(e.payload.at("path").get<std::string>()).second) firsts.push_back(&e);
    }
    for (auto it = firsts.rbegin(); it != firsts.rend(); ++it) {
        const auto& p = (*it)->payload;
        const auto rel = p.at("path").get<std::string>();
        const auto abs = layout.root / rel;
        const auto type = p.value("type", std::string("file"));
        const bool existed = p.value("existed", false);
        std::error_code ec;
        if (type == "owned_dir") {
            fs::remove_all(abs, ec);
        } else if (type == "dir") {
            if (!existed) fs::remove_all(abs, ec);
        } else if (existed) {
            const auto backup = work / "backup" / rel;
            if (fs::exists(backup)) {
                fs::create_directories(abs.parent_path(), ec);
                fs::rename(backup, abs, ec);
            }
        } else {
            fs::remove(abs, ec);
        }
        if (p.contains("created_dirs")) {
            const auto& dirs = p["created_dirs"];
            for (auto d = dirs.rbegin(); d != dirs.rend(); ++d) fs::remove_all(layout.root / d->get<std::string>(), ec);
        }
        fault::point("rollback.step");
    }
}

void roll_forward(const Layout& layout, const std::string& op_id, const std::vector<WalEntry>& entries,
                  bool recovering) {
    const auto work = layout.op_dir(op_id);
    for (const auto& e : entries) {
        std::error_code ec;
        if (e.kind == "remove_intent") {
            const auto abs = layout.root / e.payload.at("path").get<std::string>();
            if (fs::exists(abs)) {
                const auto trash = work / "trash" / std::to_string(e.seq);
                fs::create_directories(trash.parent_path(), ec);
                fs::rename(abs, trash, ec);
                if (ec) fs::remove_all(abs, ec);
            }
            fault::point("commit.remove");
        } else if (e.kind == "rename_intent") {
            const auto from = layout.root / e.payload.at("from").get<std::string>();
            const auto to = layout.root / e.payload.at("to").get<std::string>();
            if (fs::exists(from)) {
                fs::create_directories(to.parent_path(), ec);
                fs::rename(from, to, ec);
                if (ec) fail(ErrorKind::Io, "rename failed: " + ec.message());
            }
            fault::point("commit.rename");
        } else if (e.kind == "append_intent") {
            const auto file = layout.root / e.payload.at("file").get<std::string>();
            const auto line = e.payload.at("line").get<std::string>();
            fs::create_directories(file.parent_path(), ec);
            if (!recovering || !file_contains_line(file, line)) append_line_locked(file, line, true);
            fault::point("commit.append");
        }
    }
}

Json decisions_json(const std::vector<Decision>& log) {
    Json arr = Json::array();
    for (const auto& d : log) {
        arr.push_back({{"ts", d.timestamp}, {"author", d.author}, {"action", d.action}, {"reason", d.reason}});
    }
    return arr;
}

Json event_for(const OperationRecord& rec, const std::string& kind, const std::string& finished_at,
               const std::string& reason, const Json& extra) {
    Json ev = {{"format_version", 1},
               {"event", kind},
               {"op_id", rec.op_id},
               {"op_type", std::string(to_string(rec.op_type))},
               {"author", rec.author},
               {"targets", targets_json(rec.targets)},
               {"subject", rec.subject},
               {"started_at", rec.started_at},
               {"finished_at", finished_at},
               {"decision_log", decisions_json(rec.decision_log)}};
    if (!reason.empty()) ev["reason"] = reason;
    if (rec.parent) ev["parent"] = *rec.parent;
    for (const auto& [k, v] : extra.items()) ev[k] = v;
    return ev;
}

}  // namespace

// ---- records -------------------------------------------------------------------------

Json OperationRecord::to_json() const {
    Json j = {{"op_id", op_id},           {"author", author},
              {"op_type", std::string(to_string(op_type))},
              {"targets", targets_json(targets)},
              {"state", std::string(to_string(state))},
              {"wal_path", wal_path},     {"started_at", started_at},
              {"decision_log", decisions_json(decision_log)},
              {"subject", subject}};
    if (finished_at) j["finished_at"] = *finished_at;
    if (parent) j["parent"] = *parent;
    if (!reason.empty()) j["reason"] = reason;
    return j;
}

OperationRecord OperationRecord::from_json(const Json& j) {
    OperationRecord r;
    r.op_id = j.at("op_id").get<std::string>();
    r.author = j.value("author", std::string());
    r.op_type = parse_op_type(j.value("op_type", std::string("create_table")));
    if (j.contains("targets")) r.targets = targets_from_json(j["targets"]);
    r.state = parse_op_state(j.value("state", std::string("pending")));
    r.wal_path = j.value("wal_path", std::string());
    r.started_at = j.value("started_at", std::string());
    if (j.contains("finished_at")) r.finished_at = j["finished_at"].get<std::string>();
    if (j.contains("parent")) r.parent = j["parent"].get<std::string>();
    r.reason = j.value("reason", std::string());
    r.subject = j.value("subject", Json::object());
    if (j.contains("decision_log")) {
        for (const auto& d : j["decision_log"]) {
            r.decision_log.push_back({d.value("ts", std::string()), d.value("author", std::string()),
                                      d.value("action", std::string()), d.value("reason", std::string())});
        }
    }
    return r;
}

Json RecoveryReport::to_json() const {
    Json arr = Json::array();
    for (const auto& e : entries) {
        arr.push_back({{"op_id", e.op_id}, {"disposition", e.disposition}, {"torn_tail", e.torn_tail}});
    }
    return {{"format_version", 1}, {"operations", arr}, {"stale_locks_removed", stale_locks_removed}};
}

// ---- Operation ------------------------------------------------------------------------

struct Operation::State {
    OperationManager* mgr = nullptr;
    OperationRecord record;
    std::vector<WalEntry> entries;
    std::uint64_t next_seq = 1;
    int wal_fd = -1;
    std::set<std::string> known;  // paths with a file_write entry
    std::set<std::string> backed_up;
    bool finished = false;
    std::uint64_t staging_counter = 0;
    std::mutex mu;

    ~State() {
        if (wal_fd >= 0) ::close(wal_fd);
    }

    [[nodiscard]] fs::path work() const { return mgr->layout().op_dir(record.op_id); }
    [[nodiscard]] const fs::path& root() const { return mgr->layout().root; }

    void append(const std::string& kind, Json payload) {
        WalEntry e{next_seq++, kind, mgr->now_iso(), std::move(payload)};
        Json line = {{"seq", e.seq}, {"kind", e.kind}, {"ts", e.ts}, {"payload", e.payload}};
        auto text = line.dump();
        text.push_back('\n');
        const char* p = text.data();
        std::size_t left = text.size();
        while (left > 0) {
            const auto n = ::write(wal_fd, p, left);
            if (n < 0) {
                if (errno == EINTR) continue;
                fail(ErrorKind::Io, std::string("WAL write failed: ") + std::strerror(errno));
            }
            p += n;
            left -= static_cast<std::size_t>(n);
        }
        if (mgr->options().fsync) ::fsync(wal_fd);
        entries.push_back(std::move(e));
        fault::point("wal.append");
    }

    [[nodiscard]] bool in_scope(const std::string& rel) const {
        for (const auto& t : record.targets) {
            if (t.mode != LockMode::Exclusive) continue;
            std::vector<std::string> scopes{t.resource};
            if (starts_with(t.resource, "tables/")) scopes.push_back("metadata/archive/" + t.resource.substr(7));
            for (const auto& s : scopes) {
                if (rel == s || starts_with(rel, s + "/") || starts_with(rel, s + ".")) return true;
            }
        }
        return false;
    }

    std::string checked_rel(Operation& op, const fs::path& path) {
        std::string rel;
        try {
            rel = relative_within(root(), path);
        } catch (const Error&) {
            rel.clear();
        }
        if (rel.empty() || !in_scope(rel)) {
            const auto reason = "write outside locked scope: " + path.string();
            op.revert(reason);
            throw Error(ErrorKind::Scope, reason);
        }
        return rel;
    }

    void require_active() const {
        if (finished || record.state != OpState::Active) {
            fail(ErrorKind::State, "operation " + record.op_id + " is not active");
        }
    }
};

Operation::Operation(std::unique_ptr<State> state) : s_(std::move(state)) {}
Operation::Operation(Operation&&) noexcept = default;

Operation::~Operation() {
    if (!s_ || s_->finished || s_->record.state != OpState::Active) return;
    try {
        revert("operation aborted");
    } catch (...) {
    }
}

const std::string& Operation::id() const noexcept { return s_->record.op_id; }
const OperationRecord& Operation::record() const noexcept { return s_->record; }
OpState Operation::state() const noexcept { return s_->record.state; }
fs::path Operation::work_dir() const { return s_->work(); }

namespace {

std::vector<std::string> missing_dirs(const fs::path& root, const fs::path& dir) {
    std::vector<std::string> out;
    for (auto p = dir; !p.empty() && p != root && !fs::exists(p); p = p.parent_path()) {
        out.push_back(p.lexically_relative(root).generic_string());
    }
    std::reverse(out.begin(), out.end());
    return out;
}

}  // namespace

void Operation::stage_write(const fs::path& path, std::string_view bytes) {
    s_->require_active();
    const auto staging = s_->work() / "staging";
    fs::create_directories(staging);
    const auto tmp = staging / std::to_string(++s_->staging_counter);
    write_file_atomic(tmp, bytes, s_->mgr->options().fsync);
    stage_copy(tmp, path);
}

void Operation::stage_copy(const fs::path& source, const fs::path& path) {
    s_->require_active();
    auto& s = *s_;
    std::lock_guard lock(s.mu);
    const auto rel = s.checked_rel(*this, path);
    const auto abs = s.root() / rel;
    const bool first = !s.known.count(rel);
    const bool existed = fs::exists(abs);
    if (first && existed && !s.backed_up.count(rel)) {
        const auto backup = s.work() / "backup" / rel;
        fs::create_directories(backup.parent_path());
        link_or_copy(abs, backup);
        s.append("backup_link", {{"path", rel}});
        s.backed_up.insert(rel);
    }
    // Fresh inode; the original stays reachable through the backup link.
    fs::path staged = source;
    if (!starts_with(source.lexically_normal().string(), (s.work() / "staging").lexically_normal().string())) {
        const auto staging = s.work() / "staging";
        fs::create_directories(staging);
        staged = staging / std::to_string(++s.staging_counter);
        fs::copy_file(source, staged, fs::copy_options::overwrite_existing);
        if (s.mgr->options().fsync) fsync_path(staged);
    }
    const auto created = missing_dirs(s.root(), abs.parent_path());
    s.append("file_write", {{"path", rel},
                            {"type", "file"},
                            {"digest", sha256_file(staged)},
                            {"existed", first ? existed : true},
                            {"created_dirs", created}});
    s.known.insert(rel);
    fs::create_directories(abs.parent_path());
    fs::rename(staged, abs);
    if (s.mgr->options().fsync) fsync_parent(abs);
    fault::point("stage.rename");
}

void Operation::stage_mkdir(const fs::path& dir) {
    s_->require_active();
    auto& s = *s_;
    std::lock_guard lock(s.mu);
    const auto rel = s.checked_rel(*this, dir);
    const auto abs = s.root() / rel;
    if (fs::is_directory(abs)) return;
    const auto created = missing_dirs(s.root(), abs.parent_path());
    s.append("file_write", {{"path", rel}, {"type", "dir"}, {"existed", false}, {"created_dirs", created}});
    s.known.insert(rel);
    fs::create_directories(abs);
    if (s.mgr->options().fsync) fsync_parent(abs);
    fault::point("stage.mkdir");
}

void Operation::stage_owned_dir(const fs::path& dir) {
    s_->require_active();
    auto& s = *s_;
    std::lock_guard lock(s.mu);
    const auto rel = s.checked_rel(*this, dir);
    const auto abs = s.root() / rel;
    if (fs::exists(abs)) fail(ErrorKind::State, "owned directory already exists: " + rel);
    const auto created = missing_dirs(s.root(), abs.parent_path());
    s.append("file_write", {{"path", rel}, {"type", "owned_dir"}, {"existed", false}, {"created_dirs", created}});
    s.known.insert(rel);
    fs::create_directories(abs);
    fault::point("stage.owned_dir");
}

void Operation::defer_remove(const fs::path& path) {
    s_->require_active();
    std::lock_guard lock(s_->mu);
    const auto rel = s_->checked_rel(*this, path);
    s_->append("remove_intent", {{"path", rel}});
}

void Operation::defer_rename(const fs::path& from, const fs::path& to) {
    s_->require_active();
    std::lock_guard lock(s_->mu);
    // The source may live in the private work area.
    const auto work = s_->work();
    std::string from_rel;
    if (starts_with(from.lexically_normal().string(), work.lexically_normal().string())) {
        from_rel = relative_within(s_->root(), from);
    } else {
        from_rel = s_->checked_rel(*this, from);
    }
    const auto to_rel = s_->checked_rel(*this, to);
    if (s_->mgr->options().fsync && fs::is_regular_file(from)) fsync_path(from);
    s_->append("rename_intent", {{"from", from_rel}, {"to", to_rel}});
}

void Operation::defer_append(const fs::path& file, const std::string& line) {
    s_->require_active();
    std::lock_guard lock(s_->mu);
    const auto rel = relative_within(s_->root(), file);
    if (!starts_with(rel, "metadata/")) {
        const auto reason = "deferred appends are limited to metadata: " + rel;
        revert(reason);
        throw Error(ErrorKind::Scope, reason);
    }
    s_->append("append_intent", {{"file", rel}, {"line", line}});
}

void Operation::commit(const std::vector<Check>& checks, const Json& event_extra) {
    s_->require_active();
    auto& s = *s_;
    for (const auto& check : checks) {
        std::optional<std::string> failure;
        try {
            failure = check();
        } catch (const Error& e) {
            failure = e.what();
        }
        if (failure) {
            revert(*failure);
            throw Error(ErrorKind::Reverted, *failure);
        }
    }
    s.append("validation_pass", Json::object());
    const auto finished = s.mgr->now_iso();
    s.record.finished_at = finished;
    const auto event = event_for(s.record, "committed", finished, "", event_extra);
    s.append("commit_point", {{"event", event}});
    s.record.state = OpState::Committed;
    s.finished = true;

    const auto& layout = s.mgr->layout();
    roll_forward(layout, s.record.op_id, s.entries, false);
    s.mgr->release_locks(s.record.op_id);
    fault::point("commit.locks_released");
    std::error_code ec;
    fs::remove_all(s.work(), ec);
    fault::point("commit.workdir_removed");
    append_line_locked(layout.completed_log(), event.dump(), s.mgr->options().fsync);
    fault::point("commit.logged");
    ::close(s.wal_fd);
    s.wal_fd = -1;
    fs::remove(layout.wal_file(s.record.op_id), ec);
}

void Operation::revert(const std::string& reason) {
    auto& s = *s_;
    if (s.finished) return;
    const auto& layout = s.mgr->layout();
    rollback_writes(layout, s.record.op_id, s.entries);
    s.append("rollback_done", {{"reason", reason}});
    s.record.state = OpState::Reverted;
    s.record.reason = reason;
    s.finished = true;
    s.mgr->release_locks(s.record.op_id);
    fault::point("revert.locks_released");
    std::error_code ec;
    fs::remove_all(s.work(), ec);
    const auto finished = s.mgr->now_iso();
    s.record.finished_at = finished;
    append_line_locked(layout.completed_log(), event_for(s.record, "reverted", finished, reason, {}).dump(),
                       s.mgr->options().fsync);
    fault::point("revert.logged");
    ::close(s.wal_fd);
    s.wal_fd = -1;
    fs::remove(layout.wal_file(s.record.op_id), ec);
}

void Operation::pause(const std::string& author, const std::string& reason) {
    s_->require_active();
    std::error_code ec;
    fs::remove(s_->work() / "control.json", ec);
    s_->append("decision", {{"action", "pause"}, {"author", author}, {"state", "paused"}, {"reason", reason}});
    s_->record.state = OpState::Paused;
    s_->record.decision_log.push_back({s_->entries.back().ts, author, "pause", reason});
    s_->finished = true;  // detached: the handle no longer drives the operation
}

Control Operation::poll_control() const {
    const auto file = s_->work() / "control.json";
    if (!fs::exists(file)) return Control::None;
    const auto j = Json::parse(read_file(file), nullptr, false);
    if (!j.is_object()) return Control::None;
    const auto action = j.value("action", std::string());
    if (action == "pause") return Control::Pause;
    if (action == "stop") return Control::Stop;
    if (action == "stop_commit") return Control::StopCommit;
    return Control::None;
}

void Operation::acknowledge_stop(const std::string& author) {
    s_->require_active();
    std::error_code ec;
    fs::remove(s_->work() / "control.json", ec);
    s_->append("decision", {{"action", "stop"}, {"author", author}, {"state", "active"}});
    s_->record.decision_log.push_back({s_->entries.back().ts, author, "stop", ""});
}

// ---- OperationManager ----------------------------------------------------------------

OperationManager::OperationManager(Layout layout, std::shared_ptr<Environment> env, ExecOptions options)
    : layout_(std::move(layout)), env_(std::move(env)), options_(options) {}

OperationManager::~OperationManager() = default;

std::string OperationManager::now_iso() const { return iso8601(env_->now()); }

void OperationManager::touch_heartbeat() {
    fs::create_directories(layout_.heartbeats());
    Heartbeat::touch(heartbeat_file(layout_, hostname(), ::getpid()), options_.heartbeat_interval);
}

Operation OperationManager::begin(const std::string& author, OpType type, std::vector<LockTarget> targets,
                                  const std::vector<fs::path>& protect, Json subject) {
    if (author.empty()) fail(ErrorKind::Validation, "an author is required");
    std::sort(targets.begin(), targets.end(), [](const LockTarget& a, const LockTarget& b) {
        return a.resource < b.resource || (a.resource == b.resource && a.mode > b.mode);
    });
    targets.erase(std::unique(targets.begin(), targets.end(),
                              [](const LockTarget& a, const LockTarget& b) { return a.resource == b.resource; }),
                  targets.end());

    touch_heartbeat();
    auto state = std::make_unique<Operation::State>();
    state->mgr = this;
    auto& rec = state->record;
    rec.op_id = make_operation_id(*env_);
    rec.author = author;
    rec.op_type = type;
    rec.targets = targets;
    rec.state = OpState::Active;
    rec.subject = std::move(subject);
    rec.pid = ::getpid();
    rec.host = hostname();
    if (is_operation_id(author)) rec.parent = author;
    rec.wal_path = layout_.wal_file(rec.op_id).string();

    // The WAL appears under its final name only once it holds the begin entry,
    // so recover() never sees an empty log of a live operation.
    fs::create_directories(layout_.active_log());
    const auto wal_tmp = rec.wal_path + ".tmp";
    state->wal_fd = ::open(wal_tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_APPEND | O_CLOEXEC, 0644);
    if (state->wal_fd < 0) fail(ErrorKind::Io, "cannot create WAL " + rec.wal_path);
    Json begin = {{"op_id", rec.op_id},
                  {"author", author},
                  {"op_type", std::string(to_string(type))},
                  {"targets", targets_json(targets)},
                  {"subject", rec.subject},
                  {"pid", rec.pid},
                  {"host", rec.host}};
    if (rec.parent) begin["parent"] = *rec.parent;
    state->append("begin", std::move(begin));
    rec.started_at = state->entries.front().ts;
    fs::rename(wal_tmp, rec.wal_path);
    if (options_.fsync) fsync_path(layout_.active_log());
    fs::create_directories(layout_.op_dir(rec.op_id));

    Operation op(std::move(state));
    try {
        acquire_locks(rec.op_id, targets);
    } catch (const Error&) {
        // Nothing was acquired or written; drop the operation without a log event.
        auto& s = *op.s_;
        s.finished = true;
        ::close(s.wal_fd);
        s.wal_fd = -1;
        std::error_code ec;
        fs::remove(rec.wal_path, ec);
        fs::remove_all(layout_.op_dir(rec.op_id), ec);
        throw;
    }
    auto& s = *op.s_;
    for (const auto& p : protect) {
        if (!fs::is_regular_file(p)) continue;
        const auto rel = relative_within(layout_.root, p);
        const auto backup = layout_.op_dir(rec.op_id) / "backup" / rel;
        fs::create_directories(backup.parent_path());
        link_or_copy(p, backup);
        s.append("backup_link", {{"path", rel}});
        s.backed_up.insert(rel);
    }
    return op;
}

void OperationManager::acquire_locks(const std::string& op_id, std::vector<LockTarget>& targets) {
    if (targets.empty()) return;
    fs::create_directories(layout_.locks());
    const auto deadline = std::chrono::steady_clock::now() + options_.lock_timeout;
    auto backoff = std::chrono::milliseconds(1);
    for (;;) {
        std::string blocker;
        {
            FileLock guard(layout_.locks() / ".guard");
            for (const auto& entry : fs::directory_iterator(layout_.locks())) {
                if (entry.path().extension() != ".lock") continue;
                const auto doc = read_lock_doc(entry.path());
                if (!doc.is_object()) continue;
                const auto holder = doc.value("holder", std::string());
                if (holder == op_id) continue;
                if (!fs::exists(layout_.wal_file(holder))) {
                    std::error_code ec;
                    fs::remove(entry.path(), ec);
                    continue;
                }
                const LockTarget held{doc.value("target", std::string()),
                                      doc.value("mode", std::string()) == "shared" ? LockMode::Shared
                                                                                    : LockMode::Exclusive};
                for (const auto& t : targets) {
                    if (conflicts(t, held)) blocker = held.resource + " held by " + holder;
                }
                if (!blocker.empty()) break;
            }
            if (blocker.empty()) {
                const auto now = now_iso();
                for (const auto& t : targets) {
                    const Json doc = {{"format_version", 1},
                                      {"holder", op_id},
                                      {"mode", std::string(to_string(t.mode))},
                                      {"acquired_at", now},
                                      {"target", t.resource}};
                    write_file_atomic(layout_.locks() / lock_file_name(t.resource, op_id), doc.dump(),
                                      options_.fsync);
                    fault::point("lock.write");
                }
                return;
            }
        }
        if (std::chrono::steady_clock::now() >= deadline) {
            fail(ErrorKind::Busy, "lock timeout: " + blocker);
        }
        std::this_thread::sleep_for(backoff);
        backoff = std::min(backoff * 2, std::chrono::milliseconds(50));
    }
}

void OperationManager::release_locks(const std::string& op_id) {
    std::error_code ec;
    if (!fs::exists(layout_.locks())) return;
    const auto suffix = "~" + op_id + ".lock";
    for (const auto& entry : fs::directory_iterator(layout_.locks(), ec)) {
        const auto name = entry.path().filename().string();
        if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
            fs::remove(entry.path(), ec);
        }
    }
    if (options_.fsync) fsync_path(layout_.locks());
}

std::vector<WalEntry> OperationManager::read_wal(const fs::path& path, bool* torn) {
    std::vector<WalEntry> out;
    const auto text = read_file(path);
    std::size_t pos = 0;
    std::size_t valid_end = 0;
    bool damaged = false;
    while (pos < text.size()) {
        const auto nl = text.find('\n', pos);
        if (nl == std::string::npos) {
            damaged = true;
            break;
        }
        const auto j = Json::parse(text.substr(pos, nl - pos), nullptr, false);
        if (!j.is_object() || !j.contains("kind")) {
            damaged = true;
            break;
        }
        out.push_back({j.value("seq", std::uint64_t{0}), j.value("kind", std::string()), j.value("ts", std::string()),
                       j.value("payload", Json::object())});
        pos = nl + 1;
        valid_end = pos;
    }
    if (torn) *torn = damaged;
    if (damaged) {
        // Truncate the torn tail so later appends start on a clean line.
        if (::truncate(path.c_str(), static_cast<off_t>(valid_end)) != 0) {
            fail(ErrorKind::Io, "cannot truncate torn WAL " + path.string());
        }
    }
    return out;
}

bool OperationManager::holder_alive(const OperationRecord& rec) const {
    if (rec.pid <= 0) return false;
    if (rec.host == hostname()) {
        if (::kill(rec.pid, 0) != 0 && errno == ESRCH) return false;
    }
    const auto hb = heartbeat_file(layout_, rec.host, rec.pid);
    std::error_code ec;
    const auto mtime = fs::last_write_time(hb, ec);
    if (ec) return false;
    const auto age = fs::file_time_type::clock::now() - mtime;
    return age < options_.stale_after;
}

RecoveryReport OperationManager::recover() {
    RecoveryReport report;
    fs::create_directories(layout_.metadata());
    FileLock guard(layout_.metadata() / "recovery.lock");
    std::vector<fs::path> wals;
    if (fs::exists(layout_.active_log())) {
        for (const auto& e : fs::directory_iterator(layout_.active_log())) {
            if (e.path().extension() == ".wal") wals.push_back(e.path());
        }
    }
    std::sort(wals.begin(), wals.end());
    if (fs::exists(layout_.active_log())) {
        // A begin that died before publishing its WAL; young ones may still be in flight.
        std::error_code ec;
        for (const auto& e : fs::directory_iterator(layout_.active_log(), ec)) {
            if (e.path().extension() != ".tmp") continue;
            const auto age = fs::file_time_type::clock::now() - fs::last_write_time(e.path(), ec);
            if (!ec && age > options_.stale_after) fs::remove(e.path(), ec);
        }
    }
    for (const auto& wal : wals) {
        bool torn = false;
        auto entries = read_wal(wal, &torn);
        const auto op_id = wal.stem().string();
        if (entries.empty() || entries.front().kind != "begin") {
            // Crashed before the begin entry became durable.
            std::error_code ec;
            release_locks(op_id);
            fs::remove_all(layout_.op_dir(op_id), ec);
            fs::remove(wal, ec);
            report.entries.push_back({op_id, "rolled_back", torn});
            continue;
        }
        auto rec = record_from_wal(entries, wal);
        if (rec.state == OpState::Paused) {
            report.entries.push_back({op_id, "left_paused", torn});
            continue;
        }
        if (rec.state == OpState::Active && holder_alive(rec)) continue;

        std::error_code ec;
        if (rec.state == OpState::Committed) {
            roll_forward(layout_, op_id, entries, true);
            release_locks(op_id);
            fs::remove_all(layout_.op_dir(op_id), ec);
            if (!event_logged(layout_.completed_log(), op_id, "committed")) {
                const auto it = std::find_if(entries.begin(), entries.end(),
                                             [](const WalEntry& e) { return e.kind == "commit_point"; });
                append_line_locked(layout_.completed_log(), it->payload.at("event").dump(), options_.fsync);
            }
            fs::remove(wal, ec);
            report.entries.push_back({op_id, "rolled_forward", torn});
            continue;
        }
        std::string reason = rec.reason;
        if (rec.state != OpState::Reverted) {
            rollback_writes(layout_, op_id, entries);
            reason = "recovered after crash";
            rec.reason = reason;
        }
        release_locks(op_id);
        fs::remove_all(layout_.op_dir(op_id), ec);
        if (!event_logged(layout_.completed_log(), op_id, "reverted")) {
            auto ev = event_for(rec, "reverted", now_iso(), reason, {{"recovered", true}});
            append_line_locked(layout_.completed_log(), ev.dump(), options_.fsync);
        }
        fs::remove(wal, ec);
        report.entries.push_back({op_id, rec.state == OpState::Reverted ? "cleaned_up" : "rolled_back", torn});
    }
    // Locks and work areas whose operation no longer has a WAL.
    std::error_code ec;
    if (fs::exists(layout_.locks())) {
        FileLock lock_guard(layout_.locks() / ".guard");
        for (const auto& e : fs::directory_iterator(layout_.locks(), ec)) {
            if (e.path().extension() != ".lock") continue;
            const auto doc = read_lock_doc(e.path());
            if (doc.is_null()) continue;  // released meanwhile
            const auto holder = doc.is_object() ? doc.value("holder", std::string()) : std::string();
            if (holder.empty() || !fs::exists(layout_.wal_file(holder))) {
                fs::remove(e.path(), ec);
                ++report.stale_locks_removed;
            }
        }
    }
    if (fs::exists(layout_.ops())) {
        for (const auto& e : fs::directory_iterator(layout_.ops(), ec)) {
            if (!fs::exists(layout_.wal_file(e.path().filename().string()))) fs::remove_all(e.path(), ec);
        }
    }
    return report;
}

Operation OperationManager::resume(const std::string& op_id, const std::string& caller,
                                   const std::string& action) {
    const auto wal = layout_.wal_file(op_id);
    if (!fs::exists(wal)) fail(ErrorKind::NotFound, "no active operation " + op_id);
    FileLock guard(layout_.op_dir(op_id) / ".driver");
    auto entries = read_wal(wal);
    auto rec = record_from_wal(entries, wal);
    if (!is_authorized(rec, caller)) fail(ErrorKind::AccessDenied, caller + " may not resume " + op_id);
    if (rec.state != OpState::Paused) fail(ErrorKind::State, "operation " + op_id + " is not paused");

    touch_heartbeat();
    auto state = std::make_unique<Operation::State>();
    state->mgr = this;
    state->record = rec;
    state->entries = std::move(entries);
    state->next_seq = state->entries.empty() ? 1 : state->entries.back().seq + 1;
    for (const auto& e : state->entries) {
        if (e.kind == "file_write") state->known.insert(e.payload.at("path").get<std::string>());
        if (e.kind == "backup_link") state->backed_up.insert(e.payload.at("path").get<std::string>());
    }
    const auto staging = layout_.op_dir(op_id) / "staging";
    if (fs::exists(staging)) {
        for (const auto& f : fs::directory_iterator(staging)) {
            const auto n = std::strtoull(f.path().filename().c_str(), nullptr, 10);
            state->staging_counter = std::max<std::uint64_t>(state->staging_counter, n);
        }
    }
    state->wal_fd = ::open(wal.c_str(), O_WRONLY | O_APPEND | O_CLOEXEC);
    if (state->wal_fd < 0) fail(ErrorKind::Io, "cannot open WAL " + wal.string());
    const int pid = ::getpid();
    const auto host = hostname();
    state->append("decision",
                  {{"action", action}, {"author", caller}, {"state", "active"}, {"pid", pid}, {"host", host}});
    state->record.state = OpState::Active;
    state->record.pid = pid;
    state->record.host = host;
    state->record.decision_log.push_back({state->entries.back().ts, caller, action, ""});
    return Operation(std::move(state));
}

void OperationManager::stop_paused(const std::string& op_id, const std::string& caller) {
    auto op = resume(op_id, caller, "stop");
    op.revert("stopped by " + caller);
}

void OperationManager::request(const std::string& op_id, const std::string& caller, Control control) {
    auto rec = find(op_id);
    if (!rec) fail(ErrorKind::NotFound, "no operation " + op_id);
    if (!is_authorized(*rec, caller)) fail(ErrorKind::AccessDenied, caller + " may not control " + op_id);
    if (rec->state != OpState::Active) {
        fail(ErrorKind::State, "operation " + op_id + " is " + std::string(to_string(rec->state)));
    }
    if (!holder_alive(*rec)) fail(ErrorKind::State, "operation " + op_id + " has no live driver; run recover");
    std::string action = control == Control::Pause ? "pause" : control == Control::Stop ? "stop" : "stop_commit";
    write_file_atomic(layout_.op_dir(op_id) / "control.json",
                      Json{{"action", action}, {"author", caller}, {"ts", now_iso()}}.dump(), options_.fsync);
    const auto deadline = std::chrono::steady_clock::now() + options_.lock_timeout;
    while (std::chrono::steady_clock::now() < deadline) {
        auto now = find(op_id);
        if (!now || now->state != OpState::Active) return;
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    std::error_code ec;
    fs::remove(layout_.op_dir(op_id) / "control.json", ec);
    fail(ErrorKind::Busy, "operation " + op_id + " did not acknowledge the request");
}

std::optional<OperationRecord> OperationManager::find(const std::string& op_id) const {
    const auto wal = layout_.wal_file(op_id);
    if (fs::exists(wal)) {
        try {
            return record_from_wal(read_wal(wal), wal);
        } catch (const Error&) {
            // WAL removed or torn between exists() and read
        }
    }
    std::optional<OperationRecord> found;
    for (const auto& ev : completed_events()) {
        if (ev.value("op_id", std::string()) != op_id) continue;
        const auto kind = ev.value("event", std::string());
        if (kind != "committed" && kind != "reverted") continue;
        auto rec = OperationRecord::from_json(ev);
        rec.state = kind == "committed" ? OpState::Committed : OpState::Reverted;
        found = rec;
    }
    return found;
}

std::vector<OperationRecord> OperationManager::list_active() const {
    std::vector<OperationRecord> out;
    if (!fs::exists(layout_.active_log())) return out;
    for (const auto& e : fs::directory_iterator(layout_.active_log())) {
        if (e.path().extension() != ".wal") continue;
        try {
            out.push_back(record_from_wal(read_wal(e.path()), e.path()));
        } catch (const Error&) {
        }
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.op_id < b.op_id; });
    return out;
}

std::vector<Json> OperationManager::completed_events() const {
    std::vector<Json> out;
    std::ifstream in(layout_.completed_log());
    std::string line;
    while (std::getline(in, line)) {
        auto j = Json::parse(line, nullptr, false);
        if (j.is_object()) out.push_back(std::move(j));
    }
    return out;
}

void OperationManager::append_event(Json event) {
    if (!event.contains("format_version")) event["format_version"] = 1;
    if (!event.contains("ts")) event["ts"] = now_iso();
    append_line_locked(layout_.completed_log(), event.dump(), options_.fsync);
}

std::vector<std::string> OperationManager::author_chain(const std::string& author) const {
    std::vector<std::string> chain;
    std::string current = author;
    for (int depth = 0; depth < 64; ++depth) {
        chain.push_back(current);
        if (!is_operation_id(current)) break;
        auto rec = find(current);
        if (!rec) break;
        current = rec->author;
    }
    return chain;
}

bool OperationManager::is_authorized(const OperationRecord& record, const std::string& caller) const {
    const auto chain = author_chain(record.author);
    return std::find(chain.begin(), chain.end(), caller) != chain.end();
}

}  // namespace tablevault::ops
