#include "tablevault/repository.hpp"

#include <algorithm>
#include <fstream>

#include "repository_impl.hpp"
#include "tablevault/error.hpp"
#include "tablevault/fault.hpp"
#include "tablevault/yaml_json.hpp"

namespace tablevault {

using ops::LockMode;
using ops::OpType;

Json Receipt::to_json() const {
    Json j = {{"format_version", 1}, {"op_id", op_id}, {"op_type", op_type}, {"state", state}};
    if (!table.empty()) j["table"] = table;
    if (instance) j["instance"] = *instance;
    if (!archived.empty()) j["archived"] = archived;
    if (path) j["path"] = *path;
    return j;
}

Json InstanceInfo::to_json() const {
    return {{"id", id},         {"status", status},         {"author", author},
            {"external", external}, {"created_at", created_at}, {"op_id", op_id}};
}

// ---- detail ----------------------------------------------------------------------------

namespace detail {

bool is_committed(const Layout& layout, const std::string& table, const std::string& instance) {
    return is_instance_id(instance) && fs::exists(layout.instance_dir(table, instance) / "lineage.yaml");
}

bool table_exists(const Layout& layout, const std::string& table) {
    return is_valid_table_name(table) && fs::exists(layout.table_dir(table) / "description.yaml");
}

Json instance_meta(const Layout& layout, const std::string& table, const std::string& instance) {
    const auto file = layout.instance_dir(table, instance) / "description.yaml";
    std::error_code ec;
    if (!fs::exists(file, ec)) return Json::object();
    try {
        return load_yaml_file(file);
    } catch (const Error&) {
        return Json::object();  // removed between exists() and read
    }
}

std::vector<std::string> instance_ids(const Layout& layout, const std::string& table) {
    std::vector<std::string> out;
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(layout.table_dir(table), ec)) {
        const auto name = e.path().filename().string();
        if (is_instance_id(name)) out.push_back(name);
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::optional<std::string> pending_instance(const Layout& layout, const std::string& table, bool external) {
    auto ids = instance_ids(layout, table);
    for (auto it = ids.rbegin(); it != ids.rend(); ++it) {
        if (is_committed(layout, table, *it)) continue;
        const auto meta = instance_meta(layout, table, *it);
        if (meta.value("external", false) == external) return *it;
    }
    return std::nullopt;
}

bool may_act_for(const ops::OperationManager& ops, const std::string& owner, const std::string& caller) {
    if (caller.empty()) return false;
    const auto chain = ops.author_chain(owner);
    return std::find(chain.begin(), chain.end(), caller) != chain.end();
}

void stage_lineage(ops::Operation& op, const Layout& layout, const lineage::LineageRecord& record) {
    const auto staged = op.work_dir() / "lineage.yaml";
    write_file_atomic(staged, to_yaml(record.to_json()), true);
    op.defer_rename(staged, layout.instance_dir(record.table, record.instance) / "lineage.yaml");
    op.defer_append(layout.reverse_index(record.table, record.instance),
                    lineage::index_header(record.table, record.instance).dump());
    for (const auto& e : record.edges) {
        const lineage::DownstreamEntry entry{record.table, record.instance, e.sink_slot};
        op.defer_append(layout.reverse_index(e.source.table, e.source.instance),
                        lineage::to_index_line(entry).dump());
    }
}

std::vector<std::string> author_chain(const ops::OperationManager& ops, const std::string& op_id,
                                      const std::string& author) {
    std::vector<std::string> chain{op_id};
    for (auto& a : ops.author_chain(author)) chain.push_back(std::move(a));
    return chain;
}

void require_valid_author(const std::string& author) {
    if (author.empty()) fail(ErrorKind::Validation, "an author is required for this operation");
    for (const unsigned char c : author) {
        if (c < 0x20 || c == 0x7f) fail(ErrorKind::Validation, "author contains control characters");
    }
    if (author.rfind("op-", 0) == 0 && !is_operation_id(author)) {
        fail(ErrorKind::Validation, "author '" + author + "' looks like a malformed operation id");
    }
}

}  // namespace detail

namespace {

/// Runs `body`; on failure reverts the still-active operation with the error text.
template <typename F>
void guarded(ops::Operation& op, F&& body) {
    try {
        body();
    } catch (const Error& e) {
        if (op.state() == ops::OpState::Active) op.revert(e.what());
        throw;
    } catch (const std::exception& e) {
        if (op.state() == ops::OpState::Active) op.revert(e.what());
        throw Error(ErrorKind::Internal, e.what());
    }
}

void require_table_name(const std::string& name) {
    if (!is_valid_table_name(name)) {
        fail(ErrorKind::Validation, "invalid table name '" + name + "' (expected [a-z][a-z0-9_-]*, at most 128 chars)");
    }
}

void require_table(const Layout& layout, const std::string& table) {
    require_table_name(table);
    if (!detail::table_exists(layout, table)) fail(ErrorKind::NotFound, "no table '" + table + "'");
}

std::string yaml_doc(Json doc) {
    doc["format_version"] = 1;
    return to_yaml(doc);
}

void copy_tree_into(const fs::path& from, const fs::path& to) {
    fs::create_directories(to);
    for (const auto& e : fs::recursive_directory_iterator(from)) {
        const auto rel = e.path().lexically_relative(from);
        if (e.is_directory()) {
            fs::create_directories(to / rel);
        } else if (e.is_regular_file()) {
            fs::create_directories((to / rel).parent_path());
            fs::copy_file(e.path(), to / rel, fs::copy_options::overwrite_existing);
        }
    }
}

/// Stages copies of an instance's metadata files into the archive mirror.
void stage_archive(ops::Operation& op, const Layout& layout, const std::string& table, const std::string& instance,
                   const std::string& author, const std::string& when) {
    const auto dir = layout.instance_dir(table, instance);
    const auto dest = layout.archive_instance(table, instance);
    for (const auto* name : {"lineage.yaml", "description.yaml", "schema.yaml"}) {
        if (fs::exists(dir / name)) op.stage_copy(dir / name, dest / name);
    }
    for (const auto* sub : {"builders", "code"}) {
        if (!fs::exists(dir / sub)) continue;
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(dir / sub)) {
            if (e.is_regular_file()) files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) op.stage_copy(f, dest / f.lexically_relative(dir));
    }
    std::string digest;
    if (fs::exists(dir / "data.csv")) digest = instance_digest(read_file(dir / "data.csv"), dir / "artifacts");
    Json archive = {{"table", table},        {"instance", instance}, {"archived_at", when},
                    {"archived_by", author}, {"op_id", op.id()},     {"data_digest", digest}};
    op.stage_write(dest / "archive.yaml", yaml_doc(archive));
}

}  // namespace

std::vector<std::string> api_operations() {
    return {"init_repository",  "create_table",       "delete_table",     "list_tables",
            "create_instance",  "delete_instance",    "list_instances",   "instance_info",
            "create_builder_file", "builder_path",    "load_builder",     "create_code_module",
            "list_code_modules", "execute_instance",  "write_instance",   "get_dataframe",
            "query_metadata",   "trace",              "list_operations",  "operation_status",
            "pause",            "resume",             "stop",             "recover"};
}

// ---- committed view ----------------------------------------------------------------------

TabularData read_frame(const fs::path& dir) {
    const auto schema = load_yaml_file(dir / "schema.yaml");
    auto [columns, pk] = TabularData::schema_from_json(schema);
    return TabularData::from_csv(read_file(dir / "data.csv"), columns, pk);
}

std::string CommittedView::latest_instance(const std::string& table) const {
    if (!detail::table_exists(layout_, table)) fail(ErrorKind::Resolve, "unknown table '" + table + "'");
    auto ids = detail::instance_ids(layout_, table);
    for (auto it = ids.rbegin(); it != ids.rend(); ++it) {
        if (detail::is_committed(layout_, table, *it)) return *it;
    }
    fail(ErrorKind::Resolve, "table '" + table + "' has no committed instance");
}

bool CommittedView::has_instance(const std::string& table, const std::string& instance) const {
    return detail::is_committed(layout_, table, instance);
}

std::shared_ptr<const TabularData> CommittedView::frame(const std::string& table, const std::string& instance) const {
    const auto key = std::make_pair(table, instance);
    {
        std::lock_guard lock(mu_);
        if (auto it = cache_.find(key); it != cache_.end()) return it->second;
    }
    if (!has_instance(table, instance)) {
        fail(ErrorKind::Resolve, "no committed instance " + table + "@" + instance);
    }
    std::shared_ptr<const TabularData> data;
    try {
        data = std::make_shared<const TabularData>(read_frame(layout_.instance_dir(table, instance)));
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::NotFound) fail(ErrorKind::Resolve, "instance " + table + "@" + instance + " was deleted");
        throw;
    }
    std::lock_guard lock(mu_);
    cache_.emplace(key, data);
    return data;
}

fs::path CommittedView::artifact_dir(const std::string& table, const std::string& instance) const {
    return layout_.instance_dir(table, instance) / "artifacts";
}

Json CommittedView::metadata(const std::string& table, const std::string& instance, const std::string& facet) const {
    try {
        auto doc = instance_facet(layout_, table, instance, facet);
        if (facet == "description" && doc.is_object()) return doc.value("description", std::string());
        return doc;
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::NotFound) fail(ErrorKind::Resolve, e.detail());
        throw;
    }
}

Json instance_facet(const Layout& layout, const std::string& table, const std::string& instance,
                    const std::string& facet) {
    const auto dir = lineage::metadata_dir(layout, table, instance);
    if (!dir) fail(ErrorKind::NotFound, "no instance " + table + "@" + instance);
    const auto head = facet.substr(0, facet.find('.'));
    const auto rest = facet.find('.') == std::string::npos ? std::string() : facet.substr(facet.find('.') + 1);
    if (head == "description" && rest.empty()) {
        return fs::exists(*dir / "description.yaml") ? load_yaml_file(*dir / "description.yaml") : Json::object();
    }
    if (head == "lineage" && rest.empty()) {
        if (!fs::exists(*dir / "lineage.yaml")) fail(ErrorKind::NotFound, table + "@" + instance + " has no lineage yet");
        return load_yaml_file(*dir / "lineage.yaml");
    }
    if (head == "ingestion" && rest.empty()) {
        if (!fs::exists(*dir / "lineage.yaml")) return nullptr;
        const auto doc = load_yaml_file(*dir / "lineage.yaml");
        return doc.contains("ingestion") ? doc["ingestion"] : Json(nullptr);
    }
    if (head == "builders") {
        const auto bdir = *dir / "builders";
        if (!rest.empty()) {
            const auto file = bdir / (rest + ".yaml");
            if (!fs::exists(file)) fail(ErrorKind::NotFound, "no builder '" + rest + "' in " + table + "@" + instance);
            return read_file(file);
        }
        Json out = Json::object();
        std::error_code ec;
        for (const auto& e : fs::directory_iterator(bdir, ec)) {
            if (e.path().extension() == ".yaml") out[e.path().stem().string()] = read_file(e.path());
        }
        return out;
    }
    if (head == "code" && rest.empty()) {
        Json out = Json::object();
        const auto cdir = *dir / "code";
        if (fs::exists(cdir)) {
            for (const auto& e : fs::recursive_directory_iterator(cdir)) {
                if (e.is_regular_file()) out[e.path().lexically_relative(cdir).generic_string()] = read_file(e.path());
            }
        }
        return out;
    }
    if (head == "operations" && rest.empty()) {
        Json out = Json::array();
        std::ifstream in(layout.completed_log());
        std::string line;
        while (std::getline(in, line)) {
            const auto ev = Json::parse(line, nullptr, false);
            if (!ev.is_object() || !ev.contains("subject")) continue;
            const auto& s = ev["subject"];
            if (s.value("table", std::string()) == table && s.value("instance", std::string()) == instance) {
                out.push_back(ev);
            }
        }
        return out;
    }
    fail(ErrorKind::NotFound, "unknown metadata facet '" + facet + "'");
}

// ---- lifecycle ---------------------------------------------------------------------------

Repository::Repository(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
Repository::Repository(Repository&&) noexcept = default;
Repository::~Repository() = default;

const Layout& Repository::layout() const noexcept { return impl_->layout; }
ops::OperationManager& Repository::operations() { return impl_->ops; }
ExecutorRegistry& Repository::executors() { return impl_->executors; }
const CommittedView& Repository::view() const { return impl_->view; }

bool Repository::is_repository(const fs::path& path) {
    std::error_code ec;
    return fs::is_regular_file(Layout{path}.config_file(), ec);
}

Repository Repository::init(const fs::path& path, const std::string& author, RepositoryOptions options) {
    detail::require_valid_author(author);
    if (is_repository(path)) return open(path, std::move(options));
    std::error_code ec;
    if (fs::exists(path, ec)) {
        if (!fs::is_directory(path) || !fs::is_empty(path)) {
            fail(ErrorKind::RepositoryConflict, path.string() + " exists and is not an empty directory or a repository");
        }
    }
    auto env = options.env ? options.env : Environment::system();
    const bool sync = options.fsync.value_or(true);
    const auto target = fs::absolute(path).lexically_normal();
    const auto parent = target.parent_path();
    fs::create_directories(parent);
    const auto staging = parent / ("." + target.filename().string() + ".init-" + env->random_suffix(8));
    const Layout l{staging};
    for (const auto& d : {l.active_log(), l.locks(), l.heartbeats(), l.ops(), l.archive(), l.lineage_index(),
                          l.tables(), l.code_modules()}) {
        fs::create_directories(d);
    }
    const auto op_id = make_operation_id(*env);
    const auto now = iso8601(env->now());
    Json config = {{"fsync", sync}, {"id_scheme", "utc-timestamp_suffix6"}, {"created_at", now}, {"created_by", author}};
    write_file_atomic(l.config_file(), yaml_doc(config), sync);
    Json event = {{"format_version", 1},
                  {"event", "committed"},
                  {"op_id", op_id},
                  {"op_type", "init_repository"},
                  {"author", author},
                  {"targets", Json::array()},
                  {"subject", Json::object()},
                  {"started_at", now},
                  {"finished_at", now},
                  {"decision_log", Json::array()}};
    append_line_locked(l.completed_log(), event.dump(), sync);
    if (sync) fsync_path(staging);
    fault::point("init.staged");
    fs::rename(staging, target, ec);
    if (ec) {
        fs::remove_all(staging);
        if (is_repository(target)) return open(target, std::move(options));
        fail(ErrorKind::RepositoryConflict, "cannot create repository at " + target.string() + ": " + ec.message());
    }
    if (sync) fsync_parent(target);
    return open(target, std::move(options));
}

Repository Repository::open(const fs::path& path, RepositoryOptions options) {
    if (!is_repository(path)) fail(ErrorKind::NotFound, path.string() + " is not a repository");
    const Layout layout{fs::absolute(path).lexically_normal()};
    const auto config = load_yaml_file(layout.config_file());
    ops::ExecOptions exec;
    exec.fsync = options.fsync.value_or(config.value("fsync", true));
    exec.lock_timeout = options.lock_timeout;
    exec.heartbeat_interval = options.heartbeat_interval;
    exec.stale_after = options.stale_after;
    auto env = options.env ? options.env : Environment::system();
    return Repository(std::make_unique<Impl>(layout, std::move(env), exec));
}

// ---- tables ------------------------------------------------------------------------------

Receipt Repository::create_table(const std::string& author, const std::string& name, const std::string& description) {
    std::lock_guard lock(impl_->mu);
    detail::require_valid_author(author);
    require_table_name(name);
    const auto& l = impl_->layout;
    if (detail::table_exists(l, name)) fail(ErrorKind::NameConflict, "table '" + name + "' already exists");
    auto op = impl_->ops.begin(author, OpType::CreateTable, {ops::table_target(name, LockMode::Exclusive)}, {},
                               {{"table", name}});
    guarded(op, [&] {
        if (fs::exists(l.table_dir(name))) fail(ErrorKind::NameConflict, "table '" + name + "' already exists");
        op.stage_mkdir(l.table_dir(name));
        Json doc = {{"table", name},
                    {"description", description},
                    {"created_by", author},
                    {"created_at", iso8601(impl_->env->now())},
                    {"allow_external", true}};
        op.stage_write(l.table_dir(name) / "description.yaml", yaml_doc(doc));
        op.stage_mkdir(l.pending_builders(name));
    });
    op.commit();
    return {op.id(), "create_table", name, std::nullopt};
}

Receipt Repository::delete_table(const std::string& author, const std::string& name) {
    std::lock_guard lock(impl_->mu);
    detail::require_valid_author(author);
    const auto& l = impl_->layout;
    require_table(l, name);
    auto op = impl_->ops.begin(author, OpType::DeleteTable, {ops::table_target(name, LockMode::Exclusive)}, {},
                               {{"table", name}});
    Receipt receipt{op.id(), "delete_table", name, std::nullopt};
    guarded(op, [&] {
        if (!detail::table_exists(l, name)) fail(ErrorKind::NotFound, "no table '" + name + "'");
        const auto when = iso8601(impl_->env->now());
        for (const auto& id : detail::instance_ids(l, name)) {
            if (!detail::is_committed(l, name, id)) continue;
            stage_archive(op, l, name, id, author, when);
            receipt.archived.push_back(id);
        }
        const auto table_archive = l.archive_table(name) / ("table-" + compact_timestamp(impl_->env->now()));
        op.stage_copy(l.table_dir(name) / "description.yaml", table_archive / "description.yaml");
        std::error_code ec;
        for (const auto& e : fs::directory_iterator(l.pending_builders(name), ec)) {
            if (e.is_regular_file()) op.stage_copy(e.path(), table_archive / "builders" / e.path().filename());
        }
        op.defer_remove(l.table_dir(name));
    });
    op.commit({}, {{"archived", receipt.archived}});
    return receipt;
}

std::vector<std::string> Repository::list_tables() const {
    std::vector<std::string> out;
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(impl_->layout.tables(), ec)) {
        const auto name = e.path().filename().string();
        if (detail::table_exists(impl_->layout, name)) out.push_back(name);
    }
    std::sort(out.begin(), out.end());
    return out;
}

// ---- instances ---------------------------------------------------------------------------

Receipt Repository::create_instance(const std::string& author, const std::string& table, bool external) {
    std::lock_guard lock(impl_->mu);
    detail::require_valid_author(author);
    const auto& l = impl_->layout;
    require_table(l, table);
    const auto id = make_instance_id(*impl_->env);
    std::vector<ops::LockTarget> targets{ops::instance_target(table, id, LockMode::Exclusive)};
    if (external) targets.push_back({"tables/" + table + "/.external-slot", LockMode::Exclusive});
    auto op = impl_->ops.begin(author, OpType::CreateInstance, targets, {},
                               {{"table", table}, {"instance", id}, {"external", external}});
    guarded(op, [&] {
        if (!detail::table_exists(l, table)) fail(ErrorKind::NotFound, "no table '" + table + "'");
        if (external) {
            if (auto pending = detail::pending_instance(l, table, true)) {
                fail(ErrorKind::State, "table '" + table + "' already has a pending external instance " + *pending);
            }
        }
        const auto dir = l.instance_dir(table, id);
        op.stage_mkdir(dir);
        Json meta = {{"table", table},     {"instance", id},          {"author", author},
                     {"external", external}, {"status", "temporary"},   {"created_at", iso8601(impl_->env->now())},
                     {"op_id", op.id()},   {"description", ""}};
        op.stage_write(dir / "description.yaml", yaml_doc(meta));
    });
    op.commit();
    return {op.id(), "create_instance", table, id};
}

Receipt Repository::write_instance(const std::string& author, const std::string& table, const TabularData& frame,
                                   const std::string& description, const std::optional<fs::path>& artifacts,
                                   const std::string& source_note) {
    std::lock_guard lock(impl_->mu);
    detail::require_valid_author(author);
    const auto& l = impl_->layout;
    require_table(l, table);
    if (description.empty()) fail(ErrorKind::Validation, "write_instance requires a description");
    if (artifacts && !fs::is_directory(*artifacts)) {
        fail(ErrorKind::Validation, "artifact directory " + artifacts->string() + " does not exist");
    }
    const auto pending = detail::pending_instance(l, table, true);
    if (!pending) fail(ErrorKind::State, "table '" + table + "' has no pending external instance");
    const auto id = *pending;
    auto meta = detail::instance_meta(l, table, id);
    if (!detail::may_act_for(impl_->ops, meta.value("author", std::string()), author)) {
        fail(ErrorKind::AccessDenied, author + " is not the author of pending instance " + table + "@" + id);
    }
    auto op = impl_->ops.begin(author, OpType::WriteInstance,
                               {ops::instance_target(table, id, LockMode::Exclusive),
                                {"tables/" + table + "/.external-slot", LockMode::Exclusive}},
                               {}, {{"table", table}, {"instance", id}});
    const auto dir = l.instance_dir(table, id);
    std::string digest;
    guarded(op, [&] {
        if (!fs::exists(dir / "description.yaml") || detail::is_committed(l, table, id)) {
            fail(ErrorKind::State, "pending external instance " + table + "@" + id + " disappeared");
        }
        op.stage_owned_dir(dir / "artifacts");
        if (artifacts) copy_tree_into(*artifacts, dir / "artifacts");
        try {
            validate_frame(frame, dir / "artifacts");
        } catch (const Error& e) {
            op.revert(e.what());
            throw;
        }
        const auto csv = frame.to_csv();
        digest = instance_digest(csv, dir / "artifacts");
        op.stage_write(dir / "data.csv", csv);
        op.stage_write(dir / "schema.yaml", to_yaml(frame.schema_json()));
        const auto now = iso8601(impl_->env->now());
        meta["status"] = "committed";
        meta["description"] = description;
        meta["committed_by"] = op.id();
        meta["committed_at"] = now;
        op.stage_write(dir / "description.yaml", yaml_doc(meta));

        lineage::LineageRecord rec;
        rec.table = table;
        rec.instance = id;
        rec.op_id = op.id();
        rec.author_chain = detail::author_chain(impl_->ops, op.id(), author);
        rec.ingestion = lineage::IngestionEvent{author, now, description, digest, source_note};
        detail::stage_lineage(op, l, rec);
        Json ingestion = {{"format_version", 1}, {"event", "ingestion"}, {"op_id", op.id()},
                          {"author", author},    {"ts", now},            {"subject", {{"table", table}, {"instance", id}}},
                          {"description", description}, {"digest", digest}};
        if (!source_note.empty()) ingestion["source_note"] = source_note;
        op.defer_append(l.completed_log(), ingestion.dump());
    });
    op.commit({}, {{"digest", digest}});
    return {op.id(), "write_instance", table, id};
}

Receipt Repository::delete_instance(const std::string& author, const std::string& table, const std::string& instance) {
    std::lock_guard lock(impl_->mu);
    detail::require_valid_author(author);
    const auto& l = impl_->layout;
    require_table(l, table);
    if (!is_instance_id(instance) || !fs::exists(l.instance_dir(table, instance))) {
        if (lineage::is_archived(l, table, instance)) {
            fail(ErrorKind::NotFound, "instance " + table + "@" + instance + " is already deleted");
        }
        fail(ErrorKind::NotFound, "no instance " + table + "@" + instance);
    }
    auto op = impl_->ops.begin(author, OpType::DeleteInstance,
                               {ops::instance_target(table, instance, LockMode::Exclusive)}, {},
                               {{"table", table}, {"instance", instance}});
    Receipt receipt{op.id(), "delete_instance", table, instance};
    guarded(op, [&] {
        if (!fs::exists(l.instance_dir(table, instance))) fail(ErrorKind::NotFound, "no instance " + table + "@" + instance);
        if (detail::is_committed(l, table, instance)) {
            stage_archive(op, l, table, instance, author, iso8601(impl_->env->now()));
            receipt.archived.push_back(instance);
        }
        op.defer_remove(l.instance_dir(table, instance));
    });
    op.commit();
    return receipt;
}

std::vector<InstanceInfo> Repository::list_instances(const std::string& table) const {
    require_table(impl_->layout, table);
    std::vector<InstanceInfo> out;
    for (const auto& id : detail::instance_ids(impl_->layout, table)) {
        try {
            out.push_back(instance_info(table, id));
        } catch (const Error&) {
            // deleted concurrently
        }
    }
    return out;
}

InstanceInfo Repository::instance_info(const std::string& table, const std::string& instance) const {
    const auto& l = impl_->layout;
    require_table(l, table);
    if (!is_instance_id(instance) || !fs::exists(l.instance_dir(table, instance))) {
        fail(ErrorKind::NotFound, "no instance " + table + "@" + instance);
    }
    const auto meta = detail::instance_meta(l, table, instance);
    InstanceInfo info;
    info.id = instance;
    info.status = detail::is_committed(l, table, instance) ? "committed" : "temporary";
    info.author = meta.value("author", std::string());
    info.external = meta.value("external", false);
    info.created_at = meta.value("created_at", std::string());
    info.op_id = meta.value("committed_by", meta.value("op_id", std::string()));
    return info;
}

TabularData Repository::get_dataframe(const std::string& caller, const std::string& table,
                                      const std::optional<std::string>& instance) {
    const auto& l = impl_->layout;
    require_table(l, table);
    if (!instance) {
        std::string latest;
        try {
            latest = impl_->view.latest_instance(table);
        } catch (const Error&) {
            fail(ErrorKind::NotFound, "table '" + table + "' has no committed instance");
        }
        return *impl_->view.frame(table, latest);
    }
    if (detail::is_committed(l, table, *instance)) return *impl_->view.frame(table, *instance);
    const auto dir = l.instance_dir(table, *instance);
    if (!is_instance_id(*instance) || !fs::exists(dir)) {
        if (lineage::is_archived(l, table, *instance)) {
            fail(ErrorKind::NotFound, "instance " + table + "@" + *instance + " was deleted; its metadata is archived");
        }
        fail(ErrorKind::NotFound, "no instance " + table + "@" + *instance);
    }
    const auto meta = detail::instance_meta(l, table, *instance);
    if (!detail::may_act_for(impl_->ops, meta.value("author", std::string()), caller)) {
        fail(ErrorKind::AccessDenied, "instance " + table + "@" + *instance + " is in progress; only its author may read it");
    }
    if (fs::exists(dir / "data.csv") && fs::exists(dir / "schema.yaml")) return read_frame(dir);
    return TabularData{};
}

// ---- documents ---------------------------------------------------------------------------

Receipt Repository::create_builder_file(const std::string& author, const std::string& table,
                                        const std::string& builder, const std::optional<std::string>& content) {
    std::lock_guard lock(impl_->mu);
    detail::require_valid_author(author);
    const auto& l = impl_->layout;
    require_table(l, table);
    if (!is_valid_document_name(builder)) fail(ErrorKind::Validation, "invalid builder name '" + builder + "'");
    const auto file = builder_path(table, builder);
    if (fs::exists(file)) fail(ErrorKind::NameConflict, "builder '" + builder + "' already exists for " + table);
    if (content) load_builder(*content, builder);
    auto op = impl_->ops.begin(author, OpType::CreateBuilderFile,
                               {{"tables/" + table + "/builders/" + builder, LockMode::Exclusive}}, {},
                               {{"table", table}, {"builder", builder}});
    guarded(op, [&] {
        if (fs::exists(file)) fail(ErrorKind::NameConflict, "builder '" + builder + "' already exists for " + table);
        op.stage_write(file, content ? *content : std::string("format_version: 1\n"));
    });
    op.commit();
    Receipt r{op.id(), "create_builder_file", table, std::nullopt};
    r.path = file.string();
    return r;
}

fs::path Repository::builder_path(const std::string& table, const std::string& builder) const {
    return impl_->layout.pending_builders(table) / (builder + ".yaml");
}

std::vector<std::string> Repository::list_builders(const std::string& table) const {
    require_table(impl_->layout, table);
    std::vector<std::string> out;
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(impl_->layout.pending_builders(table), ec)) {
        if (e.path().extension() == ".yaml") out.push_back(e.path().stem().string());
    }
    std::sort(out.begin(), out.end());
    return out;
}

Receipt Repository::create_code_module(const std::string& author, const std::string& name,
                                       const std::string& description) {
    std::lock_guard lock(impl_->mu);
    detail::require_valid_author(author);
    if (!is_valid_document_name(name)) fail(ErrorKind::Validation, "invalid code module name '" + name + "'");
    const auto& l = impl_->layout;
    const auto dir = l.code_module(name);
    if (fs::exists(dir)) fail(ErrorKind::NameConflict, "code module '" + name + "' already exists");
    auto op = impl_->ops.begin(author, OpType::CreateCodeModule, {{"code_modules/" + name, LockMode::Exclusive}}, {},
                               {{"module", name}});
    guarded(op, [&] {
        if (fs::exists(dir)) fail(ErrorKind::NameConflict, "code module '" + name + "' already exists");
        op.stage_mkdir(dir);
        Json doc = {{"name", name}, {"description", description}, {"created_by", author},
                    {"created_at", iso8601(impl_->env->now())}};
        op.stage_write(dir / "module.yaml", yaml_doc(doc));
    });
    op.commit();
    Receipt r{op.id(), "create_code_module", "", std::nullopt};
    r.path = dir.string();
    return r;
}

std::vector<std::string> Repository::list_code_modules() const {
    std::vector<std::string> out;
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(impl_->layout.code_modules(), ec)) {
        if (fs::exists(e.path() / "module.yaml")) out.push_back(e.path().filename().string());
    }
    std::sort(out.begin(), out.end());
    return out;
}

// ---- metadata ----------------------------------------------------------------------------

Json Repository::query_metadata(const std::string& caller, const std::string& table,
                                const std::optional<std::string>& instance, const std::string& facet) {
    const auto& l = impl_->layout;
    require_table_name(table);
    Json result;
    std::optional<std::string> target = instance;
    if (!target) {
        if (facet == "description" && detail::table_exists(l, table)) {
            result = load_yaml_file(l.table_dir(table) / "description.yaml");
        } else if (facet == "operations") {
            result = Json::array();
            for (const auto& ev : impl_->ops.completed_events()) {
                if (ev.contains("subject") && ev["subject"].value("table", std::string()) == table) result.push_back(ev);
            }
        } else {
            if (!detail::table_exists(l, table)) fail(ErrorKind::NotFound, "no table '" + table + "'");
            try {
                target = impl_->view.latest_instance(table);
            } catch (const Error&) {
                fail(ErrorKind::NotFound, "table '" + table + "' has no committed instance");
            }
        }
    }
    if (target) result = instance_facet(l, table, *target, facet);
    Json ev = {{"format_version", 1}, {"event", "query"},  {"author", caller.empty() ? "anonymous" : caller},
               {"ts", iso8601(impl_->env->now())},
               {"subject", {{"table", table}, {"instance", target ? Json(*target) : Json(nullptr)}}},
               {"facet", facet}};
    append_line_locked(l.completed_log(), ev.dump(), impl_->ops.options().fsync);
    return result;
}

std::set<std::string> Repository::authors() const {
    std::set<std::string> out;
    for (const auto& ev : impl_->ops.completed_events()) {
        const auto a = ev.value("author", std::string());
        if (!a.empty() && a != "anonymous") out.insert(a);
    }
    return out;
}

lineage::Graph Repository::trace(const std::string& table, const std::optional<std::string>& instance,
                                 lineage::Direction direction, std::optional<int> depth) const {
    require_table_name(table);
    std::string id;
    if (instance) {
        id = *instance;
    } else {
        try {
            id = impl_->view.latest_instance(table);
        } catch (const Error&) {
            fail(ErrorKind::NotFound, "table '" + table + "' has no committed instance");
        }
    }
    return lineage::trace(impl_->layout, table, id, direction, depth);
}

// ---- operations --------------------------------------------------------------------------

std::vector<ops::OperationRecord> Repository::list_operations(bool include_completed) const {
    auto out = impl_->ops.list_active();
    if (include_completed) {
        for (const auto& ev : impl_->ops.completed_events()) {
            const auto kind = ev.value("event", std::string());
            if (kind != "committed" && kind != "reverted") continue;
            auto rec = ops::OperationRecord::from_json(ev);
            rec.state = kind == "committed" ? ops::OpState::Committed : ops::OpState::Reverted;
            out.push_back(std::move(rec));
        }
    }
    return out;
}

ops::OperationRecord Repository::operation_status(const std::string& op_id) const {
    auto rec = impl_->ops.find(op_id);
    if (!rec) fail(ErrorKind::NotFound, "no operation " + op_id);
    return *rec;
}

void Repository::pause(const std::string& caller, const std::string& op_id) {
    impl_->ops.request(op_id, caller, ops::Control::Pause);
}

ops::RecoveryReport Repository::recover() {
    std::lock_guard lock(impl_->mu);
    return impl_->ops.recover();
}

// ---- audit -------------------------------------------------------------------------------

std::vector<std::string> Repository::audit() const {
    std::vector<std::string> problems;
    const auto& l = impl_->layout;
    const std::set<std::string> top{"metadata", "tables", "code_modules"};
    const std::set<std::string> meta_entries{"active_log", "completed_log.jsonl", "locks", "heartbeats", "ops",
                                             "archive", "lineage_index", "repository.yaml", "recovery.lock"};
    const std::set<std::string> instance_entries{"data.csv", "schema.yaml", "artifacts", "builders",
                                                 "code", "lineage.yaml", "description.yaml"};
    for (const auto& e : fs::directory_iterator(l.root)) {
        if (!top.count(e.path().filename().string())) problems.push_back("unexpected entry " + e.path().string());
    }
    for (const auto& e : fs::directory_iterator(l.metadata())) {
        const auto name = e.path().filename().string();
        if (!meta_entries.count(name) && name.rfind("completed_log.jsonl", 0) != 0) {
            problems.push_back("unexpected metadata entry " + name);
        }
    }
    for (const auto& t : fs::directory_iterator(l.tables())) {
        const auto table = t.path().filename().string();
        if (!detail::table_exists(l, table)) {
            problems.push_back("table directory without description: " + table);
            continue;
        }
        for (const auto& e : fs::directory_iterator(t.path())) {
            const auto name = e.path().filename().string();
            if (name == "description.yaml" || name == "builders") continue;
            if (!is_instance_id(name)) {
                problems.push_back("unexpected entry in table " + table + ": " + name);
                continue;
            }
            for (const auto& f : fs::directory_iterator(e.path())) {
                if (!instance_entries.count(f.path().filename().string())) {
                    problems.push_back("unexpected file in " + table + "@" + name + ": " + f.path().filename().string());
                }
            }
            if (!detail::is_committed(l, table, name)) continue;
            const auto rec = lineage::load(l, table, name);
            if (!rec) {
                problems.push_back(table + "@" + name + ": unreadable lineage");
                continue;
            }
            const bool has_ingestion = rec->ingestion.has_value();
            std::vector<std::string> builders;
            std::error_code ec;
            for (const auto& b : fs::directory_iterator(e.path() / "builders", ec)) builders.push_back(b.path().string());
            if (has_ingestion == !builders.empty()) {
                problems.push_back(table + "@" + name +
                                   (has_ingestion ? ": both ingestion and builders" : ": neither ingestion nor builders"));
            }
            for (const auto& bfile : builders) {
                BuilderSpec spec;
                try {
                    spec = load_builder(read_file(bfile), fs::path(bfile).stem().string());
                } catch (const Error& err) {
                    problems.push_back(table + "@" + name + ": snapshot " + bfile + " invalid: " + err.what());
                    continue;
                }
                for (const auto& [slot, arg] : spec.slots()) {
                    if (!arg->is_reference() || ref::referenced_tables(*arg->ref).empty()) continue;
                    const bool covered = std::any_of(rec->edges.begin(), rec->edges.end(),
                                                     [&](const lineage::Edge& edge) { return edge.sink_slot == slot; });
                    if (!covered) problems.push_back(table + "@" + name + ": no lineage edge for " + slot);
                }
            }
            try {
                const auto frame = read_frame(e.path());
                validate_frame(frame, e.path() / "artifacts");
            } catch (const Error& err) {
                problems.push_back(table + "@" + name + ": " + err.what());
            }
        }
    }
    for (const auto& [table, instance] : lineage::all_records(l)) {
        const auto rec = lineage::load(l, table, instance);
        if (!rec) continue;
        for (const auto& edge : rec->edges) {
            const auto down = lineage::downstream_of(l, edge.source.table, edge.source.instance);
            const lineage::DownstreamEntry want{table, instance, edge.sink_slot};
            if (std::find(down.begin(), down.end(), want) == down.end()) {
                problems.push_back("reverse index of " + edge.source.table + "@" + edge.source.instance + " lacks " +
                                   table + "@" + instance);
            }
        }
    }
    if (!lineage::is_acyclic(l)) problems.push_back("lineage graph has a cycle");
    return problems;
}

}  // namespace tablevault
