#include <algorithm>
#include <atomic>

#include "repository_impl.hpp"
#include "tablevault/error.hpp"
#include "tablevault/fault.hpp"
#include "tablevault/yaml_json.hpp"

namespace tablevault {

namespace {

struct LoadedBuilder {
    std::string name;
    std::string bytes;
    BuilderSpec spec;
};

/// Index builder first, column builders in name order.
std::vector<LoadedBuilder> load_builders(const fs::path& dir) {
    std::vector<LoadedBuilder> out;
    std::vector<fs::path> files;
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(dir, ec)) {
        if (e.is_regular_file() && e.path().extension() == ".yaml") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        LoadedBuilder b{f.stem().string(), read_file(f), {}};
        try {
            b.spec = load_builder(b.bytes, b.name);
        } catch (const Error& e) {
            fail(ErrorKind::BuilderValidation, "builder '" + b.name + "': " + e.detail());
        }
        out.push_back(std::move(b));
    }
    const auto indexes = std::count_if(out.begin(), out.end(),
                                       [](const LoadedBuilder& b) { return b.spec.builder_type == BuilderType::Index; });
    if (indexes != 1) {
        fail(ErrorKind::BuilderValidation,
             "builder_type: exactly one IndexBuilder is required, found " + std::to_string(indexes));
    }
    std::stable_partition(out.begin(), out.end(),
                          [](const LoadedBuilder& b) { return b.spec.builder_type == BuilderType::Index; });
    return out;
}

/// Explicit `@instance` references anywhere in the expression.
void explicit_instances(const ref::RefExpr& e, std::set<std::pair<std::string, std::string>>& out) {
    if (!e.self && !e.keyword && !e.table.empty() && e.instance) out.emplace(e.table, *e.instance);
    for (const auto& f : e.filters) {
        if (const auto* nested = std::get_if<ref::Box<ref::RefExpr>>(&f.value)) explicit_instances(**nested, out);
    }
}

Dtype infer_dtype(const Json& v) {
    if (v.is_boolean()) return Dtype::Bool;
    if (v.is_number_integer()) return Dtype::Int;
    if (v.is_number_float()) return Dtype::Float;
    return Dtype::String;
}

Cell to_cell(const Json& v, Dtype dtype, const std::string& column) {
    if (v.is_null()) return Cell{};
    auto c = coerce(v, dtype);
    if (!c) {
        fail(ErrorKind::Validation, "value " + v.dump() + " for column '" + column + "' is not a valid " +
                                        std::string(to_string(dtype)));
    }
    return *c;
}

/// Cell values of one result for the builder's changed columns.
std::vector<Json> split_result(const Json& value, const std::vector<std::string>& columns) {
    if (columns.size() == 1) {
        if (value.is_object() && value.contains(columns[0]) && value.size() == 1) return {value[columns[0]]};
        return {value};
    }
    std::vector<Json> out;
    if (value.is_object()) {
        for (const auto& c : columns) {
            if (!value.contains(c)) fail(ErrorKind::Validation, "result lacks column '" + c + "'");
            out.push_back(value[c]);
        }
    } else if (value.is_array() && value.size() == columns.size()) {
        for (const auto& v : value) out.push_back(v);
    } else {
        fail(ErrorKind::Validation, "result must map each of the " + std::to_string(columns.size()) + " changed columns");
    }
    return out;
}

Json read_spill(const fs::path& file) { return Json::parse(read_file(file)).at("value"); }

void write_spill(const fs::path& file, const Json& value, bool sync) {
    write_file_atomic(file, Json{{"value", value}}.dump(), sync);
}

}  // namespace

struct ExecuteDriver {
    Repository::Impl& repo;

    const Layout& layout() const { return repo.layout; }

    ref::ResolutionContext context(const Json& plan, const std::string& op_id, const ref::SelfView* self,
                                   std::optional<std::size_t> row) const {
        ref::ResolutionContext ctx;
        ctx.repo = &repo.view;
        ctx.row = row;
        ctx.op_id = op_id;
        ctx.artifact_folder = layout().instance_dir(plan["table"], plan["instance"]) / "artifacts";
        ctx.self = self;
        for (const auto& [t, i] : plan["pins"].items()) ctx.pins[t] = i.get<std::string>();
        return ctx;
    }

    Json resolve_args(const BuilderSpec& spec, const ref::ResolutionContext& ctx) const {
        Json args = Json::object();
        for (const auto& [name, arg] : spec.arguments) {
            args[name] = arg.ref ? value_to_argument(ref::resolve(*arg.ref, ctx)) : arg.literal;
        }
        return args;
    }

    ExecutorEntry executor_for(const BuilderSpec& spec) const {
        auto entry = repo.executors.find(spec.code_module, spec.python_function, layout().code_modules());
        if (!entry) {
            fail(ErrorKind::BuilderValidation, "python_function: no executor " + spec.code_module + "." +
                                                   spec.python_function + " (builtin or code_modules/" +
                                                   spec.code_module + "/" + spec.python_function + ")");
        }
        return *entry;
    }

    std::optional<Json> control_request(const ops::Operation& op) const {
        const auto file = op.work_dir() / "control.json";
        std::error_code ec;
        if (!fs::exists(file, ec)) return std::nullopt;
        auto j = Json::parse(read_file(file), nullptr, false);
        if (!j.is_object()) return std::nullopt;
        return j;
    }

    /// Starts a new execution.
    Receipt start(const std::string& author, const std::string& table, const ExecuteOptions& opts) {
        const auto& l = layout();
        if (!detail::table_exists(l, table)) fail(ErrorKind::NotFound, "no table '" + table + "'");
        std::string instance;
        if (opts.instance) {
            instance = *opts.instance;
            if (!is_instance_id(instance) || !fs::exists(l.instance_dir(table, instance))) {
                fail(ErrorKind::NotFound, "no instance " + table + "@" + instance);
            }
            if (detail::is_committed(l, table, instance)) {
                fail(ErrorKind::State, "instance " + table + "@" + instance + " is already committed");
            }
        } else {
            auto pending = detail::pending_instance(l, table, false);
            if (!pending) fail(ErrorKind::State, "table '" + table + "' has no pending instance; run create_instance");
            instance = *pending;
        }
        const auto meta = detail::instance_meta(l, table, instance);
        if (meta.value("external", false)) {
            fail(ErrorKind::State, "instance " + table + "@" + instance + " is external; use write_instance");
        }
        if (!detail::may_act_for(repo.ops, meta.value("author", std::string()), author)) {
            fail(ErrorKind::AccessDenied, author + " is not the author of " + table + "@" + instance);
        }

        auto builders = load_builders(l.pending_builders(table));
        for (const auto& b : builders) executor_for(b.spec);

        // Pin every unqualified dependency to its current latest instance.
        Json pins = Json::object();
        std::set<std::pair<std::string, std::string>> shared;
        for (const auto& b : builders) {
            for (const auto& [slot, arg] : b.spec.slots()) {
                if (!arg->ref) continue;
                for (const auto& t : ref::referenced_tables(*arg->ref)) {
                    if (pins.contains(t)) continue;
                    try {
                        pins[t] = repo.view.latest_instance(t);
                    } catch (const Error& e) {
                        // Only explicit @instance references may name a table without a latest instance.
                        pins[t] = nullptr;
                    }
                }
                explicit_instances(*arg->ref, shared);
            }
        }
        for (auto it = pins.begin(); it != pins.end();) {
            if (it->is_null()) {
                it = pins.erase(it);
            } else {
                shared.emplace(it.key(), it->get<std::string>());
                ++it;
            }
        }
        std::vector<ops::LockTarget> targets{ops::instance_target(table, instance, ops::LockMode::Exclusive)};
        for (const auto& [t, i] : shared) {
            if (t == table && i == instance) continue;
            targets.push_back(ops::instance_target(t, i, ops::LockMode::Shared));
        }
        std::set<std::string> modules;
        for (const auto& b : builders) {
            if (fs::is_directory(l.code_module(b.spec.code_module))) modules.insert(b.spec.code_module);
        }
        for (const auto& m : modules) targets.push_back({"code_modules/" + m, ops::LockMode::Shared});

        Json plan = {{"format_version", 1}, {"table", table},   {"instance", instance},
                     {"author", author},    {"pins", pins},     {"modules", modules}};
        auto op = repo.ops.begin(author, ops::OpType::ExecuteInstance, targets, {},
                                 {{"table", table}, {"instance", instance}});
        try {
            for (const auto& [t, i] : shared) {
                if (!repo.view.has_instance(t, i)) {
                    const auto reason = "dependency " + t + "@" + i + " is not committed";
                    op.revert(reason);
                    throw Error(ErrorKind::Lineage, reason);
                }
            }
            const auto dir = l.instance_dir(table, instance);
            for (const auto& b : builders) op.stage_write(dir / "builders" / (b.name + ".yaml"), b.bytes);
            for (const auto& m : modules) {
                std::vector<fs::path> files;
                for (const auto& e : fs::recursive_directory_iterator(l.code_module(m))) {
                    if (e.is_regular_file()) files.push_back(e.path());
                }
                std::sort(files.begin(), files.end());
                for (const auto& f : files) op.stage_copy(f, dir / "code" / m / f.lexically_relative(l.code_module(m)));
            }
            if (!fs::exists(dir / "artifacts")) op.stage_owned_dir(dir / "artifacts");
            write_file_atomic(op.work_dir() / "plan.json", plan.dump(), repo.ops.options().fsync);
            fault::point("execute.planned");
        } catch (const Error& e) {
            if (op.state() == ops::OpState::Active) op.revert(e.what());
            throw;
        }
        return drive(op, false);
    }

    /// Runs (or continues) the builders of an attached operation. With
    /// `finalize_only`, no executor is called: the operation commits if
    /// every row is already done and reverts otherwise.
    Receipt drive(ops::Operation& op, bool finalize_only) {
        try {
            return drive_inner(op, finalize_only);
        } catch (const Error& e) {
            if (op.state() == ops::OpState::Active) {
                op.revert(e.what());
                if (e.kind() == ErrorKind::Lineage || e.kind() == ErrorKind::AccessDenied) throw;
                throw Error(ErrorKind::Reverted, e.what());
            }
            throw;
        } catch (const std::exception& e) {
            if (op.state() == ops::OpState::Active) op.revert(e.what());
            throw Error(ErrorKind::Reverted, e.what());
        }
    }

    Receipt paused(ops::Operation& op, const Json& plan, const TabularData& frame, const std::string& author,
                   const std::string& reason) {
        const auto dir = layout().instance_dir(plan["table"], plan["instance"]);
        op.stage_write(dir / "data.csv", frame.to_csv());
        op.stage_write(dir / "schema.yaml", to_yaml(frame.schema_json()));
        op.pause(author, reason);
        Receipt r{op.id(), "execute_instance", plan["table"], plan["instance"].get<std::string>()};
        r.state = "paused";
        return r;
    }

    Receipt drive_inner(ops::Operation& op, bool finalize_only) {
        const auto& l = layout();
        const auto plan = Json::parse(read_file(op.work_dir() / "plan.json"));
        const std::string table = plan["table"];
        const std::string instance = plan["instance"];
        const std::string author = op.record().author;
        const auto dir = l.instance_dir(table, instance);
        const auto rows_dir = op.work_dir() / "rows";
        const bool sync = repo.ops.options().fsync;
        fs::create_directories(rows_dir);
        const auto builders = load_builders(dir / "builders");

        std::mutex fallback_mu;
        std::set<std::pair<std::string, std::string>> fallbacks;
        auto track = [&](ref::ResolutionContext& ctx) {
            ctx.on_access = [&](const ref::Access& a) {
                if (!a.operation_fallback) return;
                std::lock_guard lock(fallback_mu);
                fallbacks.emplace(a.table, a.instance);
            };
        };

        // Index.
        const auto& index = builders.front();
        TabularData frame;
        const auto index_file = rows_dir / "_index.json";
        if (fs::exists(index_file)) {
            frame = TabularData::from_json(Json::parse(read_file(index_file)));
        } else {
            if (finalize_only) fail(ErrorKind::Reverted, "incomplete rows: index not built");
            auto ctx = context(plan, op.id(), nullptr, std::nullopt);
            track(ctx);
            ExecutorCall call{resolve_args(index.spec, ctx), ctx.artifact_folder, op.id(), std::nullopt,
                              index.spec.changed_columns};
            const auto result = executor_for(index.spec).fn(call);
            frame = build_index(index.spec, result);
            write_file_atomic(index_file, frame.to_json().dump(), sync);
            fault::point("execute.index");
        }

        // Columns.
        for (std::size_t b = 1; b < builders.size(); ++b) {
            const auto& spec = builders[b].spec;
            const auto spill = rows_dir / builders[b].name;
            fs::create_directories(spill);
            std::vector<std::size_t> cols;
            for (const auto& c : spec.changed_columns) {
                if (std::find(frame.primary_key().begin(), frame.primary_key().end(), c) != frame.primary_key().end()) {
                    fail(ErrorKind::Validation, "builder '" + builders[b].name + "' may not change primary key column '" + c + "'");
                }
                auto idx = frame.column_index(c);
                const auto declared = spec.dtypes.count(c) ? std::optional<Dtype>(spec.dtypes.at(c)) : std::nullopt;
                if (!idx) idx = frame.add_column({c, declared.value_or(Dtype::String)});
                cols.push_back(*idx);
            }
            const auto n = frame.num_rows();
            auto self_frame = std::make_shared<const TabularData>(frame);
            ref::SelfView self{self_frame, dir / "artifacts",
                               [&l, table, instance](const std::string& facet) {
                                   return instance_facet(l, table, instance, facet);
                               }};
            auto base_ctx = context(plan, op.id(), &self, std::nullopt);
            track(base_ctx);

            const auto entry = finalize_only ? ExecutorEntry{} : executor_for(spec);
            std::size_t nthreads = 1;
            if (spec.nthreads) {
                const auto v = spec.nthreads->ref ? cell_to_json(ref::resolve(*spec.nthreads->ref, base_ctx).as_scalar())
                                                  : spec.nthreads->literal;
                if (!v.is_number_integer() || v.get<std::int64_t>() < 1) {
                    fail(ErrorKind::Validation, "nthreads resolved to " + v.dump() + ", expected a positive integer");
                }
                nthreads = static_cast<std::size_t>(v.get<std::int64_t>());
            }
            if (entry.serial) nthreads = 1;

            bool per_row = false;
            for (const auto& [name, arg] : spec.arguments) {
                if (arg.ref && ref::is_row_dependent(*arg.ref)) per_row = true;
            }

            std::vector<std::optional<Json>> values(n);
            if (per_row) {
                for (std::size_t r = 0; r < n; ++r) {
                    const auto f = spill / (std::to_string(r) + ".val");
                    if (fs::exists(f)) values[r] = read_spill(f);
                }
                std::optional<Json> control;
                std::string first_error;
                std::size_t failed_row = 0;
                if (!finalize_only) {
                    auto call = [&](std::size_t row) {
                        auto ctx = base_ctx;
                        ctx.row = row;
                        ExecutorCall c{resolve_args(spec, ctx), ctx.artifact_folder, op.id(), row, spec.changed_columns};
                        return entry.fn(c);
                    };
                    auto on_done = [&](std::size_t row, const RowOutcome& o) {
                        std::error_code ec;
                        if (o.value) {
                            write_spill(spill / (std::to_string(row) + ".val"), *o.value, sync);
                            fs::remove(spill / (std::to_string(row) + ".err"), ec);
                        } else {
                            write_file_atomic(spill / (std::to_string(row) + ".err"), o.error, sync);
                            if (first_error.empty()) {
                                first_error = o.error;
                                failed_row = row;
                            }
                        }
                    };
                    auto should_stop = [&] {
                        control = control_request(op);
                        return control.has_value();
                    };
                    const auto outcomes = evaluate_rows(n, nthreads, call, values, on_done, should_stop, spec.retries);
                    for (std::size_t r = 0; r < n; ++r) values[r] = outcomes[r].value;
                }
                const bool complete = std::all_of(values.begin(), values.end(), [](const auto& v) { return v.has_value(); });
                if (!first_error.empty()) {
                    const auto reason = "row " + std::to_string(failed_row) + " of builder '" + builders[b].name +
                                        "' failed: " + first_error;
                    if (spec.on_error == OnError::Pause) {
                        fill(frame, cols, spec, values);
                        return paused(op, plan, frame, author, reason);
                    }
                    fail(ErrorKind::Reverted, reason);
                }
                if (control) {
                    const auto action = control->value("action", std::string());
                    const auto who = control->value("author", author);
                    if (action == "pause") {
                        fill(frame, cols, spec, values);
                        return paused(op, plan, frame, who, "pause requested");
                    }
                    op.acknowledge_stop(who);
                    if (action == "stop" || !complete) {
                        op.revert(action == "stop" ? "stopped by " + who : "incomplete rows");
                        throw Error(ErrorKind::Reverted, action == "stop" ? "stopped by " + who : "incomplete rows");
                    }
                }
                if (!complete) fail(ErrorKind::Reverted, "incomplete rows");
            } else if (n > 0) {
                const auto f = spill / "all.val";
                Json result;
                if (fs::exists(f)) {
                    result = read_spill(f);
                } else {
                    if (finalize_only) fail(ErrorKind::Reverted, "incomplete rows");
                    ExecutorCall c{resolve_args(spec, base_ctx), base_ctx.artifact_folder, op.id(), std::nullopt,
                                   spec.changed_columns};
                    std::string error;
                    for (int attempt = 0; attempt <= spec.retries; ++attempt) {
                        try {
                            result = entry.fn(c);
                            error.clear();
                            break;
                        } catch (const std::exception& e) {
                            error = e.what();
                        }
                    }
                    if (!error.empty()) {
                        const auto reason = "builder '" + builders[b].name + "' failed: " + error;
                        if (spec.on_error == OnError::Pause) return paused(op, plan, frame, author, reason);
                        fail(ErrorKind::Reverted, reason);
                    }
                    write_spill(f, result, sync);
                }
                const bool per_row_array = result.is_array() && result.size() == n &&
                                           !(spec.changed_columns.size() > 1 && n == spec.changed_columns.size() &&
                                             !result.empty() && !result[0].is_array() && !result[0].is_object());
                for (std::size_t r = 0; r < n; ++r) values[r] = per_row_array ? result[r] : result;
            }
            fill(frame, cols, spec, values);
            fault::point("execute.column");
        }

        // Lineage.
        lineage::LineageRecord rec;
        rec.table = table;
        rec.instance = instance;
        rec.op_id = op.id();
        rec.author_chain = detail::author_chain(repo.ops, op.id(), author);
        auto lineage_ctx = context(plan, op.id(), nullptr, std::nullopt);
        for (const auto& b : builders) {
            for (const auto& [slot, arg] : b.spec.slots()) {
                if (!arg->ref) continue;
                for (auto& dep : ref::extract_dependencies(*arg->ref, lineage_ctx)) {
                    if (!repo.view.has_instance(dep.table, dep.instance)) {
                        throw Error(ErrorKind::Lineage,
                                    "dependency " + dep.table + "@" + dep.instance + " is not committed");
                    }
                    lineage::Edge edge{std::move(dep), slot, {}};
                    if (fallbacks.count({edge.source.table, edge.source.instance})) {
                        edge.flags.push_back("operation_fallback");
                    }
                    rec.edges.push_back(std::move(edge));
                }
            }
        }

        const auto csv = frame.to_csv();
        op.stage_write(dir / "data.csv", csv);
        op.stage_write(dir / "schema.yaml", to_yaml(frame.schema_json()));
        auto meta = detail::instance_meta(l, table, instance);
        meta["format_version"] = 1;
        meta["status"] = "committed";
        meta["committed_by"] = op.id();
        meta["committed_at"] = iso8601(repo.env->now());
        op.stage_write(dir / "description.yaml", to_yaml(meta));
        detail::stage_lineage(op, l, rec);
        const auto artifacts = dir / "artifacts";
        op.commit({[&]() -> std::optional<std::string> {
                       try {
                           validate_frame(frame, artifacts);
                       } catch (const Error& e) {
                           return e.detail();
                       }
                       return std::nullopt;
                   }},
                  {{"digest", instance_digest(csv, artifacts)}});
        return {op.id(), "execute_instance", table, instance};
    }

    static TabularData build_index(const BuilderSpec& spec, const Json& result) {
        std::vector<Json> rows;
        if (result.is_object() && result.contains("rows") && result.contains("columns")) {
            const auto f = TabularData::from_json(result);
            for (const auto& r : f.rows()) {
                Json obj = Json::object();
                for (std::size_t c = 0; c < f.num_columns(); ++c) obj[f.columns()[c].name] = cell_to_json(r[c]);
                rows.push_back(obj);
            }
        } else if (result.is_array()) {
            for (const auto& r : result) rows.push_back(r);
        } else {
            fail(ErrorKind::Validation, "index builder must return a list of rows");
        }
        std::vector<ColumnSpec> columns;
        for (const auto& c : spec.changed_columns) {
            Dtype d = Dtype::String;
            if (spec.dtypes.count(c)) {
                d = spec.dtypes.at(c);
            } else {
                for (const auto& r : rows) {
                    const auto v = r.is_object() && r.contains(c) ? r[c] : Json(nullptr);
                    if (!v.is_null()) {
                        d = infer_dtype(v);
                        break;
                    }
                }
            }
            columns.push_back({c, d});
        }
        TabularData frame(columns, spec.primary_key);
        for (const auto& r : rows) {
            const auto vals = split_result(r, spec.changed_columns);
            std::vector<Cell> cells;
            for (std::size_t c = 0; c < columns.size(); ++c) cells.push_back(to_cell(vals[c], columns[c].dtype, columns[c].name));
            frame.add_row(std::move(cells));
        }
        return frame;
    }

    static void fill(TabularData& frame, const std::vector<std::size_t>& cols, const BuilderSpec& spec,
                     const std::vector<std::optional<Json>>& values) {
        // Undeclared dtypes follow the first produced value.
        std::vector<Dtype> types;
        for (std::size_t k = 0; k < cols.size(); ++k) {
            const auto& name = spec.changed_columns[k];
            Dtype d = spec.dtypes.count(name) ? spec.dtypes.at(name) : Dtype::String;
            if (!spec.dtypes.count(name)) {
                for (const auto& v : values) {
                    if (!v) continue;
                    const auto parts = split_result(*v, spec.changed_columns);
                    if (!parts[k].is_null()) {
                        d = infer_dtype(parts[k]);
                        break;
                    }
                }
            }
            types.push_back(d);
        }
        TabularData out(frame.columns(), frame.primary_key());
        std::vector<ColumnSpec> specs = frame.columns();
        for (std::size_t k = 0; k < cols.size(); ++k) specs[cols[k]].dtype = types[k];
        TabularData rebuilt(specs, frame.primary_key());
        for (std::size_t r = 0; r < frame.num_rows(); ++r) {
            auto row = frame.rows()[r];
            if (values[r]) {
                const auto parts = split_result(*values[r], spec.changed_columns);
                for (std::size_t k = 0; k < cols.size(); ++k) row[cols[k]] = to_cell(parts[k], types[k], spec.changed_columns[k]);
            }
            rebuilt.add_row(std::move(row));
        }
        frame = std::move(rebuilt);
    }
};

Receipt Repository::execute_instance(const std::string& author, const std::string& table, const ExecuteOptions& opts) {
    std::lock_guard lock(impl_->mu);
    detail::require_valid_author(author);
    if (!is_valid_table_name(table)) fail(ErrorKind::Validation, "invalid table name '" + table + "'");
    ExecuteDriver driver{*impl_};
    return driver.start(author, table, opts);
}

Receipt Repository::resume(const std::string& caller, const std::string& op_id) {
    std::lock_guard lock(impl_->mu);
    const auto rec = impl_->ops.find(op_id);
    if (!rec) fail(ErrorKind::NotFound, "no operation " + op_id);
    if (rec->state != ops::OpState::Paused) {
        fail(ErrorKind::State, "operation " + op_id + " is " + std::string(ops::to_string(rec->state)));
    }
    if (rec->op_type != ops::OpType::ExecuteInstance) fail(ErrorKind::State, "only executions can be resumed");
    auto op = impl_->ops.resume(op_id, caller);
    ExecuteDriver driver{*impl_};
    return driver.drive(op, false);
}

Receipt Repository::stop(const std::string& caller, const std::string& op_id, bool revert) {
    std::unique_lock lock(impl_->mu);
    const auto rec = impl_->ops.find(op_id);
    if (!rec) fail(ErrorKind::NotFound, "no operation " + op_id);
    Receipt r{op_id, std::string(ops::to_string(rec->op_type)), rec->subject.value("table", std::string()),
              std::nullopt};
    if (rec->subject.contains("instance")) r.instance = rec->subject["instance"].get<std::string>();
    if (rec->state == ops::OpState::Paused) {
        if (!impl_->ops.is_authorized(*rec, caller)) fail(ErrorKind::AccessDenied, caller + " may not stop " + op_id);
        if (revert || rec->op_type != ops::OpType::ExecuteInstance) {
            impl_->ops.stop_paused(op_id, caller);
            r.state = "reverted";
            return r;
        }
        auto op = impl_->ops.resume(op_id, caller, "stop");
        ExecuteDriver driver{*impl_};
        return driver.drive(op, true);
    }
    if (rec->state != ops::OpState::Active) {
        fail(ErrorKind::State, "operation " + op_id + " is already " + std::string(ops::to_string(rec->state)));
    }
    lock.unlock();
    impl_->ops.request(op_id, caller, revert ? ops::Control::Stop : ops::Control::StopCommit);
    const auto after = impl_->ops.find(op_id);
    r.state = after ? std::string(ops::to_string(after->state)) : "reverted";
    return r;
}

}  // namespace tablevault
