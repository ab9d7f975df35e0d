#include "tablevault/cli.hpp"

#include <CLI11.hpp>

#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include "tablevault/error.hpp"
#include "tablevault/repository.hpp"
#include "tablevault/yaml_json.hpp"

namespace tablevault::cli {

namespace {

struct Globals {
    std::string repo;
    std::string author;
    bool json = false;
    int lock_timeout_ms = 30'000;
};

struct Io {
    std::ostringstream out;
    std::ostringstream err;
};

using Handler = std::function<void(Io&)>;

std::string require_author(const Globals& g) {
    if (g.author.empty()) fail(ErrorKind::Validation, "--author is required for this command");
    return g.author;
}

Repository open_repo(const Globals& g) {
    if (g.repo.empty()) fail(ErrorKind::Validation, "--repo (or TABLEVAULT_REPO) is required");
    RepositoryOptions opts;
    opts.lock_timeout = std::chrono::milliseconds(g.lock_timeout_ms);
    return Repository::open(g.repo, opts);
}

void emit(Io& io, const Globals& g, const Json& doc, const std::string& human) {
    if (g.json) {
        io.out << doc.dump() << "\n";
    } else {
        io.out << human;
        if (!human.empty() && human.back() != '\n') io.out << "\n";
    }
}

void emit_receipt(Io& io, const Globals& g, const Receipt& r) {
    std::ostringstream h;
    h << r.op_id << "\n";
    h << r.op_type << " " << r.state;
    if (!r.table.empty()) h << " table=" << r.table;
    if (r.instance) h << " instance=" << *r.instance;
    if (r.path) h << " path=" << *r.path;
    for (const auto& a : r.archived) h << " archived=" << a;
    emit(io, g, r.to_json(), h.str());
}

Json frame_document(const std::string& table, const std::optional<std::string>& instance, const TabularData& frame) {
    Json doc = frame.to_json();
    doc["format_version"] = 1;
    doc["table"] = table;
    doc["instance"] = instance ? Json(*instance) : Json(nullptr);
    return doc;
}

std::string human_document(const Json& doc) {
    if (doc.is_string()) return doc.get<std::string>();
    return to_yaml(doc);
}

struct Spec {
    std::string path;       // "table create"
    std::string operation;  // library operation it serves
};

/// Builds the command tree. Handlers are bound to `handler` when selected.
class App {
public:
    App() : app_("tablevault: versioned, lineage-tracked tables on the filesystem", "tablevault") {
        app_.set_help_all_flag("--help-all", "Show help for all subcommands");
        app_.require_subcommand(1);
        app_.fallthrough();
        app_.add_option("--repo", g_.repo, "Repository root")->envname("TABLEVAULT_REPO");
        app_.add_option("--author", g_.author, "Author id (required for mutations)");
        app_.add_flag("--json", g_.json, "Print one JSON document on stdout");
        app_.add_option("--lock-timeout", g_.lock_timeout_ms, "Lock wait limit in milliseconds")->check(CLI::NonNegativeNumber);
        build();
    }

    CLI::App& app() { return app_; }
    Globals& globals() { return g_; }
    const Handler& handler() const { return handler_; }
    const std::vector<Spec>& specs() const { return specs_; }

private:
    CLI::App* leaf(CLI::App* parent, const std::string& name, const std::string& help, const std::string& op,
                   const std::string& path) {
        auto* cmd = parent->add_subcommand(name, help);
        specs_.push_back({path, op});
        return cmd;
    }

    void on(CLI::App* cmd, Handler h) {
        cmd->callback([this, h = std::move(h)] { handler_ = h; });
    }

    void build() {
        auto& g = g_;
        // init
        {
            auto* c = leaf(&app_, "init", "Create (or open) a repository", "init_repository", "init");
            on(c, [&g](Io& io) {
                if (g.repo.empty()) fail(ErrorKind::Validation, "--repo (or TABLEVAULT_REPO) is required");
                const auto author = require_author(g);
                const bool existed = Repository::is_repository(g.repo);
                auto repo = Repository::init(g.repo, author);
                std::string op_id;
                for (const auto& ev : repo.operations().completed_events()) {
                    if (ev.value("op_type", std::string()) == "init_repository") {
                        op_id = ev.value("op_id", std::string());
                        break;
                    }
                }
                Json doc = {{"format_version", 1}, {"op_id", op_id}, {"op_type", "init_repository"},
                            {"repo", repo.layout().root.string()}, {"created", !existed}};
                emit(io, g, doc, op_id + "\n" + (existed ? "opened " : "created ") + repo.layout().root.string());
            });
        }
        // table
        {
            auto* t = app_.add_subcommand("table", "Table lifecycle");
            t->require_subcommand(1);
            auto* create = leaf(t, "create", "Create a table", "create_table", "table create");
            auto* name = new std::string;
            auto* description = new std::string;
            owned_.emplace_back(name);
            owned_.emplace_back(description);
            create->add_option("name", *name, "Table name")->required();
            create->add_option("--description", *description, "Free-text description");
            on(create, [&g, name, description](Io& io) {
                auto repo = open_repo(g);
                emit_receipt(io, g, repo.create_table(require_author(g), *name, *description));
            });
            auto* del = leaf(t, "delete", "Delete a table (metadata is archived)", "delete_table", "table delete");
            auto* dname = str();
            del->add_option("name", *dname, "Table name")->required();
            on(del, [&g, dname](Io& io) {
                auto repo = open_repo(g);
                emit_receipt(io, g, repo.delete_table(require_author(g), *dname));
            });
            auto* list = leaf(t, "list", "List tables", "list_tables", "table list");
            on(list, [&g](Io& io) {
                auto repo = open_repo(g);
                const auto tables = repo.list_tables();
                std::string human;
                for (const auto& n : tables) human += n + "\n";
                emit(io, g, {{"format_version", 1}, {"tables", tables}}, human);
            });
        }
        // instance
        {
            auto* i = app_.add_subcommand("instance", "Instance lifecycle");
            i->require_subcommand(1);
            auto* create = leaf(i, "create", "Create a temporary instance", "create_instance", "instance create");
            auto* table = str();
            auto* external = flag();
            create->add_option("table", *table, "Table name")->required();
            create->add_flag("--external", *external, "Instance will be filled by 'write'");
            on(create, [&g, table, external](Io& io) {
                auto repo = open_repo(g);
                emit_receipt(io, g, repo.create_instance(require_author(g), *table, *external));
            });
            auto* del = leaf(i, "delete", "Delete an instance (metadata is archived)", "delete_instance", "instance delete");
            auto* dt = str();
            auto* di = str();
            del->add_option("table", *dt, "Table name")->required();
            del->add_option("instance", *di, "Instance id")->required();
            on(del, [&g, dt, di](Io& io) {
                auto repo = open_repo(g);
                emit_receipt(io, g, repo.delete_instance(require_author(g), *dt, *di));
            });
            auto* list = leaf(i, "list", "List instances of a table", "list_instances", "instance list");
            auto* lt = str();
            list->add_option("table", *lt, "Table name")->required();
            on(list, [&g, lt](Io& io) {
                auto repo = open_repo(g);
                Json arr = Json::array();
                std::string human;
                for (const auto& info : repo.list_instances(*lt)) {
                    arr.push_back(info.to_json());
                    human += info.id + " " + info.status + " " + info.author + (info.external ? " external" : "") + "\n";
                }
                emit(io, g, {{"format_version", 1}, {"table", *lt}, {"instances", arr}}, human);
            });
            auto* show = leaf(i, "show", "Show one instance", "instance_info", "instance show");
            auto* st = str();
            auto* si = str();
            show->add_option("table", *st, "Table name")->required();
            show->add_option("instance", *si, "Instance id")->required();
            on(show, [&g, st, si](Io& io) {
                auto repo = open_repo(g);
                const auto info = repo.instance_info(*st, *si);
                Json doc = info.to_json();
                doc["format_version"] = 1;
                doc["table"] = *st;
                doc["description"] = instance_facet(repo.layout(), *st, *si, "description").value("description", "");
                emit(io, g, doc, to_yaml(doc));
            });
        }
        // builder
        {
            auto* b = app_.add_subcommand("builder", "Builder documents");
            b->require_subcommand(1);
            auto* create = leaf(b, "create", "Create a builder document", "create_builder_file", "builder create");
            auto* table = str();
            auto* name = str();
            auto* from = str();
            create->add_option("table", *table, "Table name")->required();
            create->add_option("name", *name, "Builder name")->required();
            create->add_option("--from", *from, "Initial content from a file")->check(CLI::ExistingFile);
            on(create, [&g, table, name, from](Io& io) {
                auto repo = open_repo(g);
                std::optional<std::string> content;
                if (!from->empty()) content = read_file(*from);
                emit_receipt(io, g, repo.create_builder_file(require_author(g), *table, *name, content));
            });
            auto* edit = leaf(b, "edit-path", "Print the editable path of a builder", "builder_path", "builder edit-path");
            auto* et = str();
            auto* en = str();
            edit->add_option("table", *et, "Table name")->required();
            edit->add_option("name", *en, "Builder name")->required();
            on(edit, [&g, et, en](Io& io) {
                auto repo = open_repo(g);
                const auto path = repo.builder_path(*et, *en);
                if (!fs::exists(path)) fail(ErrorKind::NotFound, "no builder '" + *en + "' for table " + *et);
                emit(io, g, {{"format_version", 1}, {"path", path.string()}}, path.string());
            });
            auto* validate = leaf(b, "validate", "Validate a builder document", "load_builder", "builder validate");
            auto* vt = str();
            auto* vn = str();
            auto* vf = str();
            validate->add_option("table", *vt, "Table name");
            validate->add_option("name", *vn, "Builder name");
            validate->add_option("--file", *vf, "Validate a file instead")->check(CLI::ExistingFile);
            on(validate, [&g, vt, vn, vf](Io& io) {
                std::string bytes;
                std::string name = *vn;
                if (!vf->empty()) {
                    bytes = read_file(*vf);
                    if (name.empty()) name = fs::path(*vf).stem().string();
                } else {
                    if (vt->empty() || vn->empty()) fail(ErrorKind::Validation, "give TABLE NAME or --file");
                    auto repo = open_repo(g);
                    const auto path = repo.builder_path(*vt, *vn);
                    if (!fs::exists(path)) fail(ErrorKind::NotFound, "no builder '" + *vn + "' for table " + *vt);
                    bytes = read_file(path);
                }
                const auto spec = load_builder(bytes, name);
                Json refs = Json::array();
                std::string human = std::string(to_string(spec.builder_type)) + " " + name + ": valid\n";
                for (const auto& [slot, arg] : spec.slots()) {
                    if (!arg->ref) continue;
                    const auto pattern = std::string(ref::to_string(ref::classify(*arg->ref)));
                    refs.push_back({{"slot", slot}, {"reference", ref::print(*arg->ref)}, {"pattern", pattern}});
                    human += "  " + slot + " " + ref::print(*arg->ref) + " (" + pattern + ")\n";
                }
                emit(io, g,
                     {{"format_version", 1}, {"valid", true}, {"name", name},
                      {"builder_type", std::string(to_string(spec.builder_type))},
                      {"changed_columns", spec.changed_columns}, {"references", refs}},
                     human);
            });
        }
        // module
        {
            auto* m = app_.add_subcommand("module", "Code modules");
            m->require_subcommand(1);
            auto* create = leaf(m, "create", "Create a code module", "create_code_module", "module create");
            auto* name = str();
            auto* description = str();
            create->add_option("name", *name, "Module name")->required();
            create->add_option("--description", *description, "Free-text description");
            on(create, [&g, name, description](Io& io) {
                auto repo = open_repo(g);
                emit_receipt(io, g, repo.create_code_module(require_author(g), *name, *description));
            });
            auto* list = leaf(m, "list", "List code modules", "list_code_modules", "module list");
            on(list, [&g](Io& io) {
                auto repo = open_repo(g);
                const auto mods = repo.list_code_modules();
                std::string human;
                for (const auto& n : mods) human += n + "\n";
                emit(io, g, {{"format_version", 1}, {"modules", mods}}, human);
            });
        }
        // execute
        {
            auto* c = leaf(&app_, "execute", "Run the staged builders into a pending instance", "execute_instance", "execute");
            auto* table = str();
            auto* instance = str();
            c->add_option("table", *table, "Table name")->required();
            c->add_option("--instance", *instance, "Pending instance (default: newest)");
            on(c, [&g, table, instance](Io& io) {
                auto repo = open_repo(g);
                ExecuteOptions opts;
                if (!instance->empty()) opts.instance = *instance;
                emit_receipt(io, g, repo.execute_instance(require_author(g), *table, opts));
            });
        }
        // write
        {
            auto* c = leaf(&app_, "write", "Import a CSV (and artifacts) into the pending external instance",
                           "write_instance", "write");
            auto* table = str();
            auto* csv = str();
            auto* artifacts = str();
            auto* description = str();
            auto* note = str();
            auto* dtypes = new std::vector<std::string>;
            auto* pk = new std::vector<std::string>;
            owned_vecs_.emplace_back(dtypes);
            owned_vecs_.emplace_back(pk);
            c->add_option("table", *table, "Table name")->required();
            c->add_option("csv", *csv, "CSV file with a header row")->required()->check(CLI::ExistingFile);
            c->add_option("--artifacts", *artifacts, "Directory copied into the instance artifacts");
            c->add_option("--description", *description, "What was imported and why")->required();
            c->add_option("--source-note", *note, "Where the data came from");
            c->add_option("--dtype", *dtypes, "column=dtype (repeatable)");
            c->add_option("--primary-key", *pk, "Primary key column (repeatable)");
            on(c, [&g, table, csv, artifacts, description, note, dtypes, pk](Io& io) {
                std::vector<ColumnSpec> specs;
                for (const auto& d : *dtypes) {
                    const auto eq = d.find('=');
                    if (eq == std::string::npos) fail(ErrorKind::Validation, "--dtype expects column=dtype, got '" + d + "'");
                    specs.push_back({d.substr(0, eq), parse_dtype(d.substr(eq + 1))});
                }
                const auto frame = TabularData::from_csv_header(read_file(*csv), specs, *pk);
                auto repo = open_repo(g);
                std::optional<fs::path> art;
                if (!artifacts->empty()) art = fs::path(*artifacts);
                emit_receipt(io, g, repo.write_instance(require_author(g), *table, frame, *description, art, *note));
            });
        }
        // df
        {
            auto* d = app_.add_subcommand("df", "Dataframes");
            d->require_subcommand(1);
            auto* get = leaf(d, "get", "Print a dataframe", "get_dataframe", "df get");
            auto* table = str();
            auto* instance = str();
            get->add_option("table", *table, "Table name")->required();
            get->add_option("--instance", *instance, "Instance id (default: latest committed)");
            on(get, [&g, table, instance](Io& io) {
                auto repo = open_repo(g);
                std::optional<std::string> inst;
                if (!instance->empty()) inst = *instance;
                const auto frame = repo.get_dataframe(g.author, *table, inst);
                if (!inst) inst = repo.view().latest_instance(*table);
                emit(io, g, frame_document(*table, inst, frame), frame.to_csv());
            });
        }
        // meta
        {
            auto* m = app_.add_subcommand("meta", "Metadata");
            m->require_subcommand(1);
            auto* q = leaf(m, "query", "Read a metadata facet (the query is logged)", "query_metadata", "meta query");
            auto* table = str();
            auto* instance = str();
            auto* facet = str();
            q->add_option("table", *table, "Table name")->required();
            q->add_option("--instance", *instance, "Instance id (default: latest committed)");
            q->add_option("--facet", *facet, "description | lineage | builders[.<name>] | code | operations | ingestion")
                ->required();
            on(q, [&g, table, instance, facet](Io& io) {
                auto repo = open_repo(g);
                std::optional<std::string> inst;
                if (!instance->empty()) inst = *instance;
                const auto doc = repo.query_metadata(g.author, *table, inst, *facet);
                emit(io, g,
                     {{"format_version", 1}, {"table", *table}, {"instance", inst ? Json(*inst) : Json(nullptr)},
                      {"facet", *facet}, {"document", doc}},
                     human_document(doc));
            });
        }
        // lineage
        {
            auto* l = app_.add_subcommand("lineage", "Lineage graph");
            l->require_subcommand(1);
            auto* t = leaf(l, "trace", "Walk lineage upstream or downstream", "trace", "lineage trace");
            auto* table = str();
            auto* instance = str();
            auto* direction = new std::string("upstream");
            owned_.emplace_back(direction);
            auto* depth = new int(-1);
            owned_ints_.emplace_back(depth);
            t->add_option("table", *table, "Table name")->required();
            t->add_option("--instance", *instance, "Instance id (default: latest committed)");
            t->add_option("--direction", *direction, "upstream | downstream")
                ->check(CLI::IsMember({"upstream", "downstream"}));
            t->add_option("--depth", *depth, "Maximum hops (default: unbounded)");
            on(t, [&g, table, instance, direction, depth](Io& io) {
                auto repo = open_repo(g);
                std::optional<std::string> inst;
                if (!instance->empty()) inst = *instance;
                std::optional<int> d;
                if (*depth >= 0) d = *depth;
                const auto graph = repo.trace(*table, inst, *direction == "upstream" ? lineage::Direction::Upstream
                                                                                     : lineage::Direction::Downstream,
                                              d);
                std::string human;
                for (const auto& n : graph.nodes) {
                    human += std::string(static_cast<std::size_t>(n.depth) * 2, ' ') + n.table + "@" + n.instance +
                             (n.archived ? " [archived]" : "") + (n.external ? " [ingestion]" : "") + "\n";
                }
                for (const auto& e : graph.edges) {
                    human += e.from_table + "@" + e.from_instance + " -> " + e.to_table + "@" + e.to_instance + " (" +
                             e.sink_slot + ", " + e.pattern + ")\n";
                }
                emit(io, g, graph.to_json(), human);
            });
        }
        // op
        {
            auto* o = app_.add_subcommand("op", "Operations");
            o->require_subcommand(1);
            auto* list = leaf(o, "list", "List live operations", "list_operations", "op list");
            auto* all = flag();
            list->add_flag("--all", *all, "Include finished operations");
            on(list, [&g, all](Io& io) {
                auto repo = open_repo(g);
                Json arr = Json::array();
                std::string human;
                for (const auto& r : repo.list_operations(*all)) {
                    arr.push_back(r.to_json());
                    human += r.op_id + " " + std::string(ops::to_string(r.op_type)) + " " +
                             std::string(ops::to_string(r.state)) + " " + r.author + "\n";
                }
                emit(io, g, {{"format_version", 1}, {"operations", arr}}, human);
            });
            auto* status = leaf(o, "status", "Show one operation", "operation_status", "op status");
            auto* sid = str();
            status->add_option("op_id", *sid, "Operation id")->required();
            on(status, [&g, sid](Io& io) {
                auto repo = open_repo(g);
                auto doc = repo.operation_status(*sid).to_json();
                doc["format_version"] = 1;
                emit(io, g, doc, to_yaml(doc));
            });
            auto* pause = leaf(o, "pause", "Pause a running execution", "pause", "op pause");
            auto* pid = str();
            pause->add_option("op_id", *pid, "Operation id")->required();
            on(pause, [&g, pid](Io& io) {
                auto repo = open_repo(g);
                repo.pause(require_author(g), *pid);
                const auto rec = repo.operation_status(*pid);
                const auto state = std::string(ops::to_string(rec.state));
                emit(io, g, {{"format_version", 1}, {"op_id", *pid}, {"state", state}}, *pid + "\n" + state);
            });
            auto* resume = leaf(o, "resume", "Resume a paused execution in this process", "resume", "op resume");
            auto* rid = str();
            resume->add_option("op_id", *rid, "Operation id")->required();
            on(resume, [&g, rid](Io& io) {
                auto repo = open_repo(g);
                emit_receipt(io, g, repo.resume(require_author(g), *rid));
            });
            auto* stop = leaf(o, "stop", "Stop an operation (reverts by default)", "stop", "op stop");
            auto* tid = str();
            auto* commit = flag();
            stop->add_option("op_id", *tid, "Operation id")->required();
            stop->add_flag("--commit", *commit, "Commit instead when the work is complete and valid");
            on(stop, [&g, tid, commit](Io& io) {
                auto repo = open_repo(g);
                emit_receipt(io, g, repo.stop(require_author(g), *tid, !*commit));
            });
        }
        // recover
        {
            auto* c = leaf(&app_, "recover", "Roll back or forward operations left by dead processes", "recover", "recover");
            on(c, [&g](Io& io) {
                auto repo = open_repo(g);
                const auto report = repo.recover();
                std::string human;
                for (const auto& e : report.entries) {
                    human += e.op_id + " " + e.disposition + (e.torn_tail ? " (torn tail)" : "") + "\n";
                }
                if (report.empty()) human = "nothing to recover\n";
                emit(io, g, report.to_json(), human);
            });
        }
    }

    std::string* str() {
        owned_.emplace_back(new std::string);
        return owned_.back().get();
    }
    bool* flag() {
        owned_flags_.emplace_back(new bool(false));
        return owned_flags_.back().get();
    }

    CLI::App app_;
    Globals g_;
    Handler handler_;
    std::vector<Spec> specs_;
    std::vector<std::unique_ptr<std::string>> owned_;
    std::vector<std::unique_ptr<bool>> owned_flags_;
    std::vector<std::unique_ptr<int>> owned_ints_;
    std::vector<std::unique_ptr<std::vector<std::string>>> owned_vecs_;
};

void report_error(Io& io, bool json, const std::string& kind, const std::string& detail) {
    if (json) io.out << Json{{"error", {{"kind", kind}, {"detail", detail}}}}.dump() << "\n";
    io.err << "error: " << kind << ": " << detail << "\n";
}

}  // namespace

Result dispatch(const std::vector<std::string>& args) {
    App tree;
    Io io;
    int code = 0;
    std::vector<std::string> storage{"tablevault"};
    storage.insert(storage.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& s : storage) argv.push_back(s.data());
    const bool json_requested = std::find(args.begin(), args.end(), "--json") != args.end();
    try {
        tree.app().parse(static_cast<int>(argv.size()), argv.data());
        if (!tree.handler()) fail(ErrorKind::Validation, "no command given");
        tree.handler()(io);
    } catch (const CLI::CallForHelp& e) {
        code = tree.app().exit(e, io.out, io.err);
    } catch (const CLI::CallForAllHelp& e) {
        code = tree.app().exit(e, io.out, io.err);
    } catch (const CLI::ParseError& e) {
        report_error(io, json_requested, "ValidationError", e.what());
        code = exit_code_for(ErrorKind::Validation);
    } catch (const Error& e) {
        report_error(io, tree.globals().json || json_requested, std::string(to_string(e.kind())), e.detail());
        code = exit_code_for(e.kind());
    } catch (const std::exception& e) {
        report_error(io, tree.globals().json || json_requested, "InternalError", e.what());
        code = exit_code_for(ErrorKind::Internal);
    }
    return {code, io.out.str(), io.err.str()};
}

std::vector<std::string> subcommand_paths() {
    App tree;
    std::vector<std::string> out;
    std::function<void(const CLI::App*, const std::string&)> walk = [&](const CLI::App* a, const std::string& prefix) {
        const auto subs = a->get_subcommands([](const CLI::App*) { return true; });
        if (subs.empty() && !prefix.empty()) out.push_back(prefix);
        for (const auto* s : subs) walk(s, prefix.empty() ? s->get_name() : prefix + " " + s->get_name());
    };
    walk(&tree.app(), "");
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::pair<std::string, std::string>> operation_commands() {
    App tree;
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& s : tree.specs()) out.emplace_back(s.operation, s.path);
    return out;
}

}  // namespace tablevault::cli
