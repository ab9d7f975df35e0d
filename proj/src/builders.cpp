#include "tablevault/builders.hpp"

#include <fcntl.h>
#include <poll.h>
#include <sys/file.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cerrno>
#include <cstring>
#include <thread>

#include "tablevault/error.hpp"
#include "tablevault/yaml_json.hpp"

extern char** environ;

namespace tablevault {

std::string_view to_string(BuilderType type) noexcept {
    return type == BuilderType::Index ? "IndexBuilder" : "ColumnBuilder";
}

namespace {

[[noreturn]] void invalid(const std::string& field, const std::string& why) {
    fail(ErrorKind::BuilderValidation, field + ": " + why);
}

std::vector<std::string> string_list(const Json& doc, const std::string& field) {
    const auto& v = doc.at(field);
    if (!v.is_array()) invalid(field, "expected a list of column names");
    std::vector<std::string> out;
    for (const auto& item : v) {
        if (!item.is_string() || item.get<std::string>().empty()) invalid(field, "expected a list of column names");
        out.push_back(item.get<std::string>());
    }
    std::set<std::string> uniq(out.begin(), out.end());
    if (uniq.size() != out.size()) invalid(field, "duplicate column name");
    return out;
}

std::string required_string(const Json& doc, const std::string& field) {
    if (!doc.contains(field) || doc[field].is_null()) invalid(field, "missing required field");
    if (!doc[field].is_string() || doc[field].get<std::string>().empty()) invalid(field, "expected a non-empty string");
    return doc[field].get<std::string>();
}

BuilderArgument make_argument(const Json& value, const std::string& field) {
    BuilderArgument arg;
    arg.literal = value;
    if (value.is_string() && ref::is_reference(value.get<std::string>())) {
        try {
            arg.ref = ref::parse(value.get<std::string>());
        } catch (const Error& e) {
            invalid(field, e.detail());
        }
    }
    return arg;
}

std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (const auto& s : v) {
        if (!out.empty()) out += ",";
        out += s;
    }
    return out;
}

}  // namespace

std::vector<std::pair<std::string, const BuilderArgument*>> BuilderSpec::slots() const {
    const std::string prefix = (builder_type == BuilderType::Index ? "index:" : "column:") + join(changed_columns);
    std::vector<std::pair<std::string, const BuilderArgument*>> out;
    for (const auto& [name, arg] : arguments) out.emplace_back(prefix + "/arg:" + name, &arg);
    if (nthreads) out.emplace_back(prefix + "/exec:nthreads", &*nthreads);
    return out;
}

BuilderSpec load_builder(std::string_view bytes, std::string name) {
    Json doc;
    try {
        doc = parse_yaml(bytes);
    } catch (const Error& e) {
        invalid("document", e.detail());
    }
    if (!doc.is_object()) invalid("document", "expected a mapping");
    BuilderSpec spec;
    spec.name = std::move(name);
    spec.document = doc;

    if (doc.contains("format_version") && doc["format_version"] != 1) invalid("format_version", "unsupported version");
    const auto type = required_string(doc, "builder_type");
    if (type == "IndexBuilder") {
        spec.builder_type = BuilderType::Index;
    } else if (type == "ColumnBuilder") {
        spec.builder_type = BuilderType::Column;
    } else {
        invalid("builder_type", "unknown builder type '" + type + "'");
    }
    if (!doc.contains("changed_columns") || doc["changed_columns"].is_null()) {
        invalid("changed_columns", "missing required field");
    }
    spec.changed_columns = string_list(doc, "changed_columns");
    if (spec.changed_columns.empty()) invalid("changed_columns", "must name at least one column");
    if (doc.contains("primary_key") && !doc["primary_key"].is_null()) {
        if (spec.builder_type != BuilderType::Index) invalid("primary_key", "only an IndexBuilder declares a primary key");
        spec.primary_key = string_list(doc, "primary_key");
        for (const auto& k : spec.primary_key) {
            if (std::find(spec.changed_columns.begin(), spec.changed_columns.end(), k) == spec.changed_columns.end()) {
                invalid("primary_key", "column '" + k + "' is not in changed_columns");
            }
        }
    }
    spec.python_function = required_string(doc, "python_function");
    spec.code_module = required_string(doc, "code_module");
    if (doc.contains("is_custom") && !doc["is_custom"].is_null()) {
        if (!doc["is_custom"].is_boolean()) invalid("is_custom", "expected true or false");
        spec.is_custom = doc["is_custom"].get<bool>();
    }
    if (doc.contains("arguments") && !doc["arguments"].is_null()) {
        if (!doc["arguments"].is_object()) invalid("arguments", "expected a mapping");
        for (const auto& [k, v] : doc["arguments"].items()) spec.arguments.emplace(k, make_argument(v, "arguments." + k));
    }
    if (doc.contains("dtypes") && !doc["dtypes"].is_null()) {
        if (!doc["dtypes"].is_object()) invalid("dtypes", "expected a mapping");
        for (const auto& [col, v] : doc["dtypes"].items()) {
            const auto field = "dtypes." + col;
            if (std::find(spec.changed_columns.begin(), spec.changed_columns.end(), col) == spec.changed_columns.end() &&
                std::find(spec.primary_key.begin(), spec.primary_key.end(), col) == spec.primary_key.end()) {
                invalid(field, "column is not in changed_columns or primary_key");
            }
            if (!v.is_string()) invalid(field, "expected a dtype name");
            try {
                spec.dtypes[col] = parse_dtype(v.get<std::string>());
            } catch (const Error& e) {
                invalid(field, e.detail());
            }
        }
    }
    if (doc.contains("nthreads") && !doc["nthreads"].is_null()) {
        if (spec.builder_type != BuilderType::Column) invalid("nthreads", "only a ColumnBuilder takes nthreads");
        const auto& v = doc["nthreads"];
        if (v.is_number_integer()) {
            if (v.get<std::int64_t>() < 1) invalid("nthreads", "must be a positive integer");
        } else if (!(v.is_string() && ref::is_reference(v.get<std::string>()))) {
            invalid("nthreads", "expected a positive integer or a reference string");
        }
        spec.nthreads = make_argument(v, "nthreads");
        if (spec.nthreads->ref && ref::is_row_dependent(*spec.nthreads->ref)) {
            invalid("nthreads", "cannot depend on the current row");
        }
    }
    if (doc.contains("on_error") && !doc["on_error"].is_null()) {
        const auto v = doc["on_error"].is_string() ? doc["on_error"].get<std::string>() : std::string();
        if (v == "revert") {
            spec.on_error = OnError::Revert;
        } else if (v == "pause") {
            spec.on_error = OnError::Pause;
        } else {
            invalid("on_error", "expected 'revert' or 'pause'");
        }
    }
    if (doc.contains("retries") && !doc["retries"].is_null()) {
        if (!doc["retries"].is_number_integer() || doc["retries"].get<std::int64_t>() < 0) {
            invalid("retries", "expected a non-negative integer");
        }
        spec.retries = doc["retries"].get<int>();
    }
    return spec;
}

// ---- builtin executors ------------------------------------------------------------------

namespace {

std::string arg_string(const ExecutorCall& call, const std::string& name) {
    if (!call.args.contains(name)) fail(ErrorKind::Validation, "missing argument '" + name + "'");
    const auto& v = call.args[name];
    if (!v.is_string()) fail(ErrorKind::Type, "argument '" + name + "' must be a string");
    return v.get<std::string>();
}

Json create_paper_table_from_folder(const ExecutorCall& call) {
    const fs::path folder = arg_string(call, "folder_dir");
    fs::path dest;
    if (call.args.contains("artifact_folder") && call.args["artifact_folder"].is_string()) {
        dest = call.args["artifact_folder"].get<std::string>();
    } else if (call.artifact_folder) {
        dest = *call.artifact_folder;
    } else {
        fail(ErrorKind::Context, "no artifact folder bound");
    }
    if (!fs::is_directory(folder)) fail(ErrorKind::NotFound, "folder " + folder.string() + " does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(folder)) {
        if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    fs::create_directories(dest);
    Json rows = Json::array();
    for (const auto& f : files) {
        const auto name = f.filename().string();
        fs::copy_file(f, dest / name, fs::copy_options::overwrite_existing);
        Json row = Json::object();
        row[call.columns.empty() ? "file_name" : call.columns[0]] = name;
        if (call.columns.size() > 1) row[call.columns[1]] = name;
        rows.push_back(row);
    }
    return rows;
}

Json create_data_table_from_table(const ExecutorCall& call) {
    if (!call.args.contains("folder_dir")) fail(ErrorKind::Validation, "missing argument 'folder_dir'");
    const auto& src = call.args["folder_dir"];
    const auto column = call.columns.empty() ? std::string("file_name") : call.columns[0];
    Json values = Json::array();
    if (src.is_array()) {
        values = src;
    } else if (src.is_object() && src.contains("rows")) {
        const auto frame = TabularData::from_json(src);
        const auto col = frame.column_index(column).value_or(0);
        for (const auto& c : frame.column_values(col)) values.push_back(cell_to_json(c));
    } else {
        values.push_back(src);
    }
    Json rows = Json::array();
    for (const auto& v : values) rows.push_back({{column, v}});
    return rows;
}

Json ask_openai(const ExecutorCall& call) {
    const auto path = arg_string(call, "document");
    auto text = read_file(path);
    std::transform(text.begin(), text.end(), text.begin(), [](unsigned char c) { return std::tolower(c); });
    return text.find("once upon a time") != std::string::npos ? "fiction" : "this is nonfiction";
}

Json probe(const ExecutorCall& call) {
    const auto& a = call.args;
    if (a.contains("sleep_ms") && a["sleep_ms"].is_number()) {
        std::this_thread::sleep_for(std::chrono::milliseconds(a["sleep_ms"].get<std::int64_t>()));
    }
    if (a.contains("log") && a["log"].is_string()) {
        Json line = {{"row", call.row ? Json(*call.row) : Json(nullptr)}, {"op_id", call.op_id}};
        append_line_locked(a["log"].get<std::string>(), line.dump(), false);
    }
    const bool fail_row = a.value("fail", false) ||
                          (a.contains("fail_rows") && call.row &&
                           std::find(a["fail_rows"].begin(), a["fail_rows"].end(), Json(*call.row)) != a["fail_rows"].end());
    if (fail_row) fail(ErrorKind::Validation, "probe failure requested");
    if (a.contains("value")) return a["value"];
    return call.row ? Json(*call.row) : Json(nullptr);
}

}  // namespace

ExecutorRegistry::ExecutorRegistry() {
    register_builtin("table_generation", "create_paper_table_from_folder", create_paper_table_from_folder);
    register_builtin("table_generation", "create_data_table_from_table", create_data_table_from_table);
    register_builtin("openai_helper", "ask_openai", ask_openai);
    register_builtin("testing", "probe", probe);
    register_builtin("testing", "echo", [](const ExecutorCall& c) { return c.args.value("value", Json(nullptr)); });
}

void ExecutorRegistry::register_builtin(const std::string& module, const std::string& function, Executor fn,
                                        bool serial) {
    std::lock_guard lock(mu_);
    builtins_[{module, function}] = ExecutorEntry{std::move(fn), serial};
}

bool ExecutorRegistry::is_builtin(const std::string& module) const {
    std::lock_guard lock(mu_);
    return std::any_of(builtins_.begin(), builtins_.end(), [&](const auto& kv) { return kv.first.first == module; });
}

std::optional<ExecutorEntry> ExecutorRegistry::find(const std::string& module, const std::string& function,
                                                    const fs::path& code_modules) const {
    {
        std::lock_guard lock(mu_);
        if (auto it = builtins_.find({module, function}); it != builtins_.end()) return it->second;
    }
    if (!is_valid_document_name(module) || function.empty() || function.find('/') != std::string::npos) {
        return std::nullopt;
    }
    const auto program = code_modules / module / function;
    if (::access(program.c_str(), X_OK) != 0 || !fs::is_regular_file(program)) return std::nullopt;
    return ExecutorEntry{[program](const ExecutorCall& call) {
                             Json payload = {{"args", call.args}, {"op_id", call.op_id}, {"columns", call.columns}};
                             if (call.artifact_folder) payload["artifact_folder"] = call.artifact_folder->string();
                             if (call.row) payload["row"] = *call.row;
                             return invoke_subprocess(program, payload);
                         },
                         false};
}

Json invoke_subprocess(const fs::path& program, const Json& payload) {
    int in_pipe[2];
    int out_pipe[2];
    if (::pipe2(in_pipe, O_CLOEXEC) != 0) fail(ErrorKind::Io, "pipe failed");
    if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
        ::close(in_pipe[0]);
        ::close(in_pipe[1]);
        fail(ErrorKind::Io, "pipe failed");
    }
    const auto path = program.string();
    const pid_t pid = ::fork();
    if (pid < 0) fail(ErrorKind::Io, "fork failed");
    if (pid == 0) {
        ::dup2(in_pipe[0], 0);
        ::dup2(out_pipe[1], 1);
        char* argv[] = {const_cast<char*>(path.c_str()), nullptr};
        ::execve(path.c_str(), argv, environ);
        ::_exit(127);
    }
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    const auto input = payload.dump() + "\n";
    std::string output;
    std::size_t written = 0;
    bool in_open = true;
    pollfd fds[2] = {{in_pipe[1], POLLOUT, 0}, {out_pipe[0], POLLIN, 0}};
    bool out_open = true;
    while (out_open) {
        fds[0].fd = in_open ? in_pipe[1] : -1;
        if (::poll(fds, 2, -1) < 0) {
            if (errno == EINTR) continue;
            break;
        }
        if (in_open && (fds[0].revents & (POLLOUT | POLLERR | POLLHUP))) {
            const auto n = ::write(in_pipe[1], input.data() + written, input.size() - written);
            if (n > 0) written += static_cast<std::size_t>(n);
            if (n < 0 || written == input.size()) {
                ::close(in_pipe[1]);
                in_open = false;
            }
        }
        if (fds[1].revents & (POLLIN | POLLHUP | POLLERR)) {
            char buf[8192];
            const auto n = ::read(out_pipe[0], buf, sizeof buf);
            if (n > 0) {
                output.append(buf, static_cast<std::size_t>(n));
            } else if (n == 0 || errno != EINTR) {
                out_open = false;
            }
        }
    }
    if (in_open) ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    int status = 0;
    while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
    }
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
        fail(ErrorKind::Validation, "executor " + path + " exited abnormally (status " + std::to_string(status) + ")");
    }
    const auto doc = Json::parse(output, nullptr, false);
    if (!doc.is_object()) fail(ErrorKind::Validation, "executor " + path + " wrote malformed output");
    if (doc.contains("error")) {
        fail(ErrorKind::Validation, "executor " + path + " failed: " +
                                        (doc["error"].is_string() ? doc["error"].get<std::string>() : doc["error"].dump()));
    }
    if (!doc.contains("value")) fail(ErrorKind::Validation, "executor " + path + " returned no value");
    return doc["value"];
}

Json value_to_argument(const ref::Value& value) { return value.to_json(); }

// ---- row evaluation ---------------------------------------------------------------------

std::vector<RowOutcome> evaluate_rows(std::size_t rows, std::size_t nthreads,
                                      const std::function<Json(std::size_t)>& call,
                                      const std::vector<std::optional<Json>>& done,
                                      const std::function<void(std::size_t, const RowOutcome&)>& on_done,
                                      const std::function<bool()>& should_stop, int retries) {
    if (nthreads == 0) fail(ErrorKind::Validation, "nthreads must be at least 1");
    std::vector<RowOutcome> out(rows);
    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < rows; ++i) {
        if (i < done.size() && done[i]) {
            out[i].value = *done[i];
        } else {
            todo.push_back(i);
        }
    }
    std::mutex mu;
    std::size_t next = 0;
    bool halted = false;
    auto worker = [&] {
        for (;;) {
            std::size_t row = 0;
            {
                std::lock_guard lock(mu);
                if (halted || next >= todo.size()) return;
                if (should_stop && should_stop()) {
                    halted = true;
                    return;
                }
                row = todo[next++];
            }
            RowOutcome outcome;
            for (int attempt = 0; attempt <= retries; ++attempt) {
                try {
                    outcome.value = call(row);
                    outcome.error.clear();
                    break;
                } catch (const std::exception& e) {
                    outcome.error = e.what();
                }
            }
            std::lock_guard lock(mu);
            out[row] = outcome;
            if (on_done) on_done(row, outcome);
            if (!outcome.value) halted = true;
        }
    };
    const auto workers = std::min(nthreads, todo.size());
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    return out;
}

}  // namespace tablevault
