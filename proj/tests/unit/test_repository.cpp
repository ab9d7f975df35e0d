#include <doctest.h>

#include <atomic>
#include <thread>

#include "support/case_study.hpp"
#include "support/support.hpp"

using namespace tablevault;
using tvtest::TempDir;

namespace {

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::Internal;
}

TabularData two_rows() {
    TabularData f({{"name", Dtype::String}, {"n", Dtype::Int}});
    f.add_row({Cell{std::string("a")}, Cell{std::int64_t{1}}});
    f.add_row({Cell{std::string("b")}, Cell{std::int64_t{2}}});
    return f;
}

std::vector<Json> log_lines(const Repository& repo) {
    std::vector<Json> out;
    std::ifstream in(repo.layout().completed_log());
    std::string line;
    while (std::getline(in, line)) out.push_back(Json::parse(line));
    return out;
}

/// Files outside the places a repository may keep anything.
std::vector<std::string> stray_files(const fs::path& root) {
    std::vector<std::string> out;
    for (const auto& rel : tvtest::files_below(root)) {
        const bool ok = rel == "metadata/repository.yaml" || rel == "metadata/completed_log.jsonl" ||
                        rel.rfind("metadata/archive/", 0) == 0 || rel.rfind("metadata/lineage_index/", 0) == 0 ||
                        rel.rfind("metadata/locks/", 0) == 0 || rel.rfind("metadata/heartbeats/", 0) == 0 ||
                        rel.rfind("code_modules/", 0) == 0 || rel.rfind("tables/", 0) == 0;
        if (!ok) out.push_back(rel);
    }
    return out;
}

}  // namespace

TEST_SUITE("repository") {

TEST_CASE("init creates the layout and reopening changes nothing") {
    TempDir dir;
    const auto root = dir / "example_repository";
    {
        auto repo = Repository::init(root, "alice", tvtest::quick_options());
        CHECK(repo.list_tables().empty());
        CHECK(fs::is_directory(repo.layout().active_log()));
        CHECK(fs::is_directory(repo.layout().tables()));
        CHECK(load_yaml_file(repo.layout().config_file())["format_version"] == 1);
        const auto events = log_lines(repo);
        REQUIRE(events.size() == 1);
        CHECK(events[0]["op_type"] == "init_repository");
        CHECK(events[0]["author"] == "alice");
    }
    const auto before = tvtest::content_digest(root);
    const auto files = tvtest::files_below(root);
    auto again = Repository::init(root, "bob", tvtest::quick_options());
    CHECK(tvtest::content_digest(root) == before);
    CHECK(tvtest::files_below(root) == files);
    CHECK(Repository::is_repository(root));
}

TEST_CASE("init refuses files and foreign directories") {
    TempDir dir;
    tvtest::write_text(dir / "file", "x");
    CHECK(kind_of([&] { Repository::init(dir / "file", "alice"); }) == ErrorKind::RepositoryConflict);
    tvtest::write_text(dir / "busy" / "notes.txt", "x");
    CHECK(kind_of([&] { Repository::init(dir / "busy", "alice"); }) == ErrorKind::RepositoryConflict);
    CHECK(kind_of([&] { Repository::open(dir / "nowhere"); }) == ErrorKind::NotFound);
}

TEST_CASE("table names are unique and validated") {
    TempDir dir;
    auto repo = Repository::init(dir / "r", "alice", tvtest::quick_options());
    const auto receipt = repo.create_table("alice", "document-store");
    CHECK(is_operation_id(receipt.op_id));
    CHECK(fs::exists(repo.layout().table_dir("document-store") / "description.yaml"));
    CHECK(kind_of([&] { repo.create_table("alice", "document-store"); }) == ErrorKind::NameConflict);
    CHECK(kind_of([&] { repo.create_table("alice", "9bad name"); }) == ErrorKind::Validation);
    CHECK(kind_of([&] { repo.create_table("", "fine"); }) == ErrorKind::Validation);
    CHECK(repo.list_tables() == std::vector<std::string>{"document-store"});
}

TEST_CASE("temporary instances stay invisible to references") {
    TempDir dir;
    auto repo = Repository::init(dir / "r", "alice", tvtest::quick_options());
    CHECK(kind_of([&] { repo.create_instance("alice", "ghost-table"); }) == ErrorKind::NotFound);
    repo.create_table("alice", "openai-response");
    const auto r = repo.create_instance("alice", "openai-response", true);
    REQUIRE(r.instance);
    CHECK(is_instance_id(*r.instance));
    const auto info = repo.instance_info("openai-response", *r.instance);
    CHECK(info.status == "temporary");
    CHECK(info.external);
    CHECK(kind_of([&] { (void)repo.view().latest_instance("openai-response"); }) == ErrorKind::Resolve);
    CHECK(kind_of([&] { repo.get_dataframe("alice", "openai-response"); }) == ErrorKind::NotFound);
    // one pending external instance per table
    CHECK(kind_of([&] { repo.create_instance("alice", "openai-response", true); }) == ErrorKind::State);
}

TEST_CASE("write_instance commits data with one ingestion event") {
    TempDir dir;
    auto repo = Repository::init(dir / "r", "alice", tvtest::quick_options());
    repo.create_table("alice", "openai-response");
    repo.create_instance("alice", "openai-response", true);
    const auto frame = tvtest::edited_responses();
    const auto r = repo.write_instance("alice", "openai-response", frame, "manual format corrections", {}, "hand edit");
    REQUIRE(r.instance);
    CHECK(repo.instance_info("openai-response", *r.instance).status == "committed");
    CHECK(repo.get_dataframe("bob", "openai-response") == frame);
    const auto lineage = repo.query_metadata("alice", "openai-response", *r.instance, "lineage");
    CHECK(lineage["edges"].empty());
    REQUIRE(lineage.contains("ingestion"));
    CHECK(lineage["ingestion"]["description"] == "manual format corrections");
    CHECK(lineage["ingestion"]["author"] == "alice");
    CHECK(lineage["ingestion"]["source_note"] == "hand edit");
    const auto dir_i = repo.layout().instance_dir("openai-response", *r.instance);
    CHECK(lineage["ingestion"]["digest"] == instance_digest(read_file(dir_i / "data.csv"), dir_i / "artifacts"));
    std::size_t ingestions = 0;
    for (const auto& ev : log_lines(repo)) {
        if (ev.value("event", "") == "ingestion") ++ingestions;
    }
    CHECK(ingestions == 1);
    CHECK(kind_of([&] { repo.write_instance("alice", "openai-response", frame, "again"); }) == ErrorKind::State);
}

TEST_CASE("an empty frame commits a zero-row instance") {
    TempDir dir;
    auto repo = Repository::init(dir / "r", "alice", tvtest::quick_options());
    repo.create_table("alice", "empty");
    repo.create_instance("alice", "empty", true);
    TabularData f({{"a", Dtype::String}, {"b", Dtype::Float}});
    repo.write_instance("alice", "empty", f, "nothing yet");
    const auto back = repo.get_dataframe("alice", "empty");
    CHECK(back.num_rows() == 0);
    CHECK(back.columns() == f.columns());
}

TEST_CASE("a dangling artifact reference reverts the import completely") {
    TempDir dir;
    auto repo = Repository::init(dir / "r", "alice", tvtest::quick_options());
    repo.create_table("alice", "docs");
    repo.create_instance("alice", "docs", true);
    const auto before = tvtest::content_digest(repo.layout().root);
    TabularData f({{"name", Dtype::String}, {"file", Dtype::ArtifactString}});
    f.add_row({Cell{std::string("x")}, Cell{std::string("missing.pdf")}});
    tvtest::write_text(dir / "art" / "present.pdf", "pdf");
    CHECK(kind_of([&] { repo.write_instance("alice", "docs", f, "broken", dir / "art"); }) == ErrorKind::Validation);
    CHECK(tvtest::content_digest(repo.layout().root) == before);
    CHECK(repo.list_operations().empty());

    TabularData ok({{"name", Dtype::String}, {"file", Dtype::ArtifactString}});
    ok.add_row({Cell{std::string("x")}, Cell{std::string("present.pdf")}});
    const auto r = repo.write_instance("alice", "docs", ok, "fixed", dir / "art");
    const auto art = repo.layout().instance_dir("docs", *r.instance) / "artifacts" / "present.pdf";
    CHECK(read_file(art) == "pdf");
    // artifact cells come back relative
    CHECK(repo.get_dataframe("alice", "docs").at(0, 1) == Cell{std::string("present.pdf")});
}

TEST_CASE("historical instances read back byte-identically") {
    TempDir dir;
    auto repo = Repository::init(dir / "r", "alice", tvtest::quick_options());
    const auto first = tvtest::seed_keys(repo, "alice", "keys", {"a", "b"});
    const auto second = tvtest::seed_keys(repo, "alice", "keys", {"c"});
    CHECK(first < second);
    const auto a = repo.get_dataframe("carol", "keys", first).to_csv();
    CHECK(repo.get_dataframe("dave", "keys", first).to_csv() == a);
    CHECK(a == "k\na\nb\n");
    CHECK(repo.get_dataframe("carol", "keys").to_csv() == "k\nc\n");
}

TEST_CASE("the newest committed instance is the default") {
    TempDir dir;
    auto repo = Repository::init(dir / "r", "alice", tvtest::deterministic_options(7));
    std::vector<std::string> ids;
    for (int i = 0; i < 6; ++i) ids.push_back(tvtest::seed_keys(repo, "alice", "t", {std::to_string(i)}));
    repo.create_instance("alice", "t", true);  // pending, must be ignored
    CHECK(repo.view().latest_instance("t") == *std::max_element(ids.begin(), ids.end()));
    repo.delete_instance("alice", "t", ids.back());
    CHECK(repo.view().latest_instance("t") == ids[4]);
    CHECK(repo.get_dataframe("alice", "t").to_csv() == "k\n4\n");
}

TEST_CASE("partial data is visible to its author only") {
    TempDir dir;
    auto repo = Repository::init(dir / "r", "alice", tvtest::quick_options());
    tvtest::seed_keys(repo, "alice", "src", tvtest::numbered(4));
    repo.create_table("alice", "slow");
    const auto pending = *repo.create_instance("alice", "slow").instance;
    repo.create_builder_file("alice", "slow", "slow-index", tvtest::index_yaml("<<src.k>>"));
    repo.create_builder_file("alice", "slow", "v",
                             tvtest::probe_yaml("v", "    value: '<<self.file_name[self.index]>>'\n",
                                                "on_error: 'pause'\n"));
    // fail row 2 so the execution pauses with partial data
    repo.create_builder_file("alice", "slow", "w",
                             tvtest::probe_yaml("w", "    fail_rows: [2]\n    row: '<<self.file_name[self.index]>>'\n",
                                                "on_error: 'pause'\n"));
    const auto r = repo.execute_instance("alice", "slow");
    CHECK(r.state == "paused");
    const auto partial = repo.get_dataframe("alice", "slow", pending);
    CHECK(partial.num_rows() == 4);
    CHECK(kind_of([&] { repo.get_dataframe("mallory", "slow", pending); }) == ErrorKind::AccessDenied);
    CHECK(kind_of([&] { repo.get_dataframe("mallory", "slow"); }) == ErrorKind::NotFound);
    repo.stop("alice", r.op_id, true);
    CHECK(repo.list_operations().empty());
}

TEST_CASE("deleting an instance archives its metadata") {
    TempDir dir;
    auto repo = Repository::init(dir / "r", "alice", tvtest::quick_options());
    const auto cs = tvtest::run_case_study(repo);
    const auto before = repo.query_metadata("alice", "openai-response", cs.responses, "lineage");
    const auto builders_before = repo.query_metadata("alice", "openai-response", cs.responses, "builders");
    const auto receipt = repo.delete_instance("alice", "openai-response", cs.responses);
    CHECK(receipt.archived == std::vector<std::string>{cs.responses});
    CHECK_FALSE(fs::exists(repo.layout().instance_dir("openai-response", cs.responses)));
    CHECK(fs::exists(repo.layout().archive_instance("openai-response", cs.responses) / "lineage.yaml"));
    CHECK(repo.query_metadata("alice", "openai-response", cs.responses, "lineage") == before);
    CHECK(repo.query_metadata("alice", "openai-response", cs.responses, "builders") == builders_before);
    CHECK(repo.query_metadata("alice", "openai-response", cs.responses, "builders.model_response") ==
          std::string(tvtest::kResponseColumnYaml));
    CHECK(kind_of([&] { repo.get_dataframe("alice", "openai-response", cs.responses); }) == ErrorKind::NotFound);
    CHECK(kind_of([&] { repo.delete_instance("alice", "openai-response", cs.responses); }) == ErrorKind::NotFound);
    CHECK(repo.audit().empty());
}

TEST_CASE("deleting a table with three instances leaves three archived sets and no data") {
    TempDir dir;
    auto repo = Repository::init(dir / "r", "alice", tvtest::quick_options());
    for (int i = 0; i < 3; ++i) tvtest::seed_keys(repo, "alice", "t", {"v" + std::to_string(i)});
    const auto walk = [&](const fs::path& root, const std::string& name) {
        std::size_t n = 0;
        if (!fs::exists(root)) return n;
        for (const auto& e : fs::recursive_directory_iterator(root)) {
            if (e.is_regular_file() && e.path().filename() == name) ++n;
        }
        return n;
    };
    CHECK(walk(repo.layout().table_dir("t"), "data.csv") == 3);
    const auto receipt = repo.delete_table("alice", "t");
    CHECK(receipt.archived.size() == 3);
    CHECK(walk(repo.layout().tables(), "data.csv") == 0);
    CHECK(walk(repo.layout().archive(), "data.csv") == 0);
    CHECK(walk(repo.layout().archive_table("t"), "lineage.yaml") == 3);
    CHECK_FALSE(fs::exists(repo.layout().table_dir("t")));
    CHECK(kind_of([&] { repo.get_dataframe("alice", "t"); }) == ErrorKind::NotFound);
    // re-creation starts a fresh history while the archive stays put
    repo.create_table("alice", "t");
    CHECK(repo.list_instances("t").empty());
    CHECK(walk(repo.layout().archive_table("t"), "lineage.yaml") == 3);
}

TEST_CASE("builder documents are created once per name") {
    TempDir dir;
    auto repo = Repository::init(dir / "r", "alice", tvtest::quick_options());
    repo.create_table("alice", "document-store");
    const auto r = repo.create_builder_file("alice", "document-store", "document-store-index");
    REQUIRE(r.path);
    CHECK(fs::path(*r.path) == repo.builder_path("document-store", "document-store-index"));
    CHECK(fs::exists(*r.path));
    CHECK(kind_of([&] { repo.create_builder_file("alice", "document-store", "document-store-index"); }) ==
          ErrorKind::NameConflict);
    CHECK(kind_of([&] { repo.create_builder_file("alice", "ghost", "x"); }) == ErrorKind::NotFound);
    CHECK(repo.list_builders("document-store") == std::vector<std::string>{"document-store-index"});
    repo.create_code_module("alice", "openai_helper");
    CHECK(kind_of([&] { repo.create_code_module("alice", "openai_helper"); }) == ErrorKind::NameConflict);
    CHECK(repo.list_code_modules() == std::vector<std::string>{"openai_helper"});
}

TEST_CASE("metadata queries are logged with their caller") {
    TempDir dir;
    auto repo = Repository::init(dir / "r", "alice", tvtest::quick_options());
    const auto cs = tvtest::run_case_study(repo, "alice", false);
    const auto ops = repo.query_metadata("bob", "openai-response", std::nullopt, "operations");
    REQUIRE(ops.is_array());
    CHECK(std::any_of(ops.begin(), ops.end(), [](const Json& e) { return e.value("op_type", "") == "create_table"; }));
    const auto events = log_lines(repo);
    const auto& last = events.back();
    CHECK(last["event"] == "query");
    CHECK(last["author"] == "bob");
    CHECK(last["facet"] == "operations");
    CHECK(repo.query_metadata("bob", "document-store", cs.documents, "description")["format_version"] == 1);
    CHECK(kind_of([&] { repo.query_metadata("bob", "nothing", std::nullopt, "lineage"); }) == ErrorKind::NotFound);
    CHECK(repo.authors().count("bob") == 1);
}

TEST_CASE("committed instances never change and the layout stays canonical") {
    TempDir dir;
    auto repo = Repository::init(dir / "r", "alice", tvtest::quick_options());
    const auto cs = tvtest::run_case_study(repo);
    std::map<std::string, std::string> digests;
    for (const auto& t : repo.list_tables()) {
        for (const auto& i : repo.list_instances(t)) {
            const auto d = repo.layout().instance_dir(t, i.id);
            digests[t + "@" + i.id] = instance_digest(read_file(d / "data.csv"), d / "artifacts");
        }
    }
    // more activity, none of it touching existing instances
    tvtest::seed_keys(repo, "bob", "other", {"x"});
    repo.create_instance("alice", "openai-response");
    repo.execute_instance("alice", "openai-response");
    for (const auto& [key, digest] : digests) {
        const auto at = key.find('@');
        const auto d = repo.layout().instance_dir(key.substr(0, at), key.substr(at + 1));
        CHECK(instance_digest(read_file(d / "data.csv"), d / "artifacts") == digest);
    }
    CHECK(stray_files(repo.layout().root).empty());
    CHECK(repo.audit().empty());
    CHECK(repo.list_operations().empty());
}

TEST_CASE("audit flags an instance without builders or ingestion") {
    TempDir dir;
    auto repo = Repository::init(dir / "r", "alice", tvtest::quick_options());
    const auto id = tvtest::seed_keys(repo, "alice", "t", {"x"});
    CHECK(repo.audit().empty());
    const auto lineage = repo.layout().instance_dir("t", id) / "lineage.yaml";
    auto doc = load_yaml_file(lineage);
    doc.erase("ingestion");
    tvtest::write_text(lineage, to_yaml(doc));
    CHECK_FALSE(repo.audit().empty());
}

TEST_CASE("readers never see data without its metadata") {
    TempDir dir;
    auto writer = Repository::init(dir / "r", "alice", tvtest::quick_options());
    writer.create_table("alice", "t");
    std::atomic<bool> done{false};
    std::atomic<int> violations{0}, reads{0};
    std::thread reader([&] {
        auto repo = Repository::open(dir / "r", tvtest::quick_options());
        while (!done) {
            for (const auto& info : repo.list_instances("t")) {
                if (info.status != "committed") continue;
                const auto d = repo.layout().instance_dir("t", info.id);
                try {
                    const auto lineage = repo.query_metadata("reader", "t", info.id, "lineage");
                    const auto digest = instance_digest(read_file(d / "data.csv"), d / "artifacts");
                    if (lineage["ingestion"]["digest"] != digest) ++violations;
                    ++reads;
                } catch (const Error& e) {
                    if (e.kind() != ErrorKind::NotFound) ++violations;
                }
            }
        }
    });
    for (int i = 0; i < 25; ++i) {
        writer.create_instance("alice", "t", true);
        TabularData f({{"k", Dtype::Int}});
        for (int r = 0; r <= i; ++r) f.add_row({Cell{std::int64_t{r}}});
        writer.write_instance("alice", "t", f, "batch " + std::to_string(i));
    }
    done = true;
    reader.join();
    CHECK(violations == 0);
    CHECK(reads > 0);
}

TEST_CASE("api operations are named uniquely") {
    const auto names = api_operations();
    CHECK(std::set<std::string>(names.begin(), names.end()).size() == names.size());
    for (const char* op : {"init_repository", "create_table", "write_instance", "execute_instance", "trace"}) {
        CHECK(std::find(names.begin(), names.end(), op) != names.end());
    }
}

}  // TEST_SUITE
