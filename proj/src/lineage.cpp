#include "tablevault/lineage.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <map>
#include <set>

#include "tablevault/error.hpp"
#include "tablevault/yaml_json.hpp"

namespace tablevault::lineage {

Json IngestionEvent::to_json() const {
    Json j = {{"author", author}, {"timestamp", timestamp}, {"description", description}, {"digest", digest}};
    if (!source_note.empty()) j["source_note"] = source_note;
    return j;
}

IngestionEvent IngestionEvent::from_json(const Json& doc) {
    return {doc.value("author", std::string()), doc.value("timestamp", std::string()),
            doc.value("description", std::string()), doc.value("digest", std::string()),
            doc.value("source_note", std::string())};
}

Json Edge::to_json() const {
    Json j = extra.is_object() ? extra : Json::object();
    j.update(Json{{"source",
               {{"table", source.table},
                {"instance", source.instance},
                {"columns", Json(std::vector<std::string>(source.columns.begin(), source.columns.end()))},
                {"pattern", std::string(ref::to_string(source.pattern))}}},
              {"sink_slot", sink_slot}});
    if (!flags.empty()) j["flags"] = flags;
    return j;
}

Edge Edge::from_json(const Json& doc) {
    Edge e;
    const auto& s = doc.at("source");
    e.source.table = s.value("table", std::string());
    e.source.instance = s.value("instance", std::string());
    if (s.contains("columns")) {
        for (const auto& c : s["columns"]) e.source.columns.insert(c.get<std::string>());
    }
    e.source.pattern = ref::parse_access_pattern(s.value("pattern", std::string("reduction")));
    e.sink_slot = doc.value("sink_slot", std::string());
    if (doc.contains("flags")) e.flags = doc["flags"].get<std::vector<std::string>>();
    for (const auto& [k, v] : doc.items()) {
        if (k != "source" && k != "sink_slot" && k != "flags") e.extra[k] = v;
    }
    return e;
}

namespace {
const std::set<std::string> kKnownKeys{"format_version", "target", "op_id", "author_chain", "ingestion", "edges"};
}

Json LineageRecord::to_json() const {
    Json j = extra.is_object() ? extra : Json::object();
    j["format_version"] = 1;
    j["target"] = {{"table", table}, {"instance", instance}};
    j["op_id"] = op_id;
    j["author_chain"] = author_chain;
    if (ingestion) j["ingestion"] = ingestion->to_json();
    Json arr = Json::array();
    for (const auto& e : edges) arr.push_back(e.to_json());
    j["edges"] = arr;
    return j;
}

LineageRecord LineageRecord::from_json(const Json& doc) {
    if (!doc.is_object()) fail(ErrorKind::Validation, "lineage document is not a mapping");
    LineageRecord r;
    if (doc.contains("target")) {
        r.table = doc["target"].value("table", std::string());
        r.instance = doc["target"].value("instance", std::string());
    }
    r.op_id = doc.value("op_id", std::string());
    if (doc.contains("author_chain")) r.author_chain = doc["author_chain"].get<std::vector<std::string>>();
    if (doc.contains("ingestion") && doc["ingestion"].is_object()) r.ingestion = IngestionEvent::from_json(doc["ingestion"]);
    if (doc.contains("edges") && doc["edges"].is_array()) {
        for (const auto& e : doc["edges"]) r.edges.push_back(Edge::from_json(e));
    }
    for (const auto& [k, v] : doc.items()) {
        if (!kKnownKeys.count(k)) r.extra[k] = v;
    }
    return r;
}

std::optional<fs::path> metadata_dir(const Layout& layout, const std::string& table, const std::string& instance) {
    if (!is_instance_id(instance) || !is_valid_table_name(table)) return std::nullopt;
    std::error_code ec;
    const auto live = layout.instance_dir(table, instance);
    if (fs::exists(live / "lineage.yaml", ec)) return live;
    const auto archived = layout.archive_instance(table, instance);
    if (fs::exists(archived / "archive.yaml", ec)) return archived;
    if (fs::exists(live, ec)) return live;
    return std::nullopt;
}

bool is_archived(const Layout& layout, const std::string& table, const std::string& instance) {
    std::error_code ec;
    return is_instance_id(instance) && is_valid_table_name(table) &&
           fs::exists(layout.archive_instance(table, instance) / "archive.yaml", ec) &&
           !fs::exists(layout.instance_dir(table, instance) / "lineage.yaml", ec);
}

std::optional<LineageRecord> load(const Layout& layout, const std::string& table, const std::string& instance) {
    const auto dir = metadata_dir(layout, table, instance);
    if (!dir || !fs::exists(*dir / "lineage.yaml")) return std::nullopt;
    try {
        auto rec = LineageRecord::from_json(load_yaml_file(*dir / "lineage.yaml"));
        if (rec.table.empty()) rec.table = table;
        if (rec.instance.empty()) rec.instance = instance;
        return rec;
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::NotFound) return std::nullopt;  // deleted while reading
        throw;
    }
}

Json to_index_line(const DownstreamEntry& entry) {
    return {{"table", entry.table}, {"instance", entry.instance}, {"sink_slot", entry.sink_slot}};
}

std::vector<std::pair<std::string, std::string>> all_records(const Layout& layout) {
    std::set<std::pair<std::string, std::string>> out;
    std::error_code ec;
    for (const auto& base : {layout.tables(), layout.archive()}) {
        for (const auto& t : fs::directory_iterator(base, ec)) {
            if (!t.is_directory()) continue;
            const auto table = t.path().filename().string();
            for (const auto& i : fs::directory_iterator(t.path(), ec)) {
                const auto id = i.path().filename().string();
                if (is_instance_id(id) && fs::exists(i.path() / "lineage.yaml")) out.emplace(table, id);
            }
        }
    }
    return {out.begin(), out.end()};
}

Json index_header(const std::string& table, const std::string& instance) {
    return {{"format_version", 1}, {"index_of", {{"table", table}, {"instance", instance}}}};
}

std::vector<DownstreamEntry> scan_downstream(const Layout& layout, const std::string& table,
                                             const std::string& instance) {
    std::set<DownstreamEntry> out;
    for (const auto& [t, i] : all_records(layout)) {
        const auto rec = load(layout, t, i);
        if (!rec) continue;
        for (const auto& e : rec->edges) {
            if (e.source.table == table && e.source.instance == instance) out.insert({t, i, e.sink_slot});
        }
    }
    return {out.begin(), out.end()};
}

std::vector<DownstreamEntry> downstream_of(const Layout& layout, const std::string& table,
                                           const std::string& instance) {
    const auto file = layout.reverse_index(table, instance);
    if (!fs::exists(file)) return scan_downstream(layout, table, instance);
    std::set<DownstreamEntry> out;
    bool headed = false;
    std::ifstream in(file);
    std::string line;
    while (std::getline(in, line)) {
        const auto j = Json::parse(line, nullptr, false);
        if (!j.is_object()) continue;
        if (!j.contains("sink_slot")) {
            headed = headed || j == index_header(table, instance);
            continue;
        }
        out.insert({j.value("table", std::string()), j.value("instance", std::string()),
                    j.value("sink_slot", std::string())});
    }
    if (!headed) return scan_downstream(layout, table, instance);
    return {out.begin(), out.end()};
}

Json Graph::to_json() const {
    Json ns = Json::array();
    for (const auto& n : nodes) {
        Json j = {{"table", n.table}, {"instance", n.instance}, {"archived", n.archived},
                  {"external", n.external}, {"depth", n.depth}};
        if (n.ingestion) j["ingestion"] = n.ingestion->to_json();
        ns.push_back(j);
    }
    Json es = Json::array();
    for (const auto& e : edges) {
        es.push_back({{"source", {{"table", e.from_table}, {"instance", e.from_instance}}},
                      {"sink", {{"table", e.to_table}, {"instance", e.to_instance}}},
                      {"sink_slot", e.sink_slot},
                      {"pattern", e.pattern}});
    }
    return {{"format_version", 1}, {"nodes", ns}, {"edges", es}};
}

Graph trace(const Layout& layout, const std::string& table, const std::string& instance, Direction direction,
            std::optional<int> depth) {
    if (!metadata_dir(layout, table, instance) || !load(layout, table, instance)) {
        fail(ErrorKind::NotFound, "no committed or archived instance " + table + "@" + instance);
    }
    Graph g;
    std::set<std::pair<std::string, std::string>> seen{{table, instance}};
    std::set<std::tuple<std::string, std::string, std::string, std::string, std::string>> edge_seen;
    std::deque<std::pair<std::pair<std::string, std::string>, int>> queue{{{table, instance}, 0}};
    auto make_node = [&](const std::string& t, const std::string& i, int d) {
        Node n{t, i, is_archived(layout, t, i), false, std::nullopt, d};
        if (const auto rec = load(layout, t, i)) {
            n.ingestion = rec->ingestion;
            n.external = rec->ingestion.has_value();
        }
        return n;
    };
    g.nodes.push_back(make_node(table, instance, 0));
    while (!queue.empty()) {
        const auto [key, d] = queue.front();
        queue.pop_front();
        if (depth && d >= *depth) continue;
        std::vector<GraphEdge> next;
        if (direction == Direction::Upstream) {
            const auto rec = load(layout, key.first, key.second);
            if (!rec) continue;
            for (const auto& e : rec->edges) {
                next.push_back({e.source.table, e.source.instance, key.first, key.second, e.sink_slot,
                                std::string(ref::to_string(e.source.pattern))});
            }
        } else {
            for (const auto& down : downstream_of(layout, key.first, key.second)) {
                std::string pattern;
                if (const auto rec = load(layout, down.table, down.instance)) {
                    for (const auto& e : rec->edges) {
                        if (e.source.table == key.first && e.source.instance == key.second &&
                            e.sink_slot == down.sink_slot) {
                            pattern = std::string(ref::to_string(e.source.pattern));
                        }
                    }
                }
                next.push_back({key.first, key.second, down.table, down.instance, down.sink_slot, pattern});
            }
        }
        for (auto& e : next) {
            if (!edge_seen.insert({e.from_table + "@" + e.from_instance, e.to_table, e.to_instance, e.sink_slot, ""})
                     .second) {
                continue;
            }
            const auto other = direction == Direction::Upstream ? std::make_pair(e.from_table, e.from_instance)
                                                                : std::make_pair(e.to_table, e.to_instance);
            g.edges.push_back(std::move(e));
            if (seen.insert(other).second) {
                g.nodes.push_back(make_node(other.first, other.second, d + 1));
                queue.push_back({other, d + 1});
            }
        }
    }
    return g;
}

bool is_acyclic(const Layout& layout) {
    std::map<std::pair<std::string, std::string>, std::set<std::pair<std::string, std::string>>> upstream;
    for (const auto& key : all_records(layout)) {
        auto& deps = upstream[key];
        if (const auto rec = load(layout, key.first, key.second)) {
            for (const auto& e : rec->edges) deps.insert({e.source.table, e.source.instance});
        }
    }
    // Kahn's algorithm over the upstream relation.
    std::map<std::pair<std::string, std::string>, int> pending;
    std::map<std::pair<std::string, std::string>, std::vector<std::pair<std::string, std::string>>> consumers;
    for (const auto& [node, deps] : upstream) {
        pending[node] += 0;
        for (const auto& d : deps) {
            pending[node] += 1;
            pending[d] += 0;
            consumers[d].push_back(node);
        }
    }
    std::deque<std::pair<std::string, std::string>> ready;
    for (const auto& [node, n] : pending) {
        if (n == 0) ready.push_back(node);
    }
    std::size_t visited = 0;
    while (!ready.empty()) {
        const auto node = ready.front();
        ready.pop_front();
        ++visited;
        for (const auto& c : consumers[node]) {
            if (--pending[c] == 0) ready.push_back(c);
        }
    }
    return visited == pending.size();
}

}  // namespace tablevault::lineage
