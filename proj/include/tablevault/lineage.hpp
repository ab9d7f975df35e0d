#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tablevault/layout.hpp"
#include "tablevault/refparse.hpp"

namespace tablevault::lineage {

struct IngestionEvent {
    std::string author;
    std::string timestamp;
    std::string description;
    std::string digest;
    std::string source_note;

    [[nodiscard]] Json to_json() const;
    static IngestionEvent from_json(const Json& doc);
};

struct Edge {
    ref::Dependency source;
    std::string sink_slot;  // "column:<cols>/arg:<name>", "column:<cols>/exec:nthreads", ...
    std::vector<std::string> flags;
    Json extra = Json::object();  // unknown keys

    [[nodiscard]] Json to_json() const;
    static Edge from_json(const Json& doc);
};

struct LineageRecord {
    std::string table;
    std::string instance;
    std::string op_id;
    std::vector<std::string> author_chain;  // producing op first, human author last
    std::optional<IngestionEvent> ingestion;
    std::vector<Edge> edges;
    Json extra = Json::object();  // unknown keys, kept on rewrite

    [[nodiscard]] Json to_json() const;
    static LineageRecord from_json(const Json& doc);
};

/// lineage.yaml of a live or archived instance; nullopt when neither exists.
std::optional<LineageRecord> load(const Layout& layout, const std::string& table, const std::string& instance);
/// Where the instance's metadata currently lives (live dir first, then archive).
std::optional<fs::path> metadata_dir(const Layout& layout, const std::string& table, const std::string& instance);
bool is_archived(const Layout& layout, const std::string& table, const std::string& instance);

/// One line of a reverse-index file.
struct DownstreamEntry {
    std::string table;
    std::string instance;
    std::string sink_slot;

    friend bool operator==(const DownstreamEntry&, const DownstreamEntry&) = default;
    friend bool operator<(const DownstreamEntry& a, const DownstreamEntry& b) {
        return std::tie(a.table, a.instance, a.sink_slot) < std::tie(b.table, b.instance, b.sink_slot);
    }
};

Json to_index_line(const DownstreamEntry& entry);
/// First line of an instance's own index file, written when it commits.
/// A file without it (or no file) is not trusted and the records are scanned.
Json index_header(const std::string& table, const std::string& instance);
/// Reverse index of (table, instance); falls back to a scan when the file is
/// missing or lacks its header.
std::vector<DownstreamEntry> downstream_of(const Layout& layout, const std::string& table,
                                         const std::string& instance);
/// Oracle: full scan of every lineage record, live and archived.
std::vector<DownstreamEntry> scan_downstream(const Layout& layout, const std::string& table,
                                           const std::string& instance);

/// Every (table, instance) with a lineage record, live and archived.
std::vector<std::pair<std::string, std::string>> all_records(const Layout& layout);

enum class Direction { Upstream, Downstream };

struct Node {
    std::string table;
    std::string instance;
    bool archived = false;
    bool external = false;
    std::optional<IngestionEvent> ingestion;
    int depth = 0;
};

struct GraphEdge {
    std::string from_table, from_instance;  // source of the data
    std::string to_table, to_instance;      // consumer
    std::string sink_slot;
    std::string pattern;
};

struct Graph {
    std::vector<Node> nodes;
    std::vector<GraphEdge> edges;

    [[nodiscard]] Json to_json() const;
};

/// Breadth-first walk; `depth` limits the hop count (nullopt = unbounded).
Graph trace(const Layout& layout, const std::string& table, const std::string& instance, Direction direction,
            std::optional<int> depth = std::nullopt);

/// True when the lineage graph over all records admits a topological order.
bool is_acyclic(const Layout& layout);

}  // namespace tablevault::lineage
