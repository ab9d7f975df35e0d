#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace tablevault {

namespace fs = std::filesystem;
using Json = nlohmann::json;
using TimePoint = std::chrono::system_clock::time_point;

/// Source of wall-clock time and random id suffixes. Repositories take one of
/// these so that tests can replay an operation byte-for-byte.
class Environment {
public:
    static std::shared_ptr<Environment> system();
    /// Clock starts at `start` and advances by one microsecond per reading.
    static std::shared_ptr<Environment> deterministic(std::uint64_t seed, TimePoint start);

    TimePoint now();
    std::string random_suffix(std::size_t length = 6);

private:
    Environment(bool deterministic, std::uint64_t seed, TimePoint start);

    std::mutex mu_;
    bool deterministic_;
    std::mt19937_64 rng_;
    TimePoint next_;
};

/// `yyyymmddThhmmss.micro` in UTC.
std::string compact_timestamp(TimePoint tp);
/// `yyyy-mm-ddThh:mm:ss.microZ`.
std::string iso8601(TimePoint tp);

bool is_instance_id(std::string_view text);
bool is_operation_id(std::string_view text);
std::string make_instance_id(Environment& env);
std::string make_operation_id(Environment& env);

// Table names: [a-z][a-z0-9_-]*, at most 128 bytes.
bool is_valid_table_name(std::string_view name);
// Builder and code module names share the table-name rule, uppercase allowed.
bool is_valid_document_name(std::string_view name);

// ---- file helpers ---------------------------------------------------------

std::string read_file(const fs::path& path);
void fsync_path(const fs::path& path);
void fsync_parent(const fs::path& path);
/// Write via a sibling temp file and rename, so readers never see a torn file.
void write_file_atomic(const fs::path& path, std::string_view bytes, bool sync);
/// Append one line under an advisory file lock; one write(2) per line.
void append_line_locked(const fs::path& path, std::string_view line, bool sync);
/// Hard link `from` to `to`; full copy when the filesystem refuses links.
void link_or_copy(const fs::path& from, const fs::path& to);
/// Creates missing directories and returns the ones created, outermost first.
std::vector<fs::path> create_directories_tracked(const fs::path& dir);

/// Relative path with '/' separators; throws Scope if `path` escapes `root`.
std::string relative_within(const fs::path& root, const fs::path& path);

// ---- digests --------------------------------------------------------------

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const fs::path& path);

/// Digest over every directory and file below the given subtrees of `root`
/// (relative paths, sorted). Missing subtrees contribute nothing.
std::string tree_digest(const fs::path& root, const std::vector<std::string>& subtrees);

/// RAII advisory lock (flock) on a lock file.
class FileLock {
public:
    explicit FileLock(const fs::path& path);
    ~FileLock();
    FileLock(const FileLock&) = delete;
    FileLock& operator=(const FileLock&) = delete;

private:
    int fd_ = -1;
};

}  // namespace tablevault
