#include "tablevault/util.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <openssl/evp.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <ctime>
#include <fstream>
#include <sstream>

#include "tablevault/error.hpp"
#include "tablevault/fault.hpp"

namespace tablevault {

Environment::Environment(bool deterministic, std::uint64_t seed, TimePoint start)
    : deterministic_(deterministic), rng_(seed), next_(start) {}

std::shared_ptr<Environment> Environment::system() {
    std::random_device rd;
    const std::uint64_t seed = (static_cast<std::uint64_t>(rd()) << 32) ^ rd() ^
                               static_cast<std::uint64_t>(::getpid());
    return std::shared_ptr<Environment>(new Environment(false, seed, TimePoint{}));
}

std::shared_ptr<Environment> Environment::deterministic(std::uint64_t seed, TimePoint start) {
    return std::shared_ptr<Environment>(new Environment(true, seed, start));
}

TimePoint Environment::now() {
    std::lock_guard lock(mu_);
    if (!deterministic_) {
        return std::chrono::time_point_cast<std::chrono::microseconds>(std::chrono::system_clock::now());
    }
    const auto out = next_;
    next_ += std::chrono::microseconds(1);
    return out;
}

std::string Environment::random_suffix(std::size_t length) {
    static constexpr std::string_view kAlphabet = "abcdefghijklmnopqrstuvwxyz0123456789";
    std::lock_guard lock(mu_);
    std::uniform_int_distribution<std::size_t> pick(0, kAlphabet.size() - 1);
    std::string out(length, 'a');
    for (auto& c : out) c = kAlphabet[pick(rng_)];
    return out;
}

namespace {

struct Broken {
    std::tm tm{};
    long micros = 0;
};

Broken breakdown(TimePoint tp) {
    const auto us = std::chrono::duration_cast<std::chrono::microseconds>(tp.time_since_epoch()).count();
    auto secs = static_cast<std::time_t>(us / 1'000'000);
    long micros = static_cast<long>(us % 1'000'000);
    if (micros < 0) {
        micros += 1'000'000;
        --secs;
    }
    Broken b;
    b.micros = micros;
    ::gmtime_r(&secs, &b.tm);
    return b;
}

bool all_digits(std::string_view s) {
    return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}

bool is_suffix_char(char c) { return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9'); }

}  // namespace

std::string compact_timestamp(TimePoint tp) {
    const auto b = breakdown(tp);
    char buf[96];
    std::snprintf(buf, sizeof buf, "%04d%02d%02dT%02d%02d%02d.%06ld", b.tm.tm_year + 1900, b.tm.tm_mon + 1,
                  b.tm.tm_mday, b.tm.tm_hour, b.tm.tm_min, b.tm.tm_sec, b.micros);
    return buf;
}

std::string iso8601(TimePoint tp) {
    const auto b = breakdown(tp);
    char buf[96];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%06ldZ", b.tm.tm_year + 1900, b.tm.tm_mon + 1,
                  b.tm.tm_mday, b.tm.tm_hour, b.tm.tm_min, b.tm.tm_sec, b.micros);
    return buf;
}

bool is_instance_id(std::string_view t) {
    // yyyymmddThhmmss.uuuuuu_xxxxxx
    if (t.size() != 29) return false;
    return all_digits(t.substr(0, 8)) && t[8] == 'T' && all_digits(t.substr(9, 6)) && t[15] == '.' &&
           all_digits(t.substr(16, 6)) && t[22] == '_' &&
           std::all_of(t.begin() + 23, t.end(), is_suffix_char);
}

bool is_operation_id(std::string_view t) {
    return t.size() == 32 && t.substr(0, 3) == "op-" && is_instance_id(t.substr(3));
}

std::string make_instance_id(Environment& env) {
    return compact_timestamp(env.now()) + "_" + env.random_suffix(6);
}

std::string make_operation_id(Environment& env) { return "op-" + make_instance_id(env); }

bool is_valid_table_name(std::string_view name) {
    if (name.empty() || name.size() > 128) return false;
    if (!(name[0] >= 'a' && name[0] <= 'z')) return false;
    return std::all_of(name.begin(), name.end(), [](char c) {
        return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
    });
}

bool is_valid_document_name(std::string_view name) {
    if (name.empty() || name.size() > 128) return false;
    const auto alpha = [](char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); };
    if (!alpha(name[0])) return false;
    return std::all_of(name.begin(), name.end(), [&](char c) {
        return alpha(c) || (c >= '0' && c <= '9') || c == '_' || c == '-';
    });
}

// ---- files ----------------------------------------------------------------

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::NotFound, "cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void fsync_path(const fs::path& path) {
    const int fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
    if (fd < 0) return;
    ::fsync(fd);
    ::close(fd);
}

void fsync_parent(const fs::path& path) { fsync_path(path.parent_path()); }

namespace {

void write_all(int fd, std::string_view bytes, const fs::path& path) {
    const char* p = bytes.data();
    std::size_t left = bytes.size();
    while (left > 0) {
        const auto n = ::write(fd, p, left);
        if (n < 0) {
            if (errno == EINTR) continue;
            fail(ErrorKind::Io, "write failed for " + path.string() + ": " + std::strerror(errno));
        }
        p += n;
        left -= static_cast<std::size_t>(n);
    }
}

}  // namespace

void write_file_atomic(const fs::path& path, std::string_view bytes, bool sync) {
    auto tmp = path;
    tmp += ".tmp-" + std::to_string(::getpid());
    const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd < 0) fail(ErrorKind::Io, "cannot create " + tmp.string() + ": " + std::strerror(errno));
    write_all(fd, bytes, tmp);
    if (sync) ::fsync(fd);
    ::close(fd);
    if (::rename(tmp.c_str(), path.c_str()) != 0) {
        fs::remove(tmp);
        fail(ErrorKind::Io, "rename failed for " + path.string() + ": " + std::strerror(errno));
    }
    if (sync) fsync_parent(path);
}

void append_line_locked(const fs::path& path, std::string_view line, bool sync) {
    const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd < 0) fail(ErrorKind::Io, "cannot open " + path.string() + ": " + std::strerror(errno));
    ::flock(fd, LOCK_EX);
    std::string buf(line);
    buf.push_back('\n');
    write_all(fd, buf, path);
    if (sync) ::fsync(fd);
    ::flock(fd, LOCK_UN);
    ::close(fd);
}

void link_or_copy(const fs::path& from, const fs::path& to) {
    if (::link(from.c_str(), to.c_str()) == 0) return;
    if (errno == EEXIST) {
        fs::remove(to);
        if (::link(from.c_str(), to.c_str()) == 0) return;
    }
    fs::copy_file(from, to, fs::copy_options::overwrite_existing);
}

std::vector<fs::path> create_directories_tracked(const fs::path& dir) {
    std::vector<fs::path> missing;
    for (auto p = dir; !p.empty() && !fs::exists(p); p = p.parent_path()) {
        missing.push_back(p);
        if (p == p.parent_path()) break;
    }
    std::reverse(missing.begin(), missing.end());
    for (const auto& p : missing) fs::create_directory(p);
    return missing;
}

std::string relative_within(const fs::path& root, const fs::path& path) {
    const auto rel = path.lexically_normal().lexically_relative(root.lexically_normal());
    const auto text = rel.generic_string();
    if (rel.empty() || text == "." || text.rfind("..", 0) == 0 || rel.is_absolute()) {
        fail(ErrorKind::Scope, path.string() + " is outside " + root.string());
    }
    return text;
}

// ---- digests --------------------------------------------------------------

namespace {

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr); }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(std::string_view bytes) { EVP_DigestUpdate(ctx_, bytes.data(), bytes.size()); }

    std::string hex() {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_, md, &len);
        static constexpr char kHex[] = "0123456789abcdef";
        std::string out;
        out.reserve(len * 2);
        for (unsigned int i = 0; i < len; ++i) {
            out.push_back(kHex[md[i] >> 4]);
            out.push_back(kHex[md[i] & 0xF]);
        }
        return out;
    }

private:
    EVP_MD_CTX* ctx_;
};

}  // namespace

std::string sha256_hex(std::string_view bytes) {
    Sha256 h;
    h.update(bytes);
    return h.hex();
}

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::NotFound, "cannot read " + path.string());
    Sha256 h;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        h.update(std::string_view(buf, static_cast<std::size_t>(in.gcount())));
    }
    return h.hex();
}

std::string tree_digest(const fs::path& root, const std::vector<std::string>& subtrees) {
    std::vector<std::string> lines;
    for (const auto& sub : subtrees) {
        const auto base = root / sub;
        if (!fs::exists(base)) continue;
        lines.push_back("d " + sub);
        for (auto it = fs::recursive_directory_iterator(base); it != fs::recursive_directory_iterator(); ++it) {
            const auto rel = it->path().lexically_relative(root).generic_string();
            if (it->is_directory()) {
                lines.push_back("d " + rel);
            } else {
                lines.push_back("f " + rel + " " + sha256_file(it->path()));
            }
        }
    }
    std::sort(lines.begin(), lines.end());
    Sha256 h;
    for (const auto& l : lines) {
        h.update(l);
        h.update("\n");
    }
    return h.hex();
}

FileLock::FileLock(const fs::path& path) {
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) fail(ErrorKind::Io, "cannot open lock file " + path.string());
    while (::flock(fd_, LOCK_EX) != 0 && errno == EINTR) {
    }
}

FileLock::~FileLock() {
    if (fd_ >= 0) {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
}

}  // namespace tablevault
