#include "tablevault/fault.hpp"

#include <atomic>
#include <cstdlib>
#include <mutex>

namespace tablevault::fault {
namespace {
std::atomic<std::uint64_t> g_hits{0};
std::atomic<std::uint64_t> g_armed{0};  // 0 = disarmed
std::atomic<bool> g_recording{false};
std::mutex g_sites_mu;
std::vector<std::string> g_sites;
}  // namespace

void point(std::string_view site) {
    if (g_recording.load(std::memory_order_relaxed)) {
        std::lock_guard lock(g_sites_mu);
        g_sites.emplace_back(site);
    }
    const auto hit = g_hits.fetch_add(1, std::memory_order_relaxed) + 1;
    const auto armed = g_armed.load(std::memory_order_relaxed);
    if (armed != 0 && hit == armed) {
        std::_Exit(kCrashExitCode);
    }
}

void arm_crash_at(std::uint64_t hit) {
    g_hits.store(0);
    g_armed.store(hit);
}

void disarm() { g_armed.store(0); }

std::uint64_t hits() { return g_hits.load(); }

void reset_hits() {
    g_hits.store(0);
    std::lock_guard lock(g_sites_mu);
    g_sites.clear();
}

void record_sites(bool on) { g_recording.store(on); }

std::vector<std::string> recorded_sites() {
    std::lock_guard lock(g_sites_mu);
    return g_sites;
}

}  // namespace tablevault::fault
