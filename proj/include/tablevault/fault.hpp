#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

// Crash-site instrumentation. Every durable step calls fault::point(); a test
// harness arms a countdown and the process terminates abruptly (no unwinding,
// no destructors) when the armed hit is reached.
namespace tablevault::fault {

inline constexpr int kCrashExitCode = 86;

void point(std::string_view site);

void arm_crash_at(std::uint64_t hit);
void disarm();

[[nodiscard]] std::uint64_t hits();
void reset_hits();

// Site names of every hit since the last reset, in order (off by default).
void record_sites(bool on);
[[nodiscard]] std::vector<std::string> recorded_sites();

}  // namespace tablevault::fault
