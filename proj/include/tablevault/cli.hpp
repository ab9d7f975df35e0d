#pragma once

#include <string>
#include <utility>
#include <vector>

namespace tablevault::cli {

struct Result {
    int exit_code = 0;
    std::string out;
    std::string err;
};

/// Runs one invocation in-process. `args` excludes the program name.
Result dispatch(const std::vector<std::string>& args);

/// Full paths of every leaf subcommand, e.g. "table create".
std::vector<std::string> subcommand_paths();

/// (library operation, subcommand) pairs served by the CLI.
std::vector<std::pair<std::string, std::string>> operation_commands();

}  // namespace tablevault::cli
