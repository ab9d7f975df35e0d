#pragma once

#include <string>
#include <string_view>

#include "tablevault/util.hpp"

namespace tablevault {

// YAML documents are handled as JSON values internally. Quoted YAML scalars
// stay strings; plain scalars are typed (null, bool, int, float, string).
Json parse_yaml(std::string_view text);
Json load_yaml_file(const fs::path& path);
// Block-style YAML with double-quoted strings, so a reload is type-exact.
std::string to_yaml(const Json& value);

}  // namespace tablevault
