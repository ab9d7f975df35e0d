#include "tablevault/yaml_json.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>

#include "tablevault/error.hpp"

namespace tablevault {
namespace {

Json plain_scalar(const std::string& s) {
    if (s.empty() || s == "~" || s == "null" || s == "Null" || s == "NULL") return nullptr;
    if (s == "true" || s == "True" || s == "TRUE") return true;
    if (s == "false" || s == "False" || s == "FALSE") return false;
    {
        std::int64_t v = 0;
        const auto* end = s.data() + s.size();
        auto [p, ec] = std::from_chars(s.data(), end, v);
        if (ec == std::errc() && p == end) return v;
    }
    {
        double d = 0;
        const auto* end = s.data() + s.size();
        auto [p, ec] = std::from_chars(s.data(), end, d);
        if (ec == std::errc() && p == end) return d;
    }
    return s;
}

Json convert(const YAML::Node& node) {
    switch (node.Type()) {
        case YAML::NodeType::Null:
        case YAML::NodeType::Undefined: return nullptr;
        case YAML::NodeType::Scalar:
            if (node.Tag() == "!") return node.Scalar();
            return plain_scalar(node.Scalar());
        case YAML::NodeType::Sequence: {
            Json arr = Json::array();
            for (const auto& item : node) arr.push_back(convert(item));
            return arr;
        }
        case YAML::NodeType::Map: {
            Json obj = Json::object();
            for (const auto& kv : node) obj[kv.first.Scalar()] = convert(kv.second);
            return obj;
        }
    }
    return nullptr;
}

void emit(YAML::Emitter& out, const Json& v) {
    switch (v.type()) {
        case Json::value_t::null: out << YAML::Null; break;
        case Json::value_t::boolean: out << v.get<bool>(); break;
        case Json::value_t::number_integer: out << v.get<std::int64_t>(); break;
        case Json::value_t::number_unsigned: out << v.get<std::uint64_t>(); break;
        case Json::value_t::number_float: out << v.dump(); break;
        case Json::value_t::string: out << YAML::DoubleQuoted << v.get<std::string>(); break;
        case Json::value_t::array:
            if (v.empty()) {
                out << YAML::Flow << YAML::BeginSeq << YAML::EndSeq;
                break;
            }
            out << YAML::BeginSeq;
            for (const auto& item : v) emit(out, item);
            out << YAML::EndSeq;
            break;
        case Json::value_t::object:
            if (v.empty()) {
                out << YAML::Flow << YAML::BeginMap << YAML::EndMap;
                break;
            }
            out << YAML::BeginMap;
            for (const auto& [k, item] : v.items()) {
                out << YAML::Key << k << YAML::Value;
                emit(out, item);
            }
            out << YAML::EndMap;
            break;
        default: out << YAML::Null; break;
    }
}

}  // namespace

Json parse_yaml(std::string_view text) {
    try {
        return convert(YAML::Load(std::string(text)));
    } catch (const YAML::Exception& e) {
        fail(ErrorKind::Validation, std::string("malformed YAML: ") + e.what());
    }
}

Json load_yaml_file(const fs::path& path) { return parse_yaml(read_file(path)); }

std::string to_yaml(const Json& value) {
    YAML::Emitter out;
    emit(out, value);
    std::string text = out.c_str();
    text.push_back('\n');
    return text;
}

}  // namespace tablevault
