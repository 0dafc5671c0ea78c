#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace capforge {

using Json = nlohmann::json;

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

// Parses one JSON object per non-blank line. Errors carry the 1-based line.
std::vector<Json> parse_jsonl(const std::string& text, const std::string& source);
std::vector<Json> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<Json>& rows);

// Compact dump with sorted keys; stable across runs.
std::string canonical_dump(const Json& j);

}  // namespace capforge
