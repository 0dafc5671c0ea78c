#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "io.hpp"

namespace capforge {

enum class Split { Train, Valid, Test };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestEntry {
  std::string id;
  double duration_s = 0.0;
  std::string codec_path;  // grid JSONL file, relative to the manifest directory
  std::vector<std::string> captions;
  Split split = Split::Train;
  // Synthetic-world extras; empty when the manifest comes from elsewhere.
  std::string frames_path;
  std::vector<std::string> events;

  bool operator==(const ManifestEntry&) const = default;
};

Json entry_to_json(const ManifestEntry& e);
ManifestEntry entry_from_json(const Json& j);

std::vector<ManifestEntry> parse_manifest(const std::string& text, const std::string& source = "<manifest>");
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path);
void save_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);

/// Keeps entries with min_s <= duration_s <= max_s.
std::vector<ManifestEntry> filter_duration(const std::vector<ManifestEntry>& entries, double min_s = 1.0,
                                           double max_s = 30.0);

/// Drops entries whose id is in the blocklist; order preserved.
std::vector<ManifestEntry> dedup_against(const std::vector<ManifestEntry>& entries,
                                         const std::vector<std::string>& blocklist_ids);

/// Newline-delimited ids; blank lines ignored.
std::vector<std::string> load_blocklist(const std::filesystem::path& path);
void save_blocklist(const std::vector<std::string>& ids, const std::filesystem::path& path);

/// Largest-remainder split sizes for (train, valid, test) fractions.
std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& fractions);

/// Seeded shuffle, then the first sizes[0] shuffled entries are train, the
/// next sizes[1] valid, the rest test. Output keeps the input order.
std::vector<ManifestEntry> make_splits(std::vector<ManifestEntry> entries, const std::array<double, 3>& fractions,
                                       std::uint64_t seed);

std::vector<ManifestEntry> select_split(const std::vector<ManifestEntry>& entries, Split split);

}  // namespace capforge
