#include "dataio.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "common.hpp"

namespace capforge {

const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "valid") return Split::Valid;
  if (s == "test") return Split::Test;
  fail(ErrorKind::Data, "unknown split '" + s + "'");
}

Json entry_to_json(const ManifestEntry& e) {
  Json j{{"id", e.id},
         {"duration_s", e.duration_s},
         {"codec_path", e.codec_path},
         {"captions", e.captions},
         {"split", to_string(e.split)}};
  if (!e.frames_path.empty()) j["frames_path"] = e.frames_path;
  if (!e.events.empty()) j["events"] = e.events;
  return j;
}

ManifestEntry entry_from_json(const Json& j) {
  ManifestEntry e;
  e.id = j.at("id").get<std::string>();
  e.duration_s = j.at("duration_s").get<double>();
  e.codec_path = j.value("codec_path", std::string{});
  e.captions = j.at("captions").get<std::vector<std::string>>();
  e.split = split_from_string(j.at("split").get<std::string>());
  e.frames_path = j.value("frames_path", std::string{});
  if (j.contains("events")) e.events = j.at("events").get<std::vector<std::string>>();
  if (e.id.empty()) fail(ErrorKind::Data, "manifest entry with empty id");
  if (!(e.duration_s > 0)) fail(ErrorKind::Data, "entry '" + e.id + "' has non-positive duration");
  if (e.captions.empty()) fail(ErrorKind::Data, "entry '" + e.id + "' has no captions");
  return e;
}

std::vector<ManifestEntry> parse_manifest(const std::string& text, const std::string& source) {
  std::vector<ManifestEntry> entries;
  std::unordered_set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    ManifestEntry e;
    try {
      e = entry_from_json(Json::parse(line));
    } catch (const Json::exception& ex) {
      fail(ErrorKind::Parse, where + ": " + ex.what());
    } catch (const Error& ex) {
      fail(ex.kind(), where + ": " + ex.what());
    }
    if (!seen.insert(e.id).second) fail(ErrorKind::Data, where + ": duplicate id '" + e.id + "'");
    entries.push_back(std::move(e));
  }
  return entries;
}

std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path) {
  return parse_manifest(read_text(path), path.string());
}

void save_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
  std::vector<Json> rows;
  rows.reserve(entries.size());
  for (const auto& e : entries) rows.push_back(entry_to_json(e));
  write_jsonl(path, rows);
}

std::vector<ManifestEntry> filter_duration(const std::vector<ManifestEntry>& entries, double min_s, double max_s) {
  if (min_s > max_s) fail(ErrorKind::Config, "duration filter has min_s > max_s");
  std::vector<ManifestEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
               [&](const ManifestEntry& e) { return e.duration_s >= min_s && e.duration_s <= max_s; });
  return out;
}

std::vector<ManifestEntry> dedup_against(const std::vector<ManifestEntry>& entries,
                                         const std::vector<std::string>& blocklist_ids) {
  const std::unordered_set<std::string> block(blocklist_ids.begin(), blocklist_ids.end());
  std::vector<ManifestEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
               [&](const ManifestEntry& e) { return !block.contains(e.id); });
  return out;
}

std::vector<std::string> load_blocklist(const std::filesystem::path& path) {
  std::vector<std::string> ids;
  const std::string text = read_text(path);
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos) continue;
    ids.push_back(line.substr(first));
  }
  return ids;
}

void save_blocklist(const std::vector<std::string>& ids, const std::filesystem::path& path) {
  std::string text;
  for (const auto& id : ids) text += id + "\n";
  write_text(path, text);
}

std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& fractions) {
  double sum = 0.0;
  for (double f : fractions) {
    if (f < 0.0 || !std::isfinite(f)) fail(ErrorKind::Config, "split fractions must be finite and >= 0");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) fail(ErrorKind::Config, "split fractions must sum to 1");

  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = fractions[i] * static_cast<double>(n);
    sizes[i] = static_cast<std::size_t>(std::floor(exact));
    rem[i] = exact - static_cast<double>(sizes[i]);
    assigned += sizes[i];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < n; k = (k + 1) % 3) {
    ++sizes[order[k]];
    ++assigned;
  }
  return sizes;
}

std::vector<ManifestEntry> make_splits(std::vector<ManifestEntry> entries, const std::array<double, 3>& fractions,
                                       std::uint64_t seed) {
  const auto sizes = split_sizes(entries.size(), fractions);
  std::vector<std::size_t> perm(entries.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(seed, 0x73706c6974ULL));
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
  for (std::size_t k = 0; k < perm.size(); ++k) {
    Split s = Split::Test;
    if (k < sizes[0]) s = Split::Train;
    else if (k < sizes[0] + sizes[1]) s = Split::Valid;
    entries[perm[k]].split = s;
  }
  return entries;
}

std::vector<ManifestEntry> select_split(const std::vector<ManifestEntry>& entries, Split split) {
  std::vector<ManifestEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
               [&](const ManifestEntry& e) { return e.split == split; });
  return out;
}

}  // namespace capforge
