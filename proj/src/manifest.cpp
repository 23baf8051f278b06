#include "embolite/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "embolite/errors.hpp"
#include "json.hpp"

namespace embolite {

namespace fs = std::filesystem;

void write_manifest(const fs::path& dir, const std::vector<ManifestEntry>& entries) {
  nlohmann::json arr = nlohmann::json::array();
  for (const ManifestEntry& e : entries) {
    arr.push_back({{"study_id", e.study_id},
                   {"volume_path", e.volume_path.generic_string()},
                   {"annotation_path", e.annotation_path.generic_string()},
                   {"label", e.label.positive ? "positive" : "negative"},
                   {"severity", to_string(e.label.severity)},
                   {"noise_profile", e.label.noise_profile},
                   {"split", e.split}});
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw DataError("cannot write manifest in " + dir.string());
  out << arr.dump(2) << "\n";
}

std::vector<ManifestEntry> dataset_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw DataError("no manifest.json in " + dir.string());
  nlohmann::json arr;
  try {
    arr = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (!arr.is_array()) throw DataError(path.string() + ": manifest must be a JSON array");
  std::vector<ManifestEntry> out;
  std::set<std::string> seen;
  for (const auto& row : arr) {
    ManifestEntry e;
    try {
      e.study_id = row.at("study_id").get<std::string>();
      e.volume_path = dir / row.at("volume_path").get<std::string>();
      e.annotation_path = dir / row.at("annotation_path").get<std::string>();
      const std::string label = row.at("label").get<std::string>();
      if (label != "positive" && label != "negative") throw DataError("study " + e.study_id + ": bad label " + label);
      e.label.positive = label == "positive";
      e.label.severity = severity_from_string(row.at("severity").get<std::string>());
      e.label.noise_profile = row.at("noise_profile").get<std::string>();
      e.split = row.at("split").get<std::string>();
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(path.string() + ": malformed entry: " + ex.what());
    }
    if (!seen.insert(e.study_id).second) throw DataError("duplicate study_id in manifest: " + e.study_id);
    if (!fs::exists(e.volume_path)) {
      throw DataError("study " + e.study_id + ": missing volume file " + e.volume_path.string());
    }
    if (!fs::exists(e.annotation_path)) {
      throw DataError("study " + e.study_id + ": missing annotation file " + e.annotation_path.string());
    }
    out.push_back(std::move(e));
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.study_id < b.study_id; });
  return out;
}

std::vector<ManifestEntry> filter_split(const std::vector<ManifestEntry>& entries, const std::string& split) {
  std::vector<ManifestEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
               [&](const ManifestEntry& e) { return e.split == split; });
  return out;
}

}  // namespace embolite
