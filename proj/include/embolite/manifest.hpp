#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "embolite/volume.hpp"

namespace embolite {

// One row of manifest.json. Paths are stored relative to the manifest's
// directory and resolved on load.
struct ManifestEntry {
  std::string study_id;
  std::filesystem::path volume_path;
  std::filesystem::path annotation_path;
  StudyLabel label;
  std::string split;
};

// manifest.json schema: array of
//   {study_id, volume_path, annotation_path, label: "positive"|"negative",
//    severity, noise_profile, split}
void write_manifest(const std::filesystem::path& dir, const std::vector<ManifestEntry>& entries);

// Reads dir/manifest.json, resolves paths against `dir`, verifies every
// referenced file exists and sorts by study_id. Duplicate ids are an error.
std::vector<ManifestEntry> dataset_manifest(const std::filesystem::path& dir);

std::vector<ManifestEntry> filter_split(const std::vector<ManifestEntry>& entries, const std::string& split);

}  // namespace embolite
