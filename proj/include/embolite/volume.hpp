#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "embolite/tensor.hpp"

namespace embolite {

// A 3D scan. Intensities are stored unnormalized (Hounsfield-like units).
struct Volume {
  Tensor voxels;  // [D,H,W]
  double slice_spacing_mm = 1.0;
  std::string study_id;

  int depth() const { return voxels.dim(0); }
  int height() const { return voxels.dim(1); }
  int width() const { return voxels.dim(2); }
};

// Binary contour masks drawn only on sparse slices (~10mm apart).
struct SparseAnnotation {
  std::map<int, Tensor> slices;  // slice index -> [H,W] mask in {0,1}
  double spacing_mm = 10.0;

  bool empty() const { return slices.empty(); }
};

enum class Severity { none, subsegmental, segmental, lobar, saddle };

std::string to_string(Severity s);
Severity severity_from_string(const std::string& s);
// lobar and saddle
bool is_high_severity(Severity s);

struct StudyLabel {
  bool positive = false;
  Severity severity = Severity::none;
  std::string noise_profile = "standard";
};

Tensor volume_slice(const Volume& v, int z);  // [H,W]

// .embv: "EMBV" | u64 header length | JSON {dims, spacing_mm, dtype:"f32", study_id} | f32 voxels
void save_volume(const Volume& v, const std::filesystem::path& path);
Volume load_volume(const std::filesystem::path& path);

// .emba: "EMBA" | u64 header length | JSON {depth, height, width, spacing_mm, slices} | u8 masks
void save_annotation(const SparseAnnotation& a, int depth, const std::filesystem::path& path);
SparseAnnotation load_annotation(const std::filesystem::path& path);

}  // namespace embolite
