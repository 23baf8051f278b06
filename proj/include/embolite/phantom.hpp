#pragma once

#include <cstdint>
#include <string>

#include "embolite/volume.hpp"

namespace embolite {

// Procedural CTPA-like study: a lung-density field crossed by bright,
// gently meandering vessels. Emboli are hypodense ellipsoids clipped to a
// vessel lumen. The seed fully determines the output.
struct PhantomSpec {
  int depth = 64;
  int height = 64;
  int width = 64;
  double slice_spacing_mm = 2.0;
  int vessel_count = 4;
  int embolus_count = 0;
  double embolus_radius_min = 2.0;  // in-plane, voxels
  double embolus_radius_max = 3.0;
  double contrast_delta = 160.0;    // vessel minus embolus intensity
  double noise_sigma = 20.0;
  std::uint64_t seed = 0;
  // Emboli centres lie in the central `embolus_z_band` fraction of the lung slices.
  double embolus_z_band = 0.3;
  // Solid soft-tissue slices prepended and appended outside the lungs.
  int solid_margin_slices = 0;
  Severity severity = Severity::none;
  std::string noise_profile = "standard";
  std::string study_id = "phantom";
};

struct Phantom {
  Volume volume;
  SparseAnnotation annotation;
  StudyLabel label;
  Tensor embolus_mask;  // dense [D,H,W] ground truth, for evaluation only
};

namespace phantom_hu {
inline constexpr double lung = -900.0;
inline constexpr double vessel = 200.0;
inline constexpr double tissue = 40.0;
}  // namespace phantom_hu

Phantom generate_phantom(const PhantomSpec& spec);

// In-plane embolus radius range (voxels at 64-pixel width) per severity tier.
void severity_radius_range(Severity s, double& lo, double& hi);

// Annotation slice stride for a 10mm protocol.
int annotation_stride(double slice_spacing_mm);

}  // namespace embolite
