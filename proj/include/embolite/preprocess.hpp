#pragma once

#include <optional>
#include <string>
#include <vector>

#include "embolite/random.hpp"
#include "embolite/volume.hpp"

namespace embolite {

inline constexpr int kSlabContext = 4;
inline constexpr int kSlabChannels = 2 * kSlabContext + 1;

// Nine-slice stack around `center_index`, slices clamped at the volume edges.
struct Slab {
  Tensor channels;     // [9,H,W]
  int center_index = 0;
  Tensor target_mask;  // [1,H,W]; empty for inference slabs

  bool has_target() const { return !target_mask.empty(); }
};

// Ordered sequence of T masked, normalized slices with one bag label.
struct Bag {
  Tensor instances;  // [T,1,h,w]
  int label = 0;
  std::string study_id;
};

struct Window {
  int start = 0;
  int end = 0;
  bool padded = false;
};

struct WindowPlan {
  std::vector<Window> windows;
};

struct LungSpan {
  int z_start = 0;
  int z_end = 0;  // exclusive
  bool fallback = false;

  int length() const { return z_end - z_start; }
};

// Linear interpolation along z; slice j sits at j * target / old in source
// index space, clamped to the last slice. New depth = round(D * old / target).
Volume resample_z(const Volume& v, double target_spacing_mm);

// Moves annotated slice indices onto a resampled grid of depth `new_depth`.
SparseAnnotation resample_annotation(const SparseAnnotation& a, double old_spacing_mm, double new_spacing_mm,
                                     int new_depth);

// Clip to [low, high] then map affinely onto [0, 1].
Volume normalize_intensity(const Volume& v, double window_low, double window_high);

Slab make_slab(const Volume& v, int center_index);

// One slab per annotated slice (its mask as target) plus
// max(round(ratio * positives), min_negatives) slabs with empty targets
// centred on slices at least one annotation stride away from any annotated
// slice. Positives come first, then negatives, each in axial order.
std::vector<Slab> extract_slabs(const Volume& v, const SparseAnnotation& ann, double negatives_per_positive,
                                Rng& rng, int min_negatives = 0);

// Smallest/largest slice whose fraction of voxels below `air_level`
// exceeds `min_air_fraction`. Falls back to (0, D) with `fallback` set.
// Heuristic for phantoms, not a lung segmentation.
LungSpan lung_span(const Volume& normalized, double air_level = 0.2, double min_air_fraction = 0.5);

Tensor center_crop(const Tensor& plane, int crop);
// Area-averaging resize of an [H,W] plane; exact box means for integer factors.
Tensor area_resize(const Tensor& plane, int out_h, int out_w);

// X * M_hat over every slice of the span, centre-cropped and resized:
// [span_length, 1, resize, resize]. With a threshold the mask is binarized first.
Tensor masked_stack(const Volume& normalized, const Tensor& pred_mask, const LungSpan& span, int crop, int resize,
                    std::optional<double> mask_threshold = std::nullopt);

// T slices of `stack` starting at `start`; when the stack is shorter than T
// all of it is used, zero-padded symmetrically.
Tensor window_instances(const Tensor& stack, int start, int T);

// Middle T slices of the span (centred, zero-padded when the span is short).
Bag build_masked_bag(const Volume& normalized, const Tensor& pred_mask, const LungSpan& span, int T, int crop,
                     int resize, std::optional<double> mask_threshold = std::nullopt);

// Start of the centred T-slice block inside a stack of `span_length` slices.
int middle_start(int span_length, int T);

// Windows of length T with stride T - overlap; the last one is shifted left
// to end at span_length. A span shorter than T gives one padded window.
WindowPlan plan_windows(int span_length, int T, int overlap);

}  // namespace embolite

namespace embolite {

struct PreprocessConfig {
  double target_spacing_mm = 2.0;
  double window_low = -1000.0;
  double window_high = 400.0;
  int crop = 48;
  int resize = 32;
  int T = 16;
  int overlap = 4;
  std::optional<double> mask_threshold;
};

// A study after resampling and normalization, with its annotation moved
// onto the resampled grid.
struct PreparedStudy {
  std::string study_id;
  Volume volume;
  SparseAnnotation annotation;
  StudyLabel label;
  LungSpan span;
};

PreparedStudy prepare_study(const Volume& raw, const SparseAnnotation& ann, const StudyLabel& label,
                            const PreprocessConfig& cfg);

}  // namespace embolite
