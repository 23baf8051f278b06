#include "embolite/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "embolite/errors.hpp"
#include "embolite/phantom.hpp"

namespace embolite {

Volume resample_z(const Volume& v, double target_spacing_mm) {
  if (!(target_spacing_mm > 0)) throw ConfigError("target slice spacing must be positive");
  if (!(v.slice_spacing_mm > 0)) throw DataError("volume slice spacing must be positive");
  const int d = v.depth(), h = v.height(), w = v.width();
  const int nd = std::max(1, static_cast<int>(std::lround(d * v.slice_spacing_mm / target_spacing_mm)));
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Volume out;
  out.study_id = v.study_id;
  out.slice_spacing_mm = target_spacing_mm;
  out.voxels = Tensor({nd, h, w});
  for (int j = 0; j < nd; ++j) {
    const double pos = std::min(j * target_spacing_mm / v.slice_spacing_mm, static_cast<double>(d - 1));
    const int lo = static_cast<int>(std::floor(pos));
    const int hi = std::min(lo + 1, d - 1);
    const double f = pos - lo;
    const double* a = v.voxels.ptr() + lo * plane;
    const double* b = v.voxels.ptr() + hi * plane;
    double* o = out.voxels.ptr() + j * plane;
    for (std::size_t i = 0; i < plane; ++i) o[i] = a[i] + f * (b[i] - a[i]);
  }
  return out;
}

SparseAnnotation resample_annotation(const SparseAnnotation& a, double old_spacing_mm, double new_spacing_mm,
                                     int new_depth) {
  SparseAnnotation out;
  out.spacing_mm = a.spacing_mm;
  for (const auto& [z, mask] : a.slices) {
    const int nz = std::clamp(static_cast<int>(std::lround(z * old_spacing_mm / new_spacing_mm)), 0, new_depth - 1);
    out.slices.insert_or_assign(nz, mask);
  }
  return out;
}

Volume normalize_intensity(const Volume& v, double window_low, double window_high) {
  if (!(window_low < window_high)) throw ConfigError("normalization window requires low < high");
  Volume out = v;
  const double range = window_high - window_low;
  for (double& x : out.voxels.data()) x = (std::clamp(x, window_low, window_high) - window_low) / range;
  return out;
}

Slab make_slab(const Volume& v, int center_index) {
  const int d = v.depth(), h = v.height(), w = v.width();
  if (center_index < 0 || center_index >= d) throw DimensionError("slab centre outside volume");
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Slab s;
  s.center_index = center_index;
  s.channels = Tensor({kSlabChannels, h, w});
  for (int c = 0; c < kSlabChannels; ++c) {
    const int z = std::clamp(center_index - kSlabContext + c, 0, d - 1);
    std::copy_n(v.voxels.ptr() + z * plane, plane, s.channels.ptr() + c * plane);
  }
  return s;
}

std::vector<Slab> extract_slabs(const Volume& v, const SparseAnnotation& ann, double negatives_per_positive, Rng& rng,
                                int min_negatives) {
  std::vector<Slab> out;
  const int h = v.height(), w = v.width();
  for (const auto& [z, mask] : ann.slices) {
    Slab s = make_slab(v, z);
    s.target_mask = mask.reshaped({1, h, w});
    out.push_back(std::move(s));
  }
  const int positives = static_cast<int>(out.size());
  const int wanted = std::max(static_cast<int>(std::lround(negatives_per_positive * positives)), min_negatives);
  if (wanted <= 0) return out;

  const int stride = std::max(1, static_cast<int>(std::lround(ann.spacing_mm / v.slice_spacing_mm)));
  std::vector<int> candidates;
  for (int z = 0; z < v.depth(); ++z) {
    bool far = true;
    for (const auto& [az, mask] : ann.slices) far = far && std::abs(z - az) >= stride;
    if (far) candidates.push_back(z);
  }
  // Partial Fisher-Yates keeps the draw deterministic for a given rng state.
  const int take = std::min(wanted, static_cast<int>(candidates.size()));
  for (int i = 0; i < take; ++i) {
    const int j = rng.uniform_int(i, static_cast<int>(candidates.size()) - 1);
    std::swap(candidates[static_cast<std::size_t>(i)], candidates[static_cast<std::size_t>(j)]);
  }
  std::vector<int> chosen(candidates.begin(), candidates.begin() + take);
  std::sort(chosen.begin(), chosen.end());
  for (int z : chosen) {
    Slab s = make_slab(v, z);
    s.target_mask = Tensor({1, h, w}, 0.0);
    out.push_back(std::move(s));
  }
  return out;
}

LungSpan lung_span(const Volume& normalized, double air_level, double min_air_fraction) {
  const int d = normalized.depth();
  const std::size_t plane = static_cast<std::size_t>(normalized.height()) * normalized.width();
  int first = -1, last = -1;
  for (int z = 0; z < d; ++z) {
    const double* p = normalized.voxels.ptr() + z * plane;
    std::size_t air = 0;
    for (std::size_t i = 0; i < plane; ++i) air += p[i] < air_level ? 1 : 0;
    if (static_cast<double>(air) / static_cast<double>(plane) > min_air_fraction) {
      if (first < 0) first = z;
      last = z;
    }
  }
  if (first < 0) return LungSpan{0, d, true};
  return LungSpan{first, last + 1, false};
}

Tensor center_crop(const Tensor& plane, int crop) {
  const int h = plane.dim(0), w = plane.dim(1);
  if (crop > h || crop > w || crop < 1) {
    throw DimensionError("crop " + std::to_string(crop) + " does not fit plane " + shape_str(plane.shape()));
  }
  const int oy = (h - crop) / 2, ox = (w - crop) / 2;
  Tensor out({crop, crop});
  for (int y = 0; y < crop; ++y) {
    std::copy_n(plane.ptr() + static_cast<std::size_t>(y + oy) * w + ox, crop, out.ptr() + static_cast<std::size_t>(y) * crop);
  }
  return out;
}

namespace {

// Row-stochastic matrix mapping `in` samples to `out` by interval overlap.
std::vector<double> area_weights(int in, int out) {
  std::vector<double> wts(static_cast<std::size_t>(out) * in, 0.0);
  const double scale = static_cast<double>(in) / out;
  for (int j = 0; j < out; ++j) {
    const double a = j * scale, b = (j + 1) * scale;
    for (int i = static_cast<int>(std::floor(a)); i < std::min(in, static_cast<int>(std::ceil(b))); ++i) {
      const double overlap = std::min(b, i + 1.0) - std::max(a, static_cast<double>(i));
      if (overlap > 0) wts[static_cast<std::size_t>(j) * in + i] = overlap / scale;
    }
  }
  return wts;
}

}  // namespace

Tensor area_resize(const Tensor& plane, int out_h, int out_w) {
  const int h = plane.dim(0), w = plane.dim(1);
  if (out_h > h || out_w > w) throw DimensionError("area_resize only downsamples");
  const auto wy = area_weights(h, out_h);
  const auto wx = area_weights(w, out_w);
  Tensor tmp({h, out_w});
  for (int y = 0; y < h; ++y)
    for (int j = 0; j < out_w; ++j) {
      double acc = 0.0;
      for (int x = 0; x < w; ++x) acc += wx[static_cast<std::size_t>(j) * w + x] * plane[static_cast<std::size_t>(y) * w + x];
      tmp[static_cast<std::size_t>(y) * out_w + j] = acc;
    }
  Tensor out({out_h, out_w});
  for (int i = 0; i < out_h; ++i)
    for (int j = 0; j < out_w; ++j) {
      double acc = 0.0;
      for (int y = 0; y < h; ++y) acc += wy[static_cast<std::size_t>(i) * h + y] * tmp[static_cast<std::size_t>(y) * out_w + j];
      out[static_cast<std::size_t>(i) * out_w + j] = acc;
    }
  return out;
}

Tensor masked_stack(const Volume& normalized, const Tensor& pred_mask, const LungSpan& span, int crop, int resize,
                    std::optional<double> mask_threshold) {
  if (pred_mask.shape() != normalized.voxels.shape()) {
    throw DimensionError("prediction mask " + shape_str(pred_mask.shape()) + " does not match volume " +
                         shape_str(normalized.voxels.shape()));
  }
  if (span.z_start < 0 || span.z_end > normalized.depth() || span.length() < 1) {
    throw DimensionError("invalid lung span");
  }
  const int h = normalized.height(), w = normalized.width();
  if (crop > h || crop > w) {
    throw DimensionError("crop " + std::to_string(crop) + " larger than slice " + std::to_string(h) + "x" +
                         std::to_string(w));
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t out_plane = static_cast<std::size_t>(resize) * resize;
  Tensor stack({span.length(), 1, resize, resize});
  Tensor product({h, w});
  for (int z = span.z_start; z < span.z_end; ++z) {
    const double* x = normalized.voxels.ptr() + z * plane;
    const double* m = pred_mask.ptr() + z * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      const double mv = mask_threshold ? (m[i] >= *mask_threshold ? 1.0 : 0.0) : m[i];
      product[i] = x[i] * mv;
    }
    Tensor r = area_resize(center_crop(product, crop), resize, resize);
    std::copy_n(r.ptr(), out_plane, stack.ptr() + static_cast<std::size_t>(z - span.z_start) * out_plane);
  }
  return stack;
}

int middle_start(int span_length, int T) { return span_length >= T ? (span_length - T) / 2 : 0; }

Tensor window_instances(const Tensor& stack, int start, int T) {
  const int s = stack.dim(0);
  Shape shape = stack.shape();
  shape[0] = T;
  if (s >= T) {
    if (start < 0 || start + T > s) throw DimensionError("window outside stack");
    return slice_leading(stack, start, T);
  }
  Tensor out(shape, 0.0);
  const std::size_t inner = stack.numel() / static_cast<std::size_t>(s);
  const int pad_before = (T - s) / 2;
  std::copy_n(stack.ptr(), stack.numel(), out.ptr() + static_cast<std::size_t>(pad_before) * inner);
  return out;
}

Bag build_masked_bag(const Volume& normalized, const Tensor& pred_mask, const LungSpan& span, int T, int crop,
                     int resize, std::optional<double> mask_threshold) {
  if (T < 1) throw ConfigError("T must be >= 1");
  // Only the selected slices are needed.
  const int start = middle_start(span.length(), T);
  LungSpan sub{span.z_start + start, span.z_start + start + std::min(T, span.length()), span.fallback};
  Bag bag;
  bag.study_id = normalized.study_id;
  bag.instances = window_instances(masked_stack(normalized, pred_mask, sub, crop, resize, mask_threshold), 0, T);
  return bag;
}

WindowPlan plan_windows(int span_length, int T, int overlap) {
  if (T < 1 || overlap < 0 || overlap >= T) throw ConfigError("plan_windows requires 0 <= overlap < T");
  if (span_length < 1) throw ConfigError("plan_windows requires a non-empty span");
  WindowPlan plan;
  if (span_length <= T) {
    plan.windows.push_back({0, T, span_length < T});
    return plan;
  }
  const int stride = T - overlap;
  int start = 0;
  for (; start + T < span_length; start += stride) plan.windows.push_back({start, start + T, false});
  plan.windows.push_back({span_length - T, span_length, false});
  return plan;
}

PreparedStudy prepare_study(const Volume& raw, const SparseAnnotation& ann, const StudyLabel& label,
                            const PreprocessConfig& cfg) {
  PreparedStudy s;
  s.study_id = raw.study_id;
  s.label = label;
  Volume resampled = resample_z(raw, cfg.target_spacing_mm);
  s.annotation = resample_annotation(ann, raw.slice_spacing_mm, cfg.target_spacing_mm, resampled.depth());
  s.volume = normalize_intensity(resampled, cfg.window_low, cfg.window_high);
  s.span = lung_span(s.volume);
  return s;
}

}  // namespace embolite
