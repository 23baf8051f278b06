#include "embolite/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "embolite/errors.hpp"
#include "embolite/random.hpp"

namespace embolite {

namespace {

struct VesselPath {
  double cx, cy, radius, amp_x, amp_y, freq_x, freq_y, phase_x, phase_y;

  double x(double z) const { return cx + amp_x * std::sin(freq_x * z + phase_x); }
  double y(double z) const { return cy + amp_y * std::cos(freq_y * z + phase_y); }
};

struct Embolus {
  int vessel;
  double cz, radius, radius_z;
};

}  // namespace

void severity_radius_range(Severity s, double& lo, double& hi) {
  switch (s) {
    case Severity::subsegmental: lo = 1.0; hi = 1.5; break;
    case Severity::segmental: lo = 1.5; hi = 2.2; break;
    case Severity::lobar: lo = 2.2; hi = 3.0; break;
    case Severity::saddle: lo = 3.0; hi = 4.0; break;
    case Severity::none: lo = 2.0; hi = 3.0; break;
  }
}

int annotation_stride(double slice_spacing_mm) {
  return std::max(1, static_cast<int>(std::lround(10.0 / slice_spacing_mm)));
}

Phantom generate_phantom(const PhantomSpec& spec) {
  if (spec.depth < 16 || spec.height < 32 || spec.width < 32) {
    throw ConfigError("phantom dims must be at least (16,32,32)");
  }
  if (spec.vessel_count < 0 || spec.embolus_count < 0) throw ConfigError("phantom counts must be >= 0");
  if (spec.embolus_count > 0 && spec.vessel_count == 0) {
    throw ConfigError("invalid phantom spec: emboli requested without vessels");
  }
  if (!(spec.slice_spacing_mm > 0)) throw ConfigError("slice spacing must be positive");
  if (spec.embolus_radius_min < 1.0 || spec.embolus_radius_max < spec.embolus_radius_min) {
    throw ConfigError("embolus radius range must satisfy 1 <= min <= max");
  }
  const int d = spec.depth, h = spec.height, w = spec.width;
  const int margin = spec.solid_margin_slices;
  if (margin < 0 || 2 * margin >= d) throw ConfigError("solid margins leave no lung slices");

  Rng rng(spec.seed);
  const double scale = w / 64.0;

  std::vector<VesselPath> vessels;
  for (int i = 0; i < spec.vessel_count; ++i) {
    VesselPath v{};
    v.cx = rng.uniform(0.3, 0.7) * w;
    v.cy = rng.uniform(0.3, 0.7) * h;
    v.radius = rng.uniform(2.8, 4.5) * scale;
    v.amp_x = rng.uniform(0.5, 3.0) * scale;
    v.amp_y = rng.uniform(0.5, 3.0) * scale;
    v.freq_x = rng.uniform(0.03, 0.12);
    v.freq_y = rng.uniform(0.03, 0.12);
    v.phase_x = rng.uniform(0.0, 2 * std::numbers::pi);
    v.phase_y = rng.uniform(0.0, 2 * std::numbers::pi);
    vessels.push_back(v);
  }

  const double lung_lo = margin, lung_hi = d - margin;
  const double mid = 0.5 * (lung_lo + lung_hi);
  const double half_band = 0.5 * spec.embolus_z_band * (lung_hi - lung_lo);
  std::vector<Embolus> emboli;
  for (int i = 0; i < spec.embolus_count; ++i) {
    Embolus e{};
    e.vessel = rng.uniform_int(0, spec.vessel_count - 1);
    e.cz = std::round(rng.uniform(mid - half_band, mid + half_band));
    e.radius = std::min(std::max(1.0, rng.uniform(spec.embolus_radius_min, spec.embolus_radius_max) * scale),
                        vessels[static_cast<std::size_t>(e.vessel)].radius);
    e.radius_z = std::max(1.0, e.radius * rng.uniform(1.2, 2.0));
    emboli.push_back(e);
  }

  // Slow texture so the lung field is not flat.
  const double tex_fx = rng.uniform(0.05, 0.15), tex_fy = rng.uniform(0.05, 0.15), tex_fz = rng.uniform(0.02, 0.1);

  Phantom out;
  out.volume.voxels = Tensor({d, h, w});
  out.volume.slice_spacing_mm = spec.slice_spacing_mm;
  out.volume.study_id = spec.study_id;
  out.embolus_mask = Tensor({d, h, w});
  Tensor& vox = out.volume.voxels;

  for (int z = 0; z < d; ++z) {
    const bool solid = z < margin || z >= d - margin;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double value;
        bool clot = false;
        if (solid) {
          value = phantom_hu::tissue;
        } else {
          value = phantom_hu::lung + 30.0 * std::sin(tex_fx * x + tex_fz * z) * std::cos(tex_fy * y);
          for (std::size_t vi = 0; vi < vessels.size(); ++vi) {
            const VesselPath& v = vessels[vi];
            const double dx = x - v.x(z), dy = y - v.y(z);
            if (dx * dx + dy * dy > v.radius * v.radius) continue;
            value = phantom_hu::vessel;
            for (const Embolus& e : emboli) {
              if (static_cast<std::size_t>(e.vessel) != vi) continue;
              const double ex = x - v.x(e.cz), ey = y - v.y(e.cz), ez = z - e.cz;
              if ((ex * ex + ey * ey) / (e.radius * e.radius) + ez * ez / (e.radius_z * e.radius_z) <= 1.0) {
                clot = true;
              }
            }
          }
        }
        if (clot) value = phantom_hu::vessel - spec.contrast_delta;
        value += rng.normal(0.0, spec.noise_sigma);
        const std::size_t idx = (static_cast<std::size_t>(z) * h + y) * w + x;
        vox[idx] = static_cast<float>(value);
        out.embolus_mask[idx] = clot ? 1.0 : 0.0;
      }
    }
  }

  out.annotation.spacing_mm = 10.0;
  out.label.noise_profile = spec.noise_profile;
  if (!emboli.empty()) {
    out.label.positive = true;
    out.label.severity = spec.severity == Severity::none ? Severity::segmental : spec.severity;
    const int k = annotation_stride(spec.slice_spacing_mm);
    const int phase = static_cast<int>(emboli.front().cz) % k;
    for (int z = phase; z < d; z += k) {
      Tensor mask = slice_leading(out.embolus_mask, z, 1).reshaped({h, w});
      if (mask.sum() > 0) out.annotation.slices.emplace(z, std::move(mask));
    }
  }
  return out;
}

}  // namespace embolite
