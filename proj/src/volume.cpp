#include "embolite/volume.hpp"

#include <cstring>
#include <vector>

#include "binary_io.hpp"
#include "embolite/errors.hpp"

namespace embolite {

namespace {
constexpr char kVolumeMagic[4] = {'E', 'M', 'B', 'V'};
constexpr char kAnnotationMagic[4] = {'E', 'M', 'B', 'A'};
}  // namespace

std::string to_string(Severity s) {
  switch (s) {
    case Severity::none: return "none";
    case Severity::subsegmental: return "subsegmental";
    case Severity::segmental: return "segmental";
    case Severity::lobar: return "lobar";
    case Severity::saddle: return "saddle";
  }
  return "none";
}

Severity severity_from_string(const std::string& s) {
  for (Severity v : {Severity::none, Severity::subsegmental, Severity::segmental, Severity::lobar, Severity::saddle}) {
    if (to_string(v) == s) return v;
  }
  throw DataError("unknown severity '" + s + "'");
}

bool is_high_severity(Severity s) { return s == Severity::lobar || s == Severity::saddle; }

Tensor volume_slice(const Volume& v, int z) {
  return slice_leading(v.voxels, z, 1).reshaped({v.height(), v.width()});
}

void save_volume(const Volume& v, const std::filesystem::path& path) {
  if (v.voxels.rank() != 3) throw DimensionError("volume voxels must be [D,H,W]");
  nlohmann::json header{{"dims", v.voxels.shape()},
                        {"spacing_mm", v.slice_spacing_mm},
                        {"dtype", "f32"},
                        {"study_id", v.study_id}};
  std::vector<float> payload(v.voxels.numel());
  for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<float>(v.voxels[i]);
  binio::write_file(path, kVolumeMagic, header, payload.data(), payload.size() * sizeof(float));
}

Volume load_volume(const std::filesystem::path& path) {
  const binio::Framed f = binio::read_file(path, kVolumeMagic);
  Volume v;
  std::vector<std::int64_t> dims;
  try {
    dims = f.header.at("dims").get<std::vector<std::int64_t>>();
    v.slice_spacing_mm = f.header.at("spacing_mm").get<double>();
    v.study_id = f.header.at("study_id").get<std::string>();
    if (f.header.at("dtype") != "f32") throw ParseError(path.string() + ": unsupported dtype", 12);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": invalid volume header: " + e.what(), 12);
  }
  if (dims.size() != 3) throw ParseError(path.string() + ": volume dims must have 3 entries", 12);
  if (!(v.slice_spacing_mm > 0)) throw ParseError(path.string() + ": slice spacing must be positive", 12);
  const std::size_t count = binio::checked_count(dims, path.string(), 12);
  if (f.payload.size() != count * sizeof(float)) {
    throw ParseError(path.string() + ": truncated payload, header dims need " + std::to_string(count * sizeof(float)) +
                         " bytes, found " + std::to_string(f.payload.size()),
                     f.payload_offset + std::min(f.payload.size(), count * sizeof(float)));
  }
  std::vector<float> raw(count);
  std::memcpy(raw.data(), f.payload.data(), count * sizeof(float));
  v.voxels = Tensor(Shape(dims.begin(), dims.end()), std::vector<double>(raw.begin(), raw.end()));
  return v;
}

void save_annotation(const SparseAnnotation& a, int depth, const std::filesystem::path& path) {
  int h = 1, w = 1;
  std::vector<int> indices;
  std::vector<std::uint8_t> payload;
  for (const auto& [z, mask] : a.slices) {
    if (z < 0 || z >= depth) throw DataError("annotation slice " + std::to_string(z) + " outside volume depth");
    h = mask.dim(0);
    w = mask.dim(1);
    indices.push_back(z);
    for (double m : mask.data()) payload.push_back(m > 0.5 ? 1 : 0);
  }
  nlohmann::json header{
      {"depth", depth}, {"height", h}, {"width", w}, {"spacing_mm", a.spacing_mm}, {"slices", indices}};
  binio::write_file(path, kAnnotationMagic, header, payload.data(), payload.size());
}

SparseAnnotation load_annotation(const std::filesystem::path& path) {
  const binio::Framed f = binio::read_file(path, kAnnotationMagic);
  SparseAnnotation a;
  std::vector<int> indices;
  int depth = 0, h = 0, w = 0;
  try {
    depth = f.header.at("depth").get<int>();
    h = f.header.at("height").get<int>();
    w = f.header.at("width").get<int>();
    a.spacing_mm = f.header.at("spacing_mm").get<double>();
    indices = f.header.at("slices").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": invalid annotation header: " + e.what(), 12);
  }
  const std::size_t plane = binio::checked_count({h, w}, path.string(), 12);
  if (f.payload.size() != plane * indices.size()) {
    throw ParseError(path.string() + ": truncated annotation payload", f.payload_offset);
  }
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] < 0 || indices[k] >= depth) throw ParseError(path.string() + ": slice index out of range", 12);
    Tensor m({h, w});
    for (std::size_t i = 0; i < plane; ++i) {
      const auto b = static_cast<std::uint8_t>(f.payload[k * plane + i]);
      if (b > 1) throw ParseError(path.string() + ": non-binary mask value", f.payload_offset + k * plane + i);
      m[i] = b;
    }
    a.slices.emplace(indices[k], std::move(m));
  }
  return a;
}

}  // namespace embolite
