#include "embolite/checkpoint.hpp"

#include <cstring>

#include "binary_io.hpp"

namespace embolite {

namespace {
constexpr char kMagic[4] = {'E', 'M', 'B', '1'};
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return &t.value;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const nn::StateDict& state, std::int64_t step,
                     const nlohmann::json& meta) {
  std::vector<std::pair<std::string, const Tensor*>> all;
  for (const Parameter* p : state.params) all.emplace_back(p->name, &p->value);
  for (const auto& [name, t] : state.buffers) all.emplace_back(name, t);

  nlohmann::json header;
  header["dtype"] = "f64";
  header["step"] = step;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  std::vector<double> payload;
  for (const auto& [name, t] : all) {
    header["tensors"].push_back({{"name", name}, {"shape", t->shape()}});
    payload.insert(payload.end(), t->vec().begin(), t->vec().end());
  }
  binio::write_file(path, kMagic, header, payload.data(), payload.size() * sizeof(double));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const binio::Framed f = binio::read_file(path, kMagic);
  Checkpoint ck;
  std::size_t pos = 0;
  try {
    if (f.header.at("dtype") != "f64") throw ParseError(path.string() + ": unsupported dtype", 4);
    ck.step = f.header.at("step").get<std::int64_t>();
    ck.meta = f.header.value("meta", nlohmann::json::object());
    for (const auto& entry : f.header.at("tensors")) {
      const auto dims = entry.at("shape").get<std::vector<std::int64_t>>();
      const std::size_t count = binio::checked_count(dims, path.string(), 12);
      if ((pos + count) * sizeof(double) > f.payload.size()) {
        throw ParseError(path.string() + ": truncated payload for tensor " + entry.at("name").get<std::string>(),
                         f.payload_offset + f.payload.size());
      }
      std::vector<double> data(count);
      std::memcpy(data.data(), f.payload.data() + pos * sizeof(double), count * sizeof(double));
      pos += count;
      Shape shape(dims.begin(), dims.end());
      ck.tensors.push_back({entry.at("name").get<std::string>(), Tensor(shape, std::move(data))});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": invalid checkpoint header: " + e.what(), 12);
  }
  if (pos * sizeof(double) != f.payload.size()) {
    throw ParseError(path.string() + ": trailing bytes after tensor data", f.payload_offset + pos * sizeof(double));
  }
  return ck;
}

void restore_state(const Checkpoint& ckpt, nn::StateDict& state) {
  auto copy_into = [&](const std::string& name, Tensor& dst) {
    const Tensor* src = ckpt.find(name);
    if (src == nullptr) throw DataError("checkpoint is missing tensor " + name);
    if (src->shape() != dst.shape()) {
      throw DataError("checkpoint tensor " + name + " has shape " + shape_str(src->shape()) + ", model expects " +
                      shape_str(dst.shape()));
    }
    dst = *src;
  };
  for (Parameter* p : state.params) copy_into(p->name, p->value);
  for (auto& [name, t] : state.buffers) copy_into(name, *t);
}

}  // namespace embolite
