#include "pemvc/checkpoint.hpp"

#include <bit>
#include <fstream>

namespace pemvc::nn {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint payload is little-endian");
constexpr int kCheckpointVersion = 1;

void write_bytes(std::ofstream& out, const void* data, std::size_t bytes) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& manifest, const Checkpoint& ckpt) {
  if (manifest.extension() != ".json") throw ConfigError("checkpoint manifest must end in .json");
  if (manifest.has_parent_path()) std::filesystem::create_directories(manifest.parent_path());
  std::filesystem::path payload = manifest;
  payload.replace_extension(".bin");

  std::ofstream out(payload, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + payload.string());
  std::uint64_t offset = 0;
  Json params = Json::array();
  for (const auto& p : ckpt.params) {
    if (p.values.size() != shape_numel(p.shape)) throw ShapeError("checkpoint: " + p.name + " size/shape mismatch");
    write_bytes(out, p.values.data(), p.values.size() * sizeof(float));
    params.push_back(Json{{"name", p.name}, {"shape", p.shape}, {"offset", offset}, {"count", p.values.size()}});
    offset += p.values.size() * sizeof(float);
  }
  Json m{{"format", "pemvc-ckpt"},
         {"version", kCheckpointVersion},
         {"precision", "f32"},
         {"payload", payload.filename().string()},
         {"params", params}};
  if (ckpt.adam) {
    const AdamState& a = *ckpt.adam;
    Json moments = Json::array();
    for (std::size_t i = 0; i < a.m.size(); ++i) {
      write_bytes(out, a.m[i].data(), a.m[i].size() * sizeof(double));
      write_bytes(out, a.v[i].data(), a.v[i].size() * sizeof(double));
      moments.push_back(Json{{"offset", offset}, {"count", a.m[i].size()}});
      offset += 2 * a.m[i].size() * sizeof(double);
    }
    m["adam"] = Json{{"precision", "f64"}, {"step", a.step}, {"lr", a.lr},   {"beta1", a.beta1},
                     {"beta2", a.beta2},   {"eps", a.eps},   {"moments", moments}};
  }
  m["payload_bytes"] = offset;
  m["meta"] = ckpt.meta;
  if (!out) throw DataError("write failed: " + payload.string());
  out.close();
  write_json_file(manifest, m);
}

Checkpoint load_checkpoint(const std::filesystem::path& manifest) {
  const Json m = read_json_file(manifest);
  if (m.value("format", "") != "pemvc-ckpt") throw DataError(manifest.string() + ": not a checkpoint manifest");
  if (m.value("version", 0) != kCheckpointVersion)
    throw DataError(manifest.string() + ": unsupported checkpoint version");
  if (m.value("precision", "") != "f32") throw DataError(manifest.string() + ": unsupported precision");
  const auto payload = manifest.parent_path() / m.at("payload").get<std::string>();
  std::ifstream in(payload, std::ios::binary);
  if (!in) throw DataError("cannot open " + payload.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::uint64_t>(in.tellg());
  if (size != m.at("payload_bytes").get<std::uint64_t>())
    throw DataError(payload.string() + ": payload size does not match manifest");

  auto read_at = [&](std::uint64_t offset, void* dst, std::uint64_t bytes) {
    if (offset + bytes > size) throw DataError(payload.string() + ": entry exceeds payload");
    in.seekg(static_cast<std::streamoff>(offset));
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(bytes));
    if (!in) throw DataError(payload.string() + ": read failed");
  };

  Checkpoint ck;
  for (const auto& e : m.at("params")) {
    NamedArray a;
    a.name = e.at("name").get<std::string>();
    a.shape = e.at("shape").get<Shape>();
    const auto count = e.at("count").get<std::uint64_t>();
    if (count != shape_numel(a.shape)) throw DataError(manifest.string() + ": bad count for " + a.name);
    a.values.resize(count);
    read_at(e.at("offset").get<std::uint64_t>(), a.values.data(), count * sizeof(float));
    ck.params.push_back(std::move(a));
  }
  if (m.contains("adam")) {
    const Json& aj = m.at("adam");
    AdamState a;
    a.step = aj.at("step").get<std::uint64_t>();
    a.lr = aj.at("lr").get<double>();
    a.beta1 = aj.at("beta1").get<double>();
    a.beta2 = aj.at("beta2").get<double>();
    a.eps = aj.at("eps").get<double>();
    for (const auto& e : aj.at("moments")) {
      const auto count = e.at("count").get<std::uint64_t>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      std::vector<double> mv(count), vv(count);
      read_at(offset, mv.data(), count * sizeof(double));
      read_at(offset + count * sizeof(double), vv.data(), count * sizeof(double));
      a.m.push_back(std::move(mv));
      a.v.push_back(std::move(vv));
    }
    ck.adam = std::move(a);
  }
  ck.meta = m.value("meta", Json());
  return ck;
}

template <typename T>
std::vector<NamedArray> snapshot(const std::vector<std::string>& names, const std::vector<Tensor<T>>& params) {
  if (names.size() != params.size()) throw ShapeError("snapshot: names/params count mismatch");
  std::vector<NamedArray> out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    NamedArray a{names[i], params[i].shape(), {}};
    a.values.reserve(params[i].numel());
    for (T v : params[i].data()) a.values.push_back(static_cast<float>(v));
    out.push_back(std::move(a));
  }
  return out;
}

template <typename T>
void restore(const std::vector<NamedArray>& saved, const std::vector<std::string>& names,
             std::vector<Tensor<T>>& params) {
  if (saved.size() != params.size() || names.size() != params.size()) {
    throw DataError("checkpoint holds " + std::to_string(saved.size()) + " tensors, model expects " +
                    std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (saved[i].name != names[i] || saved[i].shape != params[i].shape()) {
      throw DataError("checkpoint tensor " + saved[i].name + " " + shape_str(saved[i].shape) +
                      " does not match model tensor " + names[i] + " " + shape_str(params[i].shape()));
    }
    auto dst = params[i].mutable_data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(saved[i].values[j]);
  }
}

template std::vector<NamedArray> snapshot<float>(const std::vector<std::string>&, const std::vector<Tensor<float>>&);
template std::vector<NamedArray> snapshot<double>(const std::vector<std::string>&, const std::vector<Tensor<double>>&);
template void restore<float>(const std::vector<NamedArray>&, const std::vector<std::string>&, std::vector<Tensor<float>>&);
template void restore<double>(const std::vector<NamedArray>&, const std::vector<std::string>&, std::vector<Tensor<double>>&);

}  // namespace pemvc::nn
