#include <bit>
#include <cstring>
#include <fstream>

#include "pemvc/datapipe.hpp"
#include "pemvc/errors.hpp"

namespace pemvc::datapipe {
namespace {

static_assert(std::endian::native == std::endian::little, "shard I/O assumes a little-endian host");

constexpr char kMagic[8] = {'P', 'E', 'M', 'V', 'C', 'S', 'H', 'D'};
constexpr std::uint32_t kShardVersion = 1;
constexpr int kDataVersion = 1;

template <typename V>
void put(std::ofstream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename V>
V take(std::ifstream& in, const std::string& path) {
  V v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw DataError(path + ": truncated shard");
  return v;
}

void take_floats(std::ifstream& in, std::vector<float>& dst, std::size_t n, const std::string& path) {
  dst.resize(n);
  if (!in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(n * sizeof(float))))
    throw DataError(path + ": truncated shard");
}

std::string shard_name(Task task, bool validation) {
  return std::string(validation ? "val_" : "train_") + to_string(task) + ".bin";
}

}  // namespace

void write_shard(const std::filesystem::path& path, const ShardHeader& header,
                 std::span<const PairedSample> samples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(kMagic, sizeof kMagic);
  put(out, kShardVersion);
  put(out, header.window);
  put(out, header.channels);
  put(out, static_cast<std::uint32_t>(header.task));
  put(out, static_cast<std::uint32_t>(header.validation ? 1 : 0));
  put(out, std::uint32_t{0});
  put(out, static_cast<std::uint64_t>(samples.size()));
  for (std::size_t c = 0; c < kChannels; ++c) put(out, header.stats.mean[c]);
  for (std::size_t c = 0; c < kChannels; ++c) put(out, header.stats.std[c]);
  const std::size_t seq = std::size_t{header.window} * header.channels;
  for (const auto& s : samples) {
    if (s.task != header.task || s.x_enc.size() != seq || s.x_dec.size() != seq ||
        s.y.size() != header.window) {
      throw DataError("write_shard: sample does not match shard header");
    }
    put(out, s.cycle_index);
    put(out, s.window_offset);
    put(out, s.dec_offset);
    put(out, s.valid_len);
    put(out, std::uint32_t{0});
    out.write(reinterpret_cast<const char*>(s.x_enc.data()), static_cast<std::streamsize>(seq * sizeof(float)));
    out.write(reinterpret_cast<const char*>(s.x_dec.data()), static_cast<std::streamsize>(seq * sizeof(float)));
    out.write(reinterpret_cast<const char*>(s.y.data()),
              static_cast<std::streamsize>(header.window * sizeof(float)));
  }
  if (!out) throw DataError("write failed: " + path.string());
}

std::vector<PairedSample> read_shard(const std::filesystem::path& path, ShardHeader* header_out) {
  const std::string p = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + p);
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw DataError(p + ": not a sample shard");
  ShardHeader h;
  h.version = take<std::uint32_t>(in, p);
  if (h.version != kShardVersion) throw DataError(p + ": unsupported shard version " + std::to_string(h.version));
  h.window = take<std::uint32_t>(in, p);
  h.channels = take<std::uint32_t>(in, p);
  if (h.window != kWindow || h.channels != kChannels)
    throw DataError(p + ": shard window/channels do not match this build");
  const auto task = take<std::uint32_t>(in, p);
  if (task > 1) throw DataError(p + ": unknown task id");
  h.task = static_cast<Task>(task);
  h.validation = take<std::uint32_t>(in, p) != 0;
  take<std::uint32_t>(in, p);
  const auto count = take<std::uint64_t>(in, p);
  for (std::size_t c = 0; c < kChannels; ++c) h.stats.mean[c] = take<double>(in, p);
  for (std::size_t c = 0; c < kChannels; ++c) h.stats.std[c] = take<double>(in, p);

  const std::size_t seq = std::size_t{h.window} * h.channels;
  std::vector<PairedSample> samples(count);
  for (auto& s : samples) {
    s.task = h.task;
    s.cycle_index = take<std::uint64_t>(in, p);
    s.window_offset = take<std::uint64_t>(in, p);
    s.dec_offset = take<std::uint64_t>(in, p);
    s.valid_len = take<std::uint32_t>(in, p);
    take<std::uint32_t>(in, p);
    if (s.valid_len == 0 || s.valid_len > h.window) throw DataError(p + ": invalid valid_len");
    take_floats(in, s.x_enc, seq, p);
    take_floats(in, s.x_dec, seq, p);
    take_floats(in, s.y, h.window, p);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw DataError(p + ": trailing bytes after samples");
  if (header_out) *header_out = h;
  return samples;
}

void write_prepared(const PreparedData& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Json shards = Json::array();
  auto emit = [&](Task task, bool validation, const std::vector<PairedSample>& samples) {
    ShardHeader h;
    h.task = task;
    h.validation = validation;
    h.stats = data.stats;
    const std::string name = shard_name(task, validation);
    write_shard(dir / name, h, samples);
    shards.push_back(Json{{"file", name},
                          {"task", to_string(task)},
                          {"split", validation ? "val" : "train"},
                          {"count", samples.size()}});
  };
  emit(Task::op_pol, false, data.op_pol.train);
  emit(Task::op_pol, true, data.op_pol.val);
  emit(Task::op_op, false, data.op_op.train);
  emit(Task::op_op, true, data.op_op.val);
  Json manifest{{"format", "pemvc-data"},
                {"version", kDataVersion},
                {"window", kWindow},
                {"channels", {"current_density", "voltage"}},
                {"run_dir", data.run_dir},
                {"norm_stats", to_json(data.stats)},
                {"split", {{"train", data.plan.train}, {"val", data.plan.val}}},
                {"shards", shards},
                {"experiment", data.experiment}};
  write_json_file(dir / "manifest.json", manifest);
}

PreparedData read_prepared(const std::filesystem::path& dir) {
  const Json m = read_json_file(dir / "manifest.json");
  if (m.value("format", "") != "pemvc-data") throw DataError(dir.string() + ": not a prepared data directory");
  if (m.value("version", 0) != kDataVersion) throw DataError(dir.string() + ": unsupported data format version");
  PreparedData data;
  data.stats = norm_stats_from_json(m.at("norm_stats"));
  data.plan.train = m.at("split").at("train").get<std::vector<std::uint64_t>>();
  data.plan.val = m.at("split").at("val").get<std::vector<std::uint64_t>>();
  data.run_dir = m.value("run_dir", "");
  data.experiment = m.value("experiment", Json());
  auto load = [&](Task task, bool validation) {
    ShardHeader h;
    auto samples = read_shard(dir / shard_name(task, validation), &h);
    if (h.task != task || h.validation != validation) throw DataError(dir.string() + ": shard header mismatch");
    if (h.stats.mean != data.stats.mean || h.stats.std != data.stats.std)
      throw DataError(dir.string() + ": shard normalization differs from manifest");
    return samples;
  };
  data.op_pol.train = load(Task::op_pol, false);
  data.op_pol.val = load(Task::op_pol, true);
  data.op_op.train = load(Task::op_op, false);
  data.op_op.val = load(Task::op_op, true);
  return data;
}

}  // namespace pemvc::datapipe
