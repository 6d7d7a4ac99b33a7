#include "wpfuse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "wpfuse/errors.hpp"

namespace wpfuse {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'W', 'P', 'F', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint8_t kScalarBytes = sizeof(float);

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <typename T>
  void put(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void put_bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), std::streamsize(n)); }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}
  template <typename T>
  T get() {
    T v;
    get_bytes(&v, sizeof(T));
    return v;
  }
  void get_bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), std::streamsize(n));
    if (in_.gcount() != std::streamsize(n)) throw IoError(path_ + ": truncated checkpoint");
  }
  const std::string& path() const { return path_; }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& in_;
  std::string path_;
};

}  // namespace

void save_checkpoint(const std::string& path, const ModelState<float>& m) {
  namespace fs = std::filesystem;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    Writer w(out);
    w.put_bytes(kMagic, sizeof(kMagic));
    w.put(kCheckpointVersion);
    const NetworkConfig& c = m.config;
    for (Index v : {c.base_channels, c.encoder_blocks, c.decoder_blocks, c.input_channels, c.output_channels})
      w.put(std::int64_t(v));
    w.put(std::uint8_t(c.pooling_mode));
    w.put(m.seed);
    w.put(m.training_step);
    w.put(kScalarBytes);

    std::uint32_t count = 0;
    for_each_tensor([&](const std::string&, TensorKind, const auto&) { ++count; }, m);
    w.put(count);
    for_each_tensor(
        [&](const std::string& name, TensorKind kind, const auto& t) {
          w.put(std::uint32_t(name.size()));
          w.put_bytes(name.data(), name.size());
          w.put(std::uint8_t(kind));
          w.put(std::int64_t(t.rows()));
          w.put(std::int64_t(t.cols()));
          w.put_bytes(t.data(), std::size_t(t.size()) * sizeof(float));
        },
        m);
    out.flush();
    if (!out) throw IoError("write failed: " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move checkpoint into place: " + path);
  }
}

ModelState<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  Reader r(in, path);

  char magic[sizeof(kMagic)];
  r.get_bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw IoError(path + ": not a wpfuse checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));

  NetworkConfig cfg;
  cfg.base_channels = r.get<std::int64_t>();
  cfg.encoder_blocks = r.get<std::int64_t>();
  cfg.decoder_blocks = r.get<std::int64_t>();
  cfg.input_channels = r.get<std::int64_t>();
  cfg.output_channels = r.get<std::int64_t>();
  const auto mode = r.get<std::uint8_t>();
  if (mode > std::uint8_t(PoolingMode::kAverage)) throw IoError(path + ": bad pooling mode");
  cfg.pooling_mode = PoolingMode(mode);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw IoError(path + ": stored configuration invalid: " + e.what());
  }

  ModelState<float> m = ModelState<float>::zeros_like(cfg);
  m.seed = r.get<std::uint64_t>();
  m.training_step = r.get<std::uint64_t>();
  if (r.get<std::uint8_t>() != kScalarBytes) throw IoError(path + ": unsupported scalar type");

  struct Slot {
    float* data;
    Index rows, cols;
  };
  std::map<std::string, Slot> slots;
  for_each_tensor([&](const std::string& name, TensorKind, auto& t) { slots[name] = {t.data(), t.rows(), t.cols()}; },
                  m);

  const auto count = r.get<std::uint32_t>();
  if (count != slots.size())
    throw IoError(path + ": expected " + std::to_string(slots.size()) + " tensors, found " + std::to_string(count));
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    if (len > 4096) throw IoError(path + ": corrupt tensor name");
    std::string name(len, '\0');
    r.get_bytes(name.data(), len);
    r.get<std::uint8_t>();
    const auto rows = r.get<std::int64_t>(), cols = r.get<std::int64_t>();
    auto it = slots.find(name);
    if (it == slots.end()) throw IoError(path + ": unexpected tensor '" + name + "'");
    const Slot& t = it->second;
    if (rows != t.rows || cols != t.cols)
      throw IoError(path + ": tensor '" + name + "' has shape " + shape_string(rows, cols) + ", expected " +
                    shape_string(t.rows, t.cols));
    r.get_bytes(t.data, std::size_t(rows * cols) * sizeof(float));
    slots.erase(it);
  }
  if (!slots.empty()) throw IoError(path + ": missing tensor '" + slots.begin()->first + "'");
  if (!r.at_end()) throw IoError(path + ": trailing bytes after the last tensor");
  return m;
}

}  // namespace wpfuse
