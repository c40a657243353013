#pragma once

// Binary checkpoint container. Little-endian layout:
//
//   "TNCK" u32 format  u32 scalar-bytes
//   i32 frames  i32 width  i32 height  f64 width-multiplier  i32 classes
//   u64 optimizer-steps  u8 bn-inference (1 = running statistics)
//   u32 n + n bytes     free-form key=value config echo
//   u32 conv-count, then per conv:
//     u32 n + name  i32 out  i32 in  i32 kh  i32 kw
//     f32[] weight bias gamma beta running-mean running-var

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tracknet/errors.hpp"
#include "tracknet/network.hpp"

namespace tracknet {

inline constexpr char kCheckpointMagic[4] = {'T', 'N', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointFormat = 1;

struct Checkpoint {
  WeightState<float> weights;
  std::string config_echo;
  bool bn_running_stats_at_inference = true;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

class BlobWriter {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void put_floats(const std::vector<float>& v) {
    const auto* p = reinterpret_cast<const char*>(v.data());
    bytes_.insert(bytes_.end(), p, p + v.size() * sizeof(float));
  }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class BlobReader {
 public:
  explicit BlobReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<float> get_floats(std::size_t n) {
    need(n * sizeof(float));
    std::vector<float> v(n);
    std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> encode_checkpoint(const WeightState<float>& w, const std::string& config_echo) {
  detail::BlobWriter out;
  for (char c : kCheckpointMagic) out.put(c);
  out.put(kCheckpointFormat);
  out.put(static_cast<std::uint32_t>(sizeof(float)));
  out.put(static_cast<std::int32_t>(w.config.input_frames));
  out.put(static_cast<std::int32_t>(w.config.width));
  out.put(static_cast<std::int32_t>(w.config.height));
  out.put(w.config.width_multiplier);
  out.put(static_cast<std::int32_t>(w.config.class_count));
  out.put(static_cast<std::uint64_t>(w.version));
  out.put(static_cast<std::uint8_t>(1));
  out.put_string(config_echo);
  out.put(static_cast<std::uint32_t>(w.convs.size()));
  std::size_t conv = 0;
  for (const auto& l : w.layers) {
    if (l.kind != LayerKind::conv) continue;
    const auto& p = w.convs.at(conv++);
    out.put_string(l.name);
    out.put(static_cast<std::int32_t>(p.out_channels));
    out.put(static_cast<std::int32_t>(p.in_channels));
    out.put(static_cast<std::int32_t>(p.kernel_h));
    out.put(static_cast<std::int32_t>(p.kernel_w));
    for (const auto* v : {&p.weight, &p.bias, &p.gamma, &p.beta, &p.running_mean, &p.running_var})
      out.put_floats(*v);
  }
  return out.bytes();
}

inline Checkpoint decode_checkpoint(std::vector<char> bytes) {
  detail::BlobReader in(std::move(bytes));
  char magic[4];
  for (char& c : magic) c = in.get<char>();
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError("not a checkpoint file");
  const auto format = in.get<std::uint32_t>();
  if (format != kCheckpointFormat)
    throw FormatError("unsupported checkpoint format " + std::to_string(format));
  if (in.get<std::uint32_t>() != sizeof(float)) throw FormatError("checkpoint scalar size is not 4 bytes");

  NetworkConfig cfg;
  cfg.input_frames = in.get<std::int32_t>();
  cfg.width = in.get<std::int32_t>();
  cfg.height = in.get<std::int32_t>();
  cfg.width_multiplier = in.get<double>();
  cfg.class_count = in.get<std::int32_t>();

  Checkpoint ck;
  try {
    ck.weights = WeightState<float>::shaped(cfg);
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint network config invalid: ") + e.what());
  }
  ck.weights.version = in.get<std::uint64_t>();
  ck.bn_running_stats_at_inference = in.get<std::uint8_t>() != 0;
  ck.config_echo = in.get_string();

  const auto count = in.get<std::uint32_t>();
  if (count != ck.weights.convs.size())
    throw FormatError("checkpoint holds " + std::to_string(count) + " conv layers, config implies " +
                      std::to_string(ck.weights.convs.size()));
  std::size_t conv = 0;
  for (const auto& l : ck.weights.layers) {
    if (l.kind != LayerKind::conv) continue;
    auto& p = ck.weights.convs[conv++];
    const auto name = in.get_string();
    const int out_c = in.get<std::int32_t>(), in_c = in.get<std::int32_t>();
    const int kh = in.get<std::int32_t>(), kw = in.get<std::int32_t>();
    if (name != l.name || out_c != p.out_channels || in_c != p.in_channels || kh != p.kernel_h ||
        kw != p.kernel_w)
      throw FormatError("layer " + name + " shape " + std::to_string(out_c) + "x" + std::to_string(in_c) +
                        "x" + std::to_string(kh) + "x" + std::to_string(kw) + " does not match " + l.name);
    for (auto* v : {&p.weight, &p.bias, &p.gamma, &p.beta, &p.running_mean, &p.running_var})
      *v = in.get_floats(v->size());
  }
  if (!in.done()) throw FormatError("trailing bytes after checkpoint payload");
  return ck;
}

/// Writes to a sibling temporary file, then renames over `path`.
inline void save_checkpoint(const std::filesystem::path& path, const WeightState<float>& w,
                            const std::string& config_echo = {}) {
  const auto bytes = encode_checkpoint(w, config_echo);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(std::move(bytes));
}

}  // namespace tracknet
