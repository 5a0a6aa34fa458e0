#pragma once

// Binary checkpoint container for DynnModel.
//
//   "DYNNCKPT"                      8-byte magic
//   u32 version                     (1)
//   u32 n_header, then n_header x (str key, str value)
//   u32 n_tensors, then n_tensors x (str name, u64 rows, u64 cols,
//                                     rows*cols x f64)
//
// Integers and doubles are little-endian; str is (u32 length, bytes).
// Header values are decimal text; doubles in the header are written with
// 17 significant digits so they round-trip exactly.

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dynn/errors.hpp"
#include "dynn/moe.hpp"

namespace dynn::moe {

inline constexpr std::string_view kCheckpointMagic = "DYNNCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail_ckpt {

class Writer {
 public:
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  const std::string& bytes() const { return bytes_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string bytes_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f64() { return std::bit_cast<double>(le(8)); }
  std::string str() {
    const std::uint32_t n = u32();
    return std::string(take(n));
  }
  std::string_view take(std::size_t n) {
    if (data_.size() - pos_ < n) throw IoError("checkpoint: truncated file");
    std::string_view out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::uint64_t le(int n) {
    const std::string_view b = take(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }

  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::map<std::string, std::string> config_header(const ModelConfig& c) {
  return {{"experts", std::to_string(c.experts)},
          {"n_users", std::to_string(c.n_users)},
          {"embed_dim", std::to_string(c.embed_dim)},
          {"expert_hidden", std::to_string(c.expert_hidden)},
          {"expert_out", std::to_string(c.expert_out)},
          {"s_norm", fmt_double(c.s_norm)},
          {"d_norm", fmt_double(c.d_norm)},
          {"gated", c.gated ? "1" : "0"}};
}

inline const std::string& field(const std::map<std::string, std::string>& h, const std::string& key) {
  auto it = h.find(key);
  if (it == h.end()) throw IoError("checkpoint: header is missing '" + key + "'");
  return it->second;
}

inline std::size_t parse_size(const std::string& s) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw IoError("checkpoint: bad integer '" + s + "'");
  return v;
}

inline double parse_double(const std::string& s) {
  std::istringstream in(s);
  in.imbue(std::locale::classic());
  double v = 0;
  in >> v;
  if (!in || !in.eof()) throw IoError("checkpoint: bad number '" + s + "'");
  return v;
}

}  // namespace detail_ckpt

inline std::string serialize(const DynnModel& model) {
  detail_ckpt::Writer w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  const auto header = detail_ckpt::config_header(model.cfg);
  w.u32(static_cast<std::uint32_t>(header.size()));
  for (const auto& [k, v] : header) {
    w.str(k);
    w.str(v);
  }
  const auto params = model.parameters();
  const auto names = model.parameter_names();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& m = params[i]->value;
    w.str(names[i]);
    w.u64(m.rows);
    w.u64(m.cols);
    for (double v : m.data) w.f64(v);
  }
  return w.bytes();
}

inline DynnModel deserialize(std::string_view bytes) {
  detail_ckpt::Reader r(bytes);
  if (r.take(kCheckpointMagic.size()) != kCheckpointMagic) throw IoError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version));

  std::map<std::string, std::string> header;
  for (std::uint32_t n = r.u32(); n > 0; --n) {
    std::string key = r.str();
    header[std::move(key)] = r.str();
  }
  using detail_ckpt::field;
  ModelConfig cfg;
  cfg.experts = detail_ckpt::parse_size(field(header, "experts"));
  cfg.n_users = detail_ckpt::parse_size(field(header, "n_users"));
  cfg.embed_dim = detail_ckpt::parse_size(field(header, "embed_dim"));
  cfg.expert_hidden = detail_ckpt::parse_size(field(header, "expert_hidden"));
  cfg.expert_out = detail_ckpt::parse_size(field(header, "expert_out"));
  cfg.s_norm = detail_ckpt::parse_double(field(header, "s_norm"));
  cfg.d_norm = detail_ckpt::parse_double(field(header, "d_norm"));
  cfg.gated = field(header, "gated") == "1";
  try {
    cfg.validate();
  } catch (const ContractError& e) {
    throw IoError(std::string("checkpoint: invalid model config: ") + e.what());
  }

  Rng unused(0);
  DynnModel model = DynnModel::init(cfg, unused);
  const auto params = model.parameters();
  const auto names = model.parameter_names();
  const std::uint32_t count = r.u32();
  if (count != params.size()) throw IoError("checkpoint: tensor count does not match the model config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = r.str();
    if (name != names[i]) throw IoError("checkpoint: expected tensor '" + names[i] + "', found '" + name + "'");
    const std::uint64_t rows = r.u64();
    const std::uint64_t cols = r.u64();
    Matrix& m = params[i]->value;
    if (rows != m.rows || cols != m.cols) throw IoError("checkpoint: shape mismatch for '" + name + "'");
    for (double& v : m.data) v = r.f64();
    params[i]->zero_grad();
  }
  if (!r.done()) throw IoError("checkpoint: trailing bytes");
  return model;
}

inline void save_checkpoint(const DynnModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  const std::string bytes = serialize(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline DynnModel load_checkpoint(const std::filesystem::path& path) {
  try {
    return deserialize(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// FNV-1a 64 of the serialized model, as 16 hex digits.
inline std::string fingerprint(const DynnModel& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : serialize(model)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dynn::moe
