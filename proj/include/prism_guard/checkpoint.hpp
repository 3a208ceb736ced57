#pragma once

// "PGMD" checkpoint container.
//
// Layout (all integers and floats little-endian):
//   char[4]  magic "PGMD"
//   u32      format version (kFormatVersion)
//   u32      kind (1 = language model, 2 = activator bank, 3 = router)
//   u32      n_dims, then n_dims × u64 dims (kind-specific hyperparameters)
//   u32      n_sections, then per section:
//              u32 name length, name bytes, u64 rows, u64 cols,
//              rows·cols × f64 values (row-major)

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "numerics.hpp"

namespace pguard {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class CheckpointKind : std::uint32_t { LanguageModel = 1, ActivatorBank = 2, Router = 3 };

inline constexpr std::array<char, 4> kCheckpointMagic{'P', 'G', 'M', 'D'};
inline constexpr std::uint32_t kFormatVersion = 1;

struct Section {
  std::string name;
  std::uint64_t rows = 0;
  std::uint64_t cols = 0;
  std::vector<double> values;
};

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::LanguageModel;
  std::vector<std::uint64_t> dims;
  std::vector<Section> sections;

  void add(std::string name, std::size_t rows, std::size_t cols, std::span<const double> values) {
    if (values.size() != rows * cols) throw CheckpointError("section '" + name + "': size does not match shape");
    sections.push_back({std::move(name), rows, cols, {values.begin(), values.end()}});
  }
  void add_scalar(std::string name, double value) { add(std::move(name), 1, 1, std::span<const double>(&value, 1)); }

  const Section& get(const std::string& name) const {
    for (const auto& s : sections)
      if (s.name == name) return s;
    throw CheckpointError("checkpoint has no section '" + name + "'");
  }
  double scalar(const std::string& name) const {
    const auto& s = get(name);
    if (s.values.size() != 1) throw CheckpointError("section '" + name + "' is not a scalar");
    return s.values[0];
  }

  /// Copies a section into `dst`, checking the recorded shape.
  void read_into(const std::string& name, std::size_t rows, std::size_t cols, std::span<double> dst) const {
    const auto& s = get(name);
    if (s.rows != rows || s.cols != cols || dst.size() != rows * cols) {
      throw CheckpointError("section '" + name + "' has shape " + std::to_string(s.rows) + "x" +
                            std::to_string(s.cols) + ", expected " + std::to_string(rows) + "x" +
                            std::to_string(cols));
    }
    std::copy(s.values.begin(), s.values.end(), dst.begin());
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double x) { put_u64(out, std::bit_cast<std::uint64_t>(x)); }

class Reader {
 public:
  explicit Reader(std::string_view buf) : buf_(buf) {}

  std::uint64_t uint(int bytes) {
    need(bytes);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += bytes;
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(buf_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw CheckpointError("checkpoint truncated");
  }
  std::string_view buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(ck.kind));
  detail::put_u32(out, static_cast<std::uint32_t>(ck.dims.size()));
  for (auto d : ck.dims) detail::put_u64(out, d);
  detail::put_u32(out, static_cast<std::uint32_t>(ck.sections.size()));
  for (const auto& s : ck.sections) {
    detail::put_u32(out, static_cast<std::uint32_t>(s.name.size()));
    out += s.name;
    detail::put_u64(out, s.rows);
    detail::put_u64(out, s.cols);
    for (double x : s.values) detail::put_f64(out, x);
  }
  return out;
}

inline Checkpoint deserialize(std::string_view buf) {
  detail::Reader rd(buf);
  const auto magic = rd.bytes(4);
  if (std::memcmp(magic.data(), kCheckpointMagic.data(), 4) != 0) throw CheckpointError("bad magic, not a PGMD file");
  const auto version = rd.u32();
  if (version != kFormatVersion) throw CheckpointError("unsupported PGMD version " + std::to_string(version));
  Checkpoint ck;
  const auto kind = rd.u32();
  if (kind < 1 || kind > 3) throw CheckpointError("unknown checkpoint kind " + std::to_string(kind));
  ck.kind = static_cast<CheckpointKind>(kind);
  const auto n_dims = rd.u32();
  for (std::uint32_t i = 0; i < n_dims; ++i) ck.dims.push_back(rd.u64());
  const auto n_sections = rd.u32();
  for (std::uint32_t i = 0; i < n_sections; ++i) {
    Section s;
    s.name = rd.bytes(rd.u32());
    s.rows = rd.u64();
    s.cols = rd.u64();
    if (s.rows != 0 && s.cols > (buf.size() / 8) / s.rows) throw CheckpointError("section '" + s.name + "' too large");
    s.values.resize(s.rows * s.cols);
    for (auto& x : s.values) x = rd.f64();
    ck.sections.push_back(std::move(s));
  }
  if (!rd.at_end()) throw CheckpointError("trailing bytes after last section");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open '" + path + "' for writing");
  const auto bytes = serialize(ck);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError("write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path, CheckpointKind expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  auto ck = deserialize(bytes);
  if (ck.kind != expected) throw CheckpointError("'" + path + "' holds a different checkpoint kind");
  return ck;
}

/// Writes every parameter block of `params` as a named section.
template <class P>
void add_params(Checkpoint& ck, const P& params) {
  visit_params(params, std::string{}, [&](const std::string& name, std::size_t r, std::size_t c,
                                          std::span<const double> s) { ck.add(name, r, c, s); });
}

template <class P>
void read_params(const Checkpoint& ck, P& params) {
  visit_params(params, std::string{}, [&](const std::string& name, std::size_t r, std::size_t c,
                                          std::span<double> s) { ck.read_into(name, r, c, s); });
}

}  // namespace pguard
