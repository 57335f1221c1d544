#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   bytes 0..7   magic "GPMCKPT1"
//   u32          format version (1)
//   u32          record count
//   per record:
//     u32        name length, followed by that many UTF-8 bytes
//     u32        rank
//     u32 x rank dimensions
//     f32 x prod(dimensions) values
//
// Model parameters are stored under their own names. Trainers add
// optimizer moments ("optim.m/<name>", "optim.v/<name>") and the step
// counter ("optim.step") so a run can be resumed exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "gpm/common/error.hpp"
#include "gpm/nn/optim.hpp"
#include "gpm/nn/parameters.hpp"

namespace gpm::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'G', 'P', 'M', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

using Checkpoint = std::map<std::string, CheckpointRecord>;

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline std::uint32_t get_u32(std::istream& is, const std::string& path) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw ParseError("checkpoint truncated: " + path);
  return v;
}
}  // namespace detail

/// Records are written in the order given (names must be unique).
inline void write_checkpoint(const std::string& path, const std::vector<std::pair<std::string, CheckpointRecord>>& records) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write(kCheckpointMagic, 8);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, rec] : records) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(rec.dims.size()));
    std::size_t count = 1;
    for (auto d : rec.dims) {
      detail::put_u32(os, d);
      count *= d;
    }
    if (count != rec.values.size()) throw ContractViolation("checkpoint record '" + name + "' has inconsistent dims");
    os.write(reinterpret_cast<const char*>(rec.values.data()), static_cast<std::streamsize>(count * sizeof(float)));
  }
  if (!os) throw IoError("failed writing checkpoint: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotReady("checkpoint not found: " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw ParseError("not a GPM checkpoint (bad magic): " + path);
  const auto version = detail::get_u32(is, path);
  if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get_u32(is, path);
  Checkpoint ck;
  for (std::uint32_t r = 0; r < count; ++r) {
    const auto len = detail::get_u32(is, path);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw ParseError("checkpoint truncated: " + path);
    CheckpointRecord rec;
    const auto rank = detail::get_u32(is, path);
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      rec.dims.push_back(detail::get_u32(is, path));
      n *= rec.dims.back();
    }
    rec.values.resize(n);
    if (!is.read(reinterpret_cast<char*>(rec.values.data()), static_cast<std::streamsize>(n * sizeof(float))))
      throw ParseError("checkpoint truncated: " + path);
    if (!ck.emplace(std::move(name), std::move(rec)).second) throw ParseError("duplicate record in checkpoint: " + path);
  }
  return ck;
}

template <class T>
CheckpointRecord to_record(std::size_t rows, std::size_t cols, std::span<const T> values) {
  CheckpointRecord rec;
  rec.dims = {static_cast<std::uint32_t>(rows), static_cast<std::uint32_t>(cols)};
  rec.values.assign(values.begin(), values.end());
  return rec;
}

template <class T>
void append_parameters(std::vector<std::pair<std::string, CheckpointRecord>>& out, const ParameterSet<T>& ps) {
  for (const auto& p : ps.all()) out.emplace_back(p.name, to_record<T>(p.tensor.rows(), p.tensor.cols(), p.tensor.value()));
}

template <class T>
void append_optimizer(std::vector<std::pair<std::string, CheckpointRecord>>& out, const AdamW<T>& opt) {
  const auto& st = opt.state();
  for (std::size_t k = 0; k < opt.params().size(); ++k) {
    const auto* p = opt.params()[k];
    out.emplace_back("optim.m/" + p->name, to_record<T>(p->tensor.rows(), p->tensor.cols(), st.first_moment[k]));
    out.emplace_back("optim.v/" + p->name, to_record<T>(p->tensor.rows(), p->tensor.cols(), st.second_moment[k]));
  }
  // Split so counts beyond 2^24 survive the float encoding.
  const auto lo = static_cast<float>(st.step & 0xFFFFFu);
  const auto hi = static_cast<float>(st.step >> 20);
  out.emplace_back("optim.step", CheckpointRecord{{2}, {lo, hi}});
}

namespace detail {
template <class T>
void copy_record(const CheckpointRecord& rec, std::size_t rows, std::size_t cols, std::span<T> dst, const std::string& name) {
  std::size_t n = 1;
  for (auto d : rec.dims) n *= d;
  if (rec.dims.size() != 2 || rec.dims[0] != rows || rec.dims[1] != cols || n != dst.size())
    throw DataError("checkpoint shape mismatch for '" + name + "'");
  for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(rec.values[i]);
}
}  // namespace detail

/// Loads every parameter of `ps` from the checkpoint; extra records are ignored.
template <class T>
void load_parameters(const Checkpoint& ck, ParameterSet<T>& ps) {
  for (auto& p : ps.all()) {
    auto it = ck.find(p.name);
    if (it == ck.end()) throw DataError("checkpoint lacks parameter '" + p.name + "'");
    detail::copy_record(it->second, p.tensor.rows(), p.tensor.cols(), p.tensor.mutable_value(), p.name);
  }
}

inline bool has_optimizer_state(const Checkpoint& ck) {
  return ck.count("optim.step") != 0;
}

template <class T>
void load_optimizer(const Checkpoint& ck, AdamW<T>& opt) {
  auto& st = opt.state();
  for (std::size_t k = 0; k < opt.params().size(); ++k) {
    const auto* p = opt.params()[k];
    auto m = ck.find("optim.m/" + p->name), v = ck.find("optim.v/" + p->name);
    if (m == ck.end() || v == ck.end()) throw DataError("checkpoint lacks optimizer state for '" + p->name + "'");
    detail::copy_record(m->second, p->tensor.rows(), p->tensor.cols(), std::span<T>(st.first_moment[k]), p->name);
    detail::copy_record(v->second, p->tensor.rows(), p->tensor.cols(), std::span<T>(st.second_moment[k]), p->name);
  }
  auto s = ck.find("optim.step");
  if (s == ck.end() || s->second.values.size() != 2) throw DataError("checkpoint lacks optimizer step");
  st.step = static_cast<std::uint64_t>(s->second.values[0]) | (static_cast<std::uint64_t>(s->second.values[1]) << 20);
}

}  // namespace gpm::nn
