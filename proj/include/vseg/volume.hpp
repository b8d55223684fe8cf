#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vseg/errors.hpp"

namespace vseg {

// Physical voxel pitch in millimetres along x, y, z.
struct VoxelSpacing {
  double dx = 1.0;
  double dy = 1.0;
  double dz = 1.0;

  void validate() const {
    if (!(dx > 0.0 && dy > 0.0 && dz > 0.0))
      throw ArgumentError("voxel spacing components must be > 0");
  }
  double voxel_volume_mm3() const { return dx * dy * dz; }
  bool operator==(const VoxelSpacing&) const = default;
};

using Dims = std::array<std::size_t, 3>;

inline std::size_t dims_count(const Dims& d) { return d[0] * d[1] * d[2]; }

// Scalar intensity grid, x-fastest linear order, u16 semantic range.
struct Volume {
  Dims dims{0, 0, 0};
  VoxelSpacing spacing;
  std::vector<std::uint16_t> data;

  Volume() = default;
  Volume(Dims d, VoxelSpacing s, std::uint16_t fill = 0)
      : dims(d), spacing(s), data(dims_count(d), fill) {
    validate();
  }

  void validate() const {
    spacing.validate();
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
      throw ArgumentError("volume dims must each be >= 1");
    if (data.size() != dims_count(dims))
      throw FormatError("volume data length does not match dims");
  }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return x + dims[0] * (y + dims[1] * z);
  }
  std::uint16_t& at(std::size_t x, std::size_t y, std::size_t z) {
    return data[index(x, y, z)];
  }
  std::uint16_t at(std::size_t x, std::size_t y, std::size_t z) const {
    return data[index(x, y, z)];
  }
  std::size_t slice_voxels() const { return dims[0] * dims[1]; }
  std::span<const std::uint16_t> slice(std::size_t z) const {
    return {data.data() + z * slice_voxels(), slice_voxels()};
  }
  std::span<std::uint16_t> slice(std::size_t z) {
    return {data.data() + z * slice_voxels(), slice_voxels()};
  }

  std::pair<std::uint16_t, std::uint16_t> min_max() const {
    std::uint16_t lo = std::numeric_limits<std::uint16_t>::max(), hi = 0;
    for (auto v : data) {
      if (v < lo) lo = v;
      if (v > hi) hi = v;
    }
    return {lo, hi};
  }

  bool operator==(const Volume&) const = default;
};

// Per-voxel class labels produced by segmentation. u8 payload, same layout
// conventions as Volume.
struct LabelVolume {
  Dims dims{0, 0, 0};
  VoxelSpacing spacing;
  std::vector<std::uint8_t> data;

  LabelVolume() = default;
  LabelVolume(Dims d, VoxelSpacing s, std::uint8_t fill = 0)
      : dims(d), spacing(s), data(dims_count(d), fill) {}

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return x + dims[0] * (y + dims[1] * z);
  }
  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t z) { return data[index(x, y, z)]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t z) const {
    return data[index(x, y, z)];
  }
  std::size_t slice_voxels() const { return dims[0] * dims[1]; }

  bool operator==(const LabelVolume&) const = default;
};

namespace detail {

inline std::string strip_suffix(std::string path, const std::string& suffix) {
  if (path.size() >= suffix.size() &&
      path.compare(path.size() - suffix.size(), suffix.size(), suffix) == 0)
    path.resize(path.size() - suffix.size());
  return path;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file(const std::filesystem::path& p, const void* data, std::size_t n) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + p.string() + " for writing");
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw IoError("short write to " + p.string());
}

}  // namespace detail

// Raw little-endian u16 voxel bytes, independent of host order.
inline std::vector<std::uint8_t> volume_le_bytes(const Volume& v) {
  std::vector<std::uint8_t> bytes(v.data.size() * 2);
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    bytes[2 * i] = static_cast<std::uint8_t>(v.data[i] & 0xff);
    bytes[2 * i + 1] = static_cast<std::uint8_t>(v.data[i] >> 8);
  }
  return bytes;
}

// Writes <base>.raw (little-endian u16, x-fastest) and the <base>.json sidecar.
// Accepts either the base path or the .raw path.
inline void write_volume(const Volume& v, const std::string& path) {
  v.validate();
  const std::string base = detail::strip_suffix(path, ".raw");
  auto bytes = volume_le_bytes(v);
  detail::write_file(base + ".raw", bytes.data(), bytes.size());

  nlohmann::json sidecar = {
      {"dims", {v.dims[0], v.dims[1], v.dims[2]}},
      {"spacing_mm", {v.spacing.dx, v.spacing.dy, v.spacing.dz}},
      {"dtype", "u16"},
      {"endian", "little"},
  };
  const std::string text = sidecar.dump(2) + "\n";
  detail::write_file(base + ".json", text.data(), text.size());
}

inline Volume read_volume(const std::string& path) {
  const std::string base = detail::strip_suffix(path, ".raw");
  nlohmann::json sidecar;
  try {
    sidecar = nlohmann::json::parse(detail::read_file(base + ".json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad volume sidecar " + base + ".json: " + e.what());
  }
  Volume v;
  try {
    auto d = sidecar.at("dims");
    v.dims = {d.at(0).get<std::size_t>(), d.at(1).get<std::size_t>(), d.at(2).get<std::size_t>()};
    auto s = sidecar.at("spacing_mm");
    v.spacing = {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
    if (sidecar.at("dtype").get<std::string>() != "u16")
      throw FormatError("unknown dtype in " + base + ".json");
    if (sidecar.at("endian").get<std::string>() != "little")
      throw FormatError("unknown endianness in " + base + ".json");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad volume sidecar " + base + ".json: " + e.what());
  }

  auto bytes = detail::read_file(base + ".raw");
  const std::size_t n = dims_count(v.dims);
  if (bytes.size() != n * 2)
    throw FormatError("raw payload size " + std::to_string(bytes.size()) +
                      " does not match dims (" + std::to_string(n * 2) + " bytes expected)");
  v.data.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    v.data[i] = static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));
  v.validate();
  return v;
}

// Label slab I/O: raw u8 + sidecar carrying grid geometry, the slab's global
// z offset, the state count, and the run config digest.
inline void write_labels(const LabelVolume& lv, const std::string& path, std::size_t z_offset,
                         unsigned n_states, const std::string& cfg_digest) {
  const std::string base = detail::strip_suffix(path, ".raw");
  detail::write_file(base + ".raw", lv.data.data(), lv.data.size());
  nlohmann::json sidecar = {
      {"dims", {lv.dims[0], lv.dims[1], lv.dims[2]}},
      {"spacing_mm", {lv.spacing.dx, lv.spacing.dy, lv.spacing.dz}},
      {"dtype", "u8"},
      {"z_offset", z_offset},
      {"states", n_states},
      {"cfg_digest", cfg_digest},
  };
  const std::string text = sidecar.dump(2) + "\n";
  detail::write_file(base + ".json", text.data(), text.size());
}

struct LabelFile {
  LabelVolume labels;
  std::size_t z_offset = 0;
  unsigned n_states = 0;
  std::string cfg_digest;
};

inline LabelFile read_labels(const std::string& path) {
  const std::string base = detail::strip_suffix(path, ".raw");
  LabelFile lf;
  try {
    auto sidecar = nlohmann::json::parse(detail::read_file(base + ".json"));
    auto d = sidecar.at("dims");
    lf.labels.dims = {d.at(0).get<std::size_t>(), d.at(1).get<std::size_t>(),
                      d.at(2).get<std::size_t>()};
    auto s = sidecar.at("spacing_mm");
    lf.labels.spacing = {s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()};
    if (sidecar.at("dtype").get<std::string>() != "u8")
      throw FormatError("unknown dtype in " + base + ".json");
    lf.z_offset = sidecar.value("z_offset", std::size_t{0});
    lf.n_states = sidecar.value("states", 0u);
    lf.cfg_digest = sidecar.value("cfg_digest", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad label sidecar " + base + ".json: " + e.what());
  }
  lf.labels.data = detail::read_file(base + ".raw");
  if (lf.labels.data.size() != dims_count(lf.labels.dims))
    throw FormatError("label payload size does not match dims");
  return lf;
}

}  // namespace vseg
