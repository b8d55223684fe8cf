#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vseg/errors.hpp"
#include "vseg/volume.hpp"

namespace vseg::phantom {

struct SphereSpec {
  std::array<double, 3> center_mm{0, 0, 0};
  double diameter_mm = 0.0;
  double intensity = 0.0;
  int group_id = 0;

  double radius_mm() const { return diameter_mm / 2.0; }
};

struct PhantomSpec {
  Dims dims{0, 0, 0};
  VoxelSpacing spacing;
  double background_intensity = 10000.0;
  std::vector<SphereSpec> spheres;
  double noise_sigma = 0.0;
  std::uint64_t rng_seed = 0;

  void validate() const {
    spacing.validate();
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
      throw ArgumentError("phantom dims must each be >= 1");
    if (noise_sigma < 0.0) throw ArgumentError("noise_sigma must be >= 0");
    const double sx = dims[0] * spacing.dx;
    const double sy = dims[1] * spacing.dy;
    const double sz = dims[2] * spacing.dz;
    for (const auto& s : spheres) {
      if (!(s.diameter_mm > 0.0)) throw GeometryError("sphere diameter must be > 0");
      const double r = s.radius_mm();
      if (s.center_mm[0] - r < 0 || s.center_mm[0] + r > sx ||
          s.center_mm[1] - r < 0 || s.center_mm[1] + r > sy ||
          s.center_mm[2] - r < 0 || s.center_mm[2] + r > sz)
        throw GeometryError("sphere extends outside the volume bounds");
    }
    for (std::size_t i = 0; i < spheres.size(); ++i)
      for (std::size_t j = i + 1; j < spheres.size(); ++j) {
        const auto& a = spheres[i];
        const auto& b = spheres[j];
        const double dx = a.center_mm[0] - b.center_mm[0];
        const double dy = a.center_mm[1] - b.center_mm[1];
        const double dz = a.center_mm[2] - b.center_mm[2];
        const double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
        if (!(dist > (a.diameter_mm + b.diameter_mm) / 2.0))
          throw GeometryError("spheres overlap");
      }
  }
};

// Default intensities: high-contrast lesions against a mid-grey background.
inline constexpr double kBackgroundIntensity = 10000.0;
inline constexpr double kLesionIntensity = 40000.0;

namespace detail {

inline double clamp_u16(double v) { return std::clamp(v, 0.0, 65535.0); }

// Fraction of the voxel covered by the sphere, estimated on the 2x2x2
// octant subgrid plus the voxel center. The center sample keeps the
// midpoint-crossing surface on the true sphere surface, so the >midpoint
// voxel count stays an unbiased estimate of the sphere volume.
inline double coverage_fraction(double cx, double cy, double cz, double r2,
                                double px, double py, double pz,
                                const VoxelSpacing& sp) {
  int inside = 0;
  for (int a = -1; a <= 1; a += 2)
    for (int b = -1; b <= 1; b += 2)
      for (int c = -1; c <= 1; c += 2) {
        const double x = px + a * sp.dx / 4.0 - cx;
        const double y = py + b * sp.dy / 4.0 - cy;
        const double z = pz + c * sp.dz / 4.0 - cz;
        if (x * x + y * y + z * z <= r2) ++inside;
      }
  const double dx = px - cx, dy = py - cy, dz = pz - cz;
  if (dx * dx + dy * dy + dz * dz <= r2) ++inside;
  return inside / 9.0;
}

}  // namespace detail

// Rasterizes the spec into a u16 volume. Interior voxels take the sphere
// intensity, boundary voxels a 2x2x2-subsampled mix, then i.i.d. Gaussian
// noise (clamped to the u16 range) is added. Deterministic per rng_seed.
inline std::pair<Volume, std::vector<SphereSpec>> generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  Volume vol(spec.dims, spec.spacing,
             static_cast<std::uint16_t>(std::lround(detail::clamp_u16(spec.background_intensity))));
  const auto& sp = spec.spacing;
  const double half_diag =
      0.5 * std::sqrt(sp.dx * sp.dx + sp.dy * sp.dy + sp.dz * sp.dz);

  for (const auto& s : spec.spheres) {
    const double r = s.radius_mm();
    const double r2 = r * r;
    const auto lo_voxel = [&](double c, double pitch) {
      return static_cast<std::size_t>(std::max(0.0, std::floor((c - r) / pitch) - 1.0));
    };
    const auto hi_voxel = [&](double c, double pitch, std::size_t n) {
      return std::min(n, static_cast<std::size_t>(std::max(0.0, std::ceil((c + r) / pitch) + 1.0)));
    };
    const std::size_t x0 = lo_voxel(s.center_mm[0], sp.dx), x1 = hi_voxel(s.center_mm[0], sp.dx, spec.dims[0]);
    const std::size_t y0 = lo_voxel(s.center_mm[1], sp.dy), y1 = hi_voxel(s.center_mm[1], sp.dy, spec.dims[1]);
    const std::size_t z0 = lo_voxel(s.center_mm[2], sp.dz), z1 = hi_voxel(s.center_mm[2], sp.dz, spec.dims[2]);

    for (std::size_t z = z0; z < z1; ++z) {
      const double pz = (z + 0.5) * sp.dz;
      for (std::size_t y = y0; y < y1; ++y) {
        const double py = (y + 0.5) * sp.dy;
        for (std::size_t x = x0; x < x1; ++x) {
          const double px = (x + 0.5) * sp.dx;
          const double ddx = px - s.center_mm[0];
          const double ddy = py - s.center_mm[1];
          const double ddz = pz - s.center_mm[2];
          const double dist = std::sqrt(ddx * ddx + ddy * ddy + ddz * ddz);
          if (dist >= r + half_diag) continue;
          double value;
          if (dist <= r - half_diag) {
            // interior: full sphere intensity
            value = s.intensity;
          } else {
            // boundary shell: partial-volume mixing on both sides of the
            // surface; voxels whose centers lie inside stay above the
            // midpoint, so counting rules see them as lesion
            const double frac = detail::coverage_fraction(
                s.center_mm[0], s.center_mm[1], s.center_mm[2], r2, px, py, pz, sp);
            if (frac == 0.0) continue;
            value = spec.background_intensity + frac * (s.intensity - spec.background_intensity);
          }
          vol.at(x, y, z) = static_cast<std::uint16_t>(std::lround(detail::clamp_u16(value)));
        }
      }
    }
  }

  if (spec.noise_sigma > 0.0) {
    std::mt19937_64 rng(spec.rng_seed);
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    for (auto& v : vol.data)
      v = static_cast<std::uint16_t>(std::lround(detail::clamp_u16(v + noise(rng))));
  }
  return {std::move(vol), spec.spheres};
}

namespace detail {

// Smallest sphere must span at least 3 voxels along every axis.
inline void check_resolution(double min_diameter_mm, const VoxelSpacing& sp) {
  const double coarsest = std::max({sp.dx, sp.dy, sp.dz});
  if (min_diameter_mm / coarsest < 3.0)
    throw ResolutionError("spacing too coarse: a " + std::to_string(min_diameter_mm) +
                          " mm sphere spans fewer than 3 voxels");
}

inline Dims dims_for(double sx, double sy, double sz, double spacing) {
  return {static_cast<std::size_t>(std::llround(sx / spacing)),
          static_cast<std::size_t>(std::llround(sy / spacing)),
          static_cast<std::size_t>(std::llround(sz / spacing))};
}

}  // namespace detail

// Six-sphere body phantom: diameters 10..37 mm on a ring in the axial
// mid-plane of a 160x160x80 mm volume. spacing 2.5 mm yields 64x64x32 voxels.
inline PhantomSpec nema_spec(double spacing_mm, double noise_sigma, std::uint64_t seed) {
  if (!(spacing_mm > 0.0)) throw ArgumentError("spacing must be > 0");
  static constexpr double kDiameters[6] = {37.0, 28.0, 22.0, 17.0, 13.0, 10.0};
  detail::check_resolution(10.0, {spacing_mm, spacing_mm, spacing_mm});

  PhantomSpec spec;
  spec.spacing = {spacing_mm, spacing_mm, spacing_mm};
  spec.dims = detail::dims_for(160.0, 160.0, 80.0, spacing_mm);
  spec.background_intensity = kBackgroundIntensity;
  spec.noise_sigma = noise_sigma;
  spec.rng_seed = seed;

  const double ring_radius = 45.0;
  const double cx = spec.dims[0] * spacing_mm / 2.0;
  const double cy = spec.dims[1] * spacing_mm / 2.0;
  const double cz = spec.dims[2] * spacing_mm / 2.0;
  // 45 degree ring offset keeps sphere centers off the grid axes, away from
  // the worst lattice-alignment resonance of the rasterized counts
  for (int i = 0; i < 6; ++i) {
    const double angle = M_PI / 4.0 + i * (2.0 * M_PI / 6.0);
    SphereSpec s;
    s.center_mm = {cx + ring_radius * std::cos(angle), cy + ring_radius * std::sin(angle), cz};
    s.diameter_mm = kDiameters[i];
    s.intensity = kLesionIntensity;
    s.group_id = 0;
    spec.spheres.push_back(s);
  }
  spec.validate();
  return spec;
}

// Lesion diameter defaults per group. Not a measured ground truth; group 4
// holds the smallest lesions, which measure with the largest relative error.
struct CirsLesionTable {
  double grp1_mm = 20.0;
  double grp2_mm = 15.0;
  double grp3_mm = 10.0;
  double grp4_mm = 6.0;
};

inline CirsLesionTable cirs_table_from_json(const nlohmann::json& j) {
  CirsLesionTable t;
  t.grp1_mm = j.value("grp1_mm", t.grp1_mm);
  t.grp2_mm = j.value("grp2_mm", t.grp2_mm);
  t.grp3_mm = j.value("grp3_mm", t.grp3_mm);
  t.grp4_mm = j.value("grp4_mm", t.grp4_mm);
  return t;
}

// Ten-lesion abdominal phantom: 4 groups of sizes 1, 3, 4, 2 spread over two
// axial planes of the same 160x160x80 mm volume.
inline PhantomSpec cirs_spec(double spacing_mm, double noise_sigma, std::uint64_t seed,
                             const CirsLesionTable& table = {}) {
  if (!(spacing_mm > 0.0)) throw ArgumentError("spacing must be > 0");
  const double min_d = std::min({table.grp1_mm, table.grp2_mm, table.grp3_mm, table.grp4_mm});
  detail::check_resolution(min_d, {spacing_mm, spacing_mm, spacing_mm});

  PhantomSpec spec;
  spec.spacing = {spacing_mm, spacing_mm, spacing_mm};
  spec.dims = detail::dims_for(160.0, 160.0, 80.0, spacing_mm);
  spec.background_intensity = kBackgroundIntensity;
  spec.noise_sigma = noise_sigma;
  spec.rng_seed = seed;

  const auto add = [&](double x, double y, double z, double d, int group) {
    spec.spheres.push_back(SphereSpec{{x, y, z}, d, kLesionIntensity, group});
  };
  add(50, 50, 30, table.grp1_mm, 1);
  add(110, 50, 30, table.grp2_mm, 2);
  add(50, 110, 30, table.grp2_mm, 2);
  add(110, 110, 30, table.grp2_mm, 2);
  add(40, 80, 52, table.grp3_mm, 3);
  add(80, 40, 52, table.grp3_mm, 3);
  add(120, 80, 52, table.grp3_mm, 3);
  add(80, 120, 52, table.grp3_mm, 3);
  add(65, 65, 52, table.grp4_mm, 4);
  add(95, 95, 52, table.grp4_mm, 4);
  spec.validate();
  return spec;
}

inline void write_truth(const std::vector<SphereSpec>& spheres, const std::string& path) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : spheres)
    arr.push_back({{"center_mm", {s.center_mm[0], s.center_mm[1], s.center_mm[2]}},
                   {"diameter_mm", s.diameter_mm},
                   {"intensity", s.intensity},
                   {"group_id", s.group_id}});
  nlohmann::json j = {{"spheres", arr}};
  const std::string text = j.dump(2) + "\n";
  vseg::detail::write_file(path, text.data(), text.size());
}

inline std::vector<SphereSpec> read_truth(const std::string& path) {
  std::vector<SphereSpec> out;
  try {
    auto j = nlohmann::json::parse(vseg::detail::read_file(path));
    for (const auto& e : j.at("spheres")) {
      SphereSpec s;
      auto c = e.at("center_mm");
      s.center_mm = {c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>()};
      s.diameter_mm = e.at("diameter_mm").get<double>();
      s.intensity = e.value("intensity", kLesionIntensity);
      s.group_id = e.value("group_id", 0);
      out.push_back(s);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad truth file ") + path + ": " + e.what());
  }
  return out;
}

}  // namespace vseg::phantom
