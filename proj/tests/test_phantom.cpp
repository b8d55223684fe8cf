#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "vseg/phantom.hpp"
#include "vseg/volume.hpp"

using namespace vseg;
using namespace vseg::phantom;

namespace {

std::size_t count_foreground(const Volume& v, double midpoint) {
  std::size_t n = 0;
  for (auto x : v.data)
    if (x > midpoint) ++n;
  return n;
}

double sphere_volume_mm3(double d) { return M_PI / 6.0 * d * d * d; }

std::string temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "vseg_phantom_test";
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace

TEST_CASE("zero-sphere spec yields a uniform volume") {
  PhantomSpec spec;
  spec.dims = {16, 16, 8};
  spec.spacing = {1, 1, 1};
  spec.background_intensity = 10000;
  spec.noise_sigma = 0;
  auto [vol, truth] = generate_phantom(spec);
  REQUIRE(truth.empty());
  for (auto v : vol.data) REQUIRE(v == 10000);
}

TEST_CASE("10 mm sphere rasterizes to the analytic volume within 5%") {
  PhantomSpec spec;
  spec.dims = {25, 25, 25};
  spec.spacing = {1, 1, 1};
  spec.background_intensity = 10000;
  // centered on a voxel center; corner-aligned placements sit at the worst
  // point of the lattice-count fluctuation for d/spacing = 10
  spec.spheres = {SphereSpec{{12.5, 12.5, 12.5}, 10.0, 40000, 0}};
  auto [vol, truth] = generate_phantom(spec);
  const double expected = sphere_volume_mm3(10.0);  // approx. 523.6 voxels at 1 mm
  const auto count = static_cast<double>(count_foreground(vol, 25000));
  REQUIRE(count > 0.95 * expected);
  REQUIRE(count < 1.05 * expected);
}

TEST_CASE("generation is deterministic per seed") {
  PhantomSpec spec;
  spec.dims = {20, 20, 10};
  spec.spacing = {1, 1, 1};
  spec.spheres = {SphereSpec{{10, 10, 5}, 6.0, 40000, 0}};
  spec.noise_sigma = 500;
  spec.rng_seed = 1234;
  auto [a, ta] = generate_phantom(spec);
  auto [b, tb] = generate_phantom(spec);
  REQUIRE(a.data == b.data);

  spec.rng_seed = 1235;
  auto [c, tc] = generate_phantom(spec);
  REQUIRE(a.data != c.data);
}

TEST_CASE("geometry violations are rejected") {
  PhantomSpec spec;
  spec.dims = {20, 20, 20};
  spec.spacing = {1, 1, 1};

  SECTION("sphere out of bounds") {
    spec.spheres = {SphereSpec{{2, 10, 10}, 10.0, 40000, 0}};
    REQUIRE_THROWS_AS(generate_phantom(spec), GeometryError);
  }
  SECTION("overlapping spheres") {
    spec.spheres = {SphereSpec{{8, 10, 10}, 8.0, 40000, 0},
                    SphereSpec{{13, 10, 10}, 8.0, 40000, 0}};
    REQUIRE_THROWS_AS(generate_phantom(spec), GeometryError);
  }
}

TEST_CASE("nema spec has the six standard sphere diameters") {
  auto spec = nema_spec(1.0, 0.0, 7);
  REQUIRE(spec.spheres.size() == 6);
  std::vector<double> diameters;
  for (const auto& s : spec.spheres) diameters.push_back(s.diameter_mm);
  std::sort(diameters.begin(), diameters.end());
  REQUIRE(diameters == std::vector<double>{10, 13, 17, 22, 28, 37});
}

TEST_CASE("nema spheres never overlap and keep 4:1 contrast") {
  for (auto seed : {0ull, 9ull, 77ull}) {
    auto spec = nema_spec(1.0, 0.0, seed);
    for (std::size_t i = 0; i < spec.spheres.size(); ++i)
      for (std::size_t j = i + 1; j < spec.spheres.size(); ++j) {
        const auto& a = spec.spheres[i];
        const auto& b = spec.spheres[j];
        double d2 = 0;
        for (int c = 0; c < 3; ++c) {
          const double d = a.center_mm[c] - b.center_mm[c];
          d2 += d * d;
        }
        REQUIRE(std::sqrt(d2) > (a.diameter_mm + b.diameter_mm) / 2.0);
      }
    for (const auto& s : spec.spheres)
      REQUIRE(s.intensity / spec.background_intensity >= 4.0);
  }
}

TEST_CASE("coarse spacing cannot resolve the 10 mm sphere") {
  REQUIRE_THROWS_AS(nema_spec(4.0, 0.0, 0), ResolutionError);
}

TEST_CASE("2.5 mm spacing yields the 64x64x32 grid") {
  auto spec = nema_spec(2.5, 0.0, 0);
  REQUIRE(spec.dims == Dims{64, 64, 32});
}

TEST_CASE("cirs spec has ten lesions in four groups") {
  auto spec = cirs_spec(1.0, 0.0, 3);
  REQUIRE(spec.spheres.size() == 10);
  std::map<int, int> group_sizes;
  for (const auto& s : spec.spheres) group_sizes[s.group_id]++;
  REQUIRE(group_sizes == std::map<int, int>{{1, 1}, {2, 3}, {3, 4}, {4, 2}});

  auto again = cirs_spec(1.0, 0.0, 3);
  REQUIRE(again.spheres.size() == spec.spheres.size());
  for (std::size_t i = 0; i < spec.spheres.size(); ++i) {
    REQUIRE(again.spheres[i].center_mm == spec.spheres[i].center_mm);
    REQUIRE(again.spheres[i].diameter_mm == spec.spheres[i].diameter_mm);
  }
}

TEST_CASE("cirs lesion table is overridable") {
  CirsLesionTable table;
  table.grp4_mm = 8.0;
  auto spec = cirs_spec(1.0, 0.0, 0, table);
  int n8 = 0;
  for (const auto& s : spec.spheres)
    if (s.group_id == 4) {
      REQUIRE(s.diameter_mm == 8.0);
      ++n8;
    }
  REQUIRE(n8 == 2);
}

TEST_CASE("rasterization conserves total sphere volume on the nema phantom") {
  auto spec = nema_spec(1.0, 0.0, 0);
  auto [vol, truth] = generate_phantom(spec);
  double expected = 0;
  for (const auto& s : truth) expected += sphere_volume_mm3(s.diameter_mm);
  const double voxel = spec.spacing.voxel_volume_mm3();
  const double measured = count_foreground(vol, 25000) * voxel;
  REQUIRE(measured > 0.95 * expected);
  REQUIRE(measured < 1.05 * expected);
}

TEST_CASE("background noise statistics match the requested sigma") {
  PhantomSpec spec;
  spec.dims = {64, 64, 32};  // 131072 voxels, all background
  spec.spacing = {1, 1, 1};
  spec.background_intensity = 10000;
  spec.noise_sigma = 300;
  spec.rng_seed = 99;
  auto [vol, truth] = generate_phantom(spec);
  double mean = 0;
  for (auto v : vol.data) mean += v;
  mean /= vol.data.size();
  double var = 0;
  for (auto v : vol.data) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / (vol.data.size() - 1));
  REQUIRE(sd > 0.9 * 300);
  REQUIRE(sd < 1.1 * 300);
}

TEST_CASE("volume round-trips through raw + sidecar") {
  PhantomSpec spec;
  spec.dims = {9, 7, 5};
  spec.spacing = {0.7, 1.1, 2.0};
  spec.noise_sigma = 2000;
  spec.rng_seed = 5;
  auto [vol, truth] = generate_phantom(spec);

  const std::string base = temp_dir() + "/roundtrip";
  write_volume(vol, base);
  const Volume back = read_volume(base);
  REQUIRE(back == vol);

  // also accepts the .raw path directly
  const Volume back2 = read_volume(base + ".raw");
  REQUIRE(back2 == vol);
}

TEST_CASE("truncated raw payload is a format error") {
  PhantomSpec spec;
  spec.dims = {4, 4, 4};
  spec.spacing = {1, 1, 1};
  auto [vol, truth] = generate_phantom(spec);
  const std::string base = temp_dir() + "/truncated";
  write_volume(vol, base);
  std::filesystem::resize_file(base + ".raw", 10);
  REQUIRE_THROWS_AS(read_volume(base), FormatError);
}

TEST_CASE("a 2x2x2 header with a 16-byte payload is a valid volume") {
  const std::string base = temp_dir() + "/tiny";
  {
    std::ofstream raw(base + ".raw", std::ios::binary);
    for (int i = 0; i < 16; ++i) raw.put(static_cast<char>(i));
    std::ofstream sidecar(base + ".json");
    sidecar << R"({"dims":[2,2,2],"spacing_mm":[1,1,1],"dtype":"u16","endian":"little"})";
  }
  const Volume v = read_volume(base);
  REQUIRE(v.dims == Dims{2, 2, 2});
  REQUIRE(v.data.size() == 8);
  REQUIRE(v.data[0] == 0x0100);  // bytes 0x00 0x01 little-endian
}

TEST_CASE("unknown dtype is a format error") {
  const std::string base = temp_dir() + "/baddtype";
  {
    std::ofstream raw(base + ".raw", std::ios::binary);
    raw.put(0);
    raw.put(0);
    std::ofstream sidecar(base + ".json");
    sidecar << R"({"dims":[1,1,1],"spacing_mm":[1,1,1],"dtype":"f32","endian":"little"})";
  }
  REQUIRE_THROWS_AS(read_volume(base), FormatError);
}

TEST_CASE("ground truth round-trips through JSON") {
  auto spec = cirs_spec(1.0, 0.0, 0);
  const std::string path = temp_dir() + "/truth.json";
  write_truth(spec.spheres, path);
  const auto back = read_truth(path);
  REQUIRE(back.size() == spec.spheres.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    REQUIRE(back[i].center_mm == spec.spheres[i].center_mm);
    REQUIRE(back[i].diameter_mm == spec.spheres[i].diameter_mm);
    REQUIRE(back[i].group_id == spec.spheres[i].group_id);
  }
}
