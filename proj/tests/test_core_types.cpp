#include "doctest.h"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>

#include "nestseg/core_types.hpp"
#include "nestseg/nifti.hpp"

using namespace nestseg;
namespace fs = std::filesystem;

namespace {

fs::path tmpdir() {
  auto d = fs::temp_directory_path() / "nestseg_core_types";
  fs::create_directories(d);
  return d;
}

Volume phantom_volume(int64_t n = 8) {
  Volume v;
  v.nx = v.ny = v.nz = n;
  v.nc = 1;
  v.data.resize(n * n * n);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> d(0, 1);
  for (auto& x : v.data) x = d(rng);
  return v;
}

}  // namespace

TEST_CASE("volume save/load round-trip is exact") {
  auto v = phantom_volume();
  auto p = (tmpdir() / "vol.nii.gz").string();
  save_volume(v, p);
  Volume r = load_volume(p);
  REQUIRE(r.nx == v.nx);
  REQUIRE(r.data.size() == v.data.size());
  for (size_t i = 0; i < v.data.size(); ++i) CHECK(r.data[i] == v.data[i]);
  CHECK(r.affine == v.affine);
}

TEST_CASE("plain .nii round-trips too") {
  auto v = phantom_volume(5);
  auto p = (tmpdir() / "vol.nii").string();
  save_volume(v, p);
  Volume r = load_volume(p);
  for (size_t i = 0; i < v.data.size(); ++i) CHECK(r.data[i] == v.data[i]);
}

TEST_CASE("1mm MNI-sized header yields unit affine column norms") {
  Volume v;
  v.nx = 172; v.ny = 220; v.nz = 156;
  v.affine = MniGrid::affine();
  v.data.assign(v.voxels(), 0.5f);
  auto p = (tmpdir() / "mni.nii.gz").string();
  save_volume(v, p);
  Volume r = load_volume(p);
  for (int j = 0; j < 3; ++j) CHECK(r.affine.col_norm(j) == doctest::Approx(1.0));
  CHECK(r.nx == 172);
  CHECK(r.ny == 220);
  CHECK(r.nz == 156);
}

TEST_CASE("NaN voxels are rejected at load") {
  nifti::Image img;
  img.nx = img.ny = img.nz = 3;
  img.data.assign(27, 1.0);
  img.data[13] = std::nan("");
  img.affine = Affine::identity().m;
  auto p = (tmpdir() / "nan.nii.gz").string();
  nifti::write(p, img, nifti::kFloat32);
  CHECK_THROWS(load_volume(p));
}

TEST_CASE("missing file and malformed header are rejected") {
  CHECK_THROWS(load_volume((tmpdir() / "nope.nii.gz").string()));
  auto p = (tmpdir() / "garbage.nii").string();
  { std::ofstream f(p); f << "this is not a nifti file, not even close......."; }
  CHECK_THROWS(load_volume(p));
}

TEST_CASE("label map round-trip is exact and bad ids are rejected") {
  LabelMap m;
  m.nx = m.ny = m.nz = 6;
  m.protocol = LabelProtocol::braincolor();
  m.data.assign(m.voxels(), 0);
  m.data[7] = 5;
  m.data[100] = 132;
  auto p = (tmpdir() / "lab.nii.gz").string();
  save_label_map(m, p);
  LabelMap r = load_label_map(p, m.protocol);
  for (int64_t i = 0; i < m.voxels(); ++i) CHECK(r.data[i] == m.data[i]);

  m.data[3] = 133;  // outside protocol
  CHECK_THROWS(save_label_map(m, p));
}

TEST_CASE("label map on the MNI grid stores the right dims") {
  LabelMap m;
  m.nx = 172; m.ny = 220; m.nz = 156;
  m.affine = MniGrid::affine();
  m.protocol = LabelProtocol::braincolor();
  m.data.assign(m.voxels(), 1);
  auto p = (tmpdir() / "labmni.nii.gz").string();
  save_label_map(m, p);
  nifti::Image img = nifti::read(p);
  CHECK(img.nx == 172);
  CHECK(img.ny == 220);
  CHECK(img.nz == 156);
}

TEST_CASE("load reorients flipped/permuted volumes to canonical axes") {
  // a volume written with a -x, swapped y/z affine comes back RAS-like
  nifti::Image img;
  img.nx = 4; img.ny = 3; img.nz = 2;
  img.data.resize(24);
  for (size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<double>(i);
  // columns: world x reads voxel axis 0 negated; world y reads axis 2; world z reads axis 1
  std::array<double, 16> a{};
  a[0 * 4 + 0] = -1;
  a[1 * 4 + 2] = 1;
  a[2 * 4 + 1] = 1;
  a[15] = 1;
  a[3] = 3;  // offset so flipped coordinates stay consistent
  img.affine = a;
  auto p = (tmpdir() / "flip.nii.gz").string();
  nifti::write(p, img, nifti::kFloat64);
  Volume v = load_volume(p);
  // after reorientation the linear part must be positive diagonal
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      if (i == j) CHECK(v.affine.m[i * 4 + j] > 0);
      else CHECK(v.affine.m[i * 4 + j] == doctest::Approx(0.0));
    }
  // voxel at index (x,y,z) must map to the same world intensity as before
  // spot check: original voxel (0,0,0) sits at world (3,0,0)
  auto inv = v.affine.inverse();
  auto idx = inv.apply(3, 0, 0);
  CHECK(v.at(0, std::llround(idx[0]), std::llround(idx[1]), std::llround(idx[2])) ==
        doctest::Approx(0.0));
}

TEST_CASE("one_hot basics") {
  LabelMap m;
  m.nx = m.ny = m.nz = 2;
  m.protocol = LabelProtocol::braincolor();
  m.data.assign(8, 0);

  SUBCASE("all background") {
    Tensor t = one_hot(m, 133);
    for (int64_t i = 0; i < 8; ++i) CHECK(t[i] == 1.0);
    for (int64_t i = 8; i < t.numel(); ++i) CHECK(t[i] == 0.0);
  }
  SUBCASE("single voxel labeled 5") {
    m.data[3] = 5;
    Tensor t = one_hot(m, 133);
    double sum5 = 0;
    for (int64_t i = 0; i < 8; ++i) sum5 += t[5 * 8 + i];
    CHECK(sum5 == 1.0);
    CHECK(t[5 * 8 + 3] == 1.0);
  }
  SUBCASE("id out of range") {
    m.data[0] = 7;
    CHECK_THROWS(one_hot(m, 4));
  }
}

TEST_CASE("one_hot matches brute-force comparison and argmax inverts it") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> d(0, 2);
  LabelMap m;
  m.nx = m.ny = m.nz = 4;
  m.protocol = LabelProtocol::braincolor();
  m.data.resize(64);
  for (auto& v : m.data) v = static_cast<uint16_t>(d(rng));
  Tensor t = one_hot(m, 3);
  // brute force per-voxel
  for (int c = 0; c < 3; ++c)
    for (int64_t i = 0; i < 64; ++i)
      CHECK(t[c * 64 + i] == (m.data[i] == c ? 1.0 : 0.0));
  // channel-wise sum is one everywhere; argmax reproduces the map
  for (int64_t i = 0; i < 64; ++i) {
    double s = 0;
    int arg = 0;
    for (int c = 0; c < 3; ++c) {
      s += t[c * 64 + i];
      if (t[c * 64 + i] > t[arg * 64 + i]) arg = c;
    }
    CHECK(s == 1.0);
    CHECK(arg == m.data[i]);
  }
}

TEST_CASE("label protocol validates structure") {
  CHECK_NOTHROW(LabelProtocol::braincolor());
  std::vector<std::pair<int, std::string>> dup;
  for (int i = 0; i < 133; ++i) dup.emplace_back(i == 5 ? 4 : i, "x");
  CHECK_THROWS(LabelProtocol(dup));
  std::vector<std::pair<int, std::string>> few;
  for (int i = 0; i < 100; ++i) few.emplace_back(i, "x");
  CHECK_THROWS(LabelProtocol(few));
}

TEST_CASE("protocol JSON round-trip") {
  auto p = (tmpdir() / "protocol.json").string();
  LabelProtocol::braincolor()->save_json(p);
  auto r = LabelProtocol::load_json(p);
  CHECK(r->num_classes() == 133);
  CHECK(r->name(0) == "background");
}

TEST_CASE("volume invariant checks") {
  Volume v = phantom_volume(4);
  CHECK_NOTHROW(v.validate());
  v.affine.m[0] = v.affine.m[1] = v.affine.m[2] = 0;  // singular
  CHECK_THROWS(v.validate());
}
