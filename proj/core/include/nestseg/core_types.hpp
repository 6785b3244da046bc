#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "nestseg/tensor.hpp"

namespace nestseg {

// Row-major 4x4 voxel-index -> world-mm matrix.
struct Affine {
  std::array<double, 16> m{};

  static Affine identity();
  static Affine from_array(const std::array<double, 16>& a) { return Affine{a}; }

  double det3() const;  // determinant of the 3x3 linear part
  bool invertible(double tol = 1e-12) const;
  Affine inverse() const;
  Affine mul(const Affine& o) const;  // this * o
  std::array<double, 3> apply(double x, double y, double z) const;
  double col_norm(int j) const;
  bool operator==(const Affine& o) const { return m == o.m; }
};

// 133-entry label table: id 0 = background, 1..132 = brain regions. TICV and
// PFV are separate binary structures, not ids in this range.
class LabelProtocol {
 public:
  explicit LabelProtocol(std::vector<std::pair<int, std::string>> entries);

  static constexpr int kNumClasses = 133;
  static std::shared_ptr<const LabelProtocol> braincolor();
  static std::shared_ptr<const LabelProtocol> load_json(const std::string& path);
  void save_json(const std::string& path) const;

  int num_classes() const { return kNumClasses; }
  const std::string& name(int id) const { return entries_.at(id).second; }
  bool contains(int id) const { return id >= 0 && id < kNumClasses; }

 private:
  std::vector<std::pair<int, std::string>> entries_;
};

struct MniGrid {
  static constexpr std::array<int64_t, 3> kShape = {172, 220, 156};
  static constexpr double kSpacingMm = 1.0;
  static constexpr const char* kTemplateId = "MNI305";
  // 1 mm isotropic, world origin at the grid center
  static Affine affine();
};

// Floating-point intensity grid, channel-first (C,X,Y,Z), Z fastest.
struct Volume {
  std::vector<float> data;
  int64_t nc = 1, nx = 0, ny = 0, nz = 0;
  Affine affine = Affine::identity();
  std::string source_path;
  bool skull_stripped = false;

  int64_t voxels() const { return nx * ny * nz; }
  float& at(int64_t c, int64_t x, int64_t y, int64_t z) {
    return data[((c * nx + x) * ny + y) * nz + z];
  }
  float at(int64_t c, int64_t x, int64_t y, int64_t z) const {
    return data[((c * nx + x) * ny + y) * nz + z];
  }
  void validate() const;  // finite values, invertible affine, positive dims
};

enum class IcvStructure { kTicv, kPfv };

struct BinaryMask {
  std::vector<uint8_t> data;  // values in {0,1}
  int64_t nx = 0, ny = 0, nz = 0;
  Affine affine = Affine::identity();
  IcvStructure structure = IcvStructure::kTicv;

  int64_t voxels() const { return nx * ny * nz; }
  uint8_t at(int64_t x, int64_t y, int64_t z) const {
    return data[(x * ny + y) * nz + z];
  }
  void validate() const;
};

struct LabelMap {
  std::vector<uint16_t> data;
  int64_t nx = 0, ny = 0, nz = 0;
  Affine affine = Affine::identity();
  std::shared_ptr<const LabelProtocol> protocol;

  int64_t voxels() const { return nx * ny * nz; }
  uint16_t at(int64_t x, int64_t y, int64_t z) const {
    return data[(x * ny + y) * nz + z];
  }
  void validate() const;  // every voxel id within the protocol
};

// NIfTI ingestion. Casts to float, reads the header affine, reorients to a
// canonical RAS-like axis order, and rejects non-finite voxels.
Volume load_volume(const std::string& path);
void save_volume(const Volume& v, const std::string& path);

LabelMap load_label_map(const std::string& path,
                        std::shared_ptr<const LabelProtocol> protocol);
void save_label_map(const LabelMap& map, const std::string& path);

BinaryMask load_mask(const std::string& path, IcvStructure structure);
void save_mask(const BinaryMask& mask, const std::string& path);

// [num_classes, X, Y, Z]; channel c is 1 exactly where map==c.
Tensor one_hot(const LabelMap& map, int num_classes);
Tensor one_hot(const uint16_t* labels, int64_t n, int num_classes);

}  // namespace nestseg
