#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace nestseg::nifti {

// Minimal NIfTI-1 (.nii / .nii.gz) reader/writer. Data is exchanged in
// channel-first (C,X,Y,Z) layout with Z fastest, the layout the rest of the
// toolkit uses; the on-disk x-fastest order is converted at the boundary.
struct Image {
  int64_t nx = 0, ny = 0, nz = 0, nc = 1;
  std::array<double, 16> affine{};  // row-major 4x4, voxel index -> world mm
  int src_datatype = 0;             // datatype code as found on disk
  std::vector<double> data;         // size nc*nx*ny*nz
};

// datatype codes
inline constexpr int kUint8 = 2;
inline constexpr int kInt16 = 4;
inline constexpr int kInt32 = 8;
inline constexpr int kFloat32 = 16;
inline constexpr int kFloat64 = 64;
inline constexpr int kInt8 = 256;
inline constexpr int kUint16 = 512;
inline constexpr int kUint32 = 768;

Image read(const std::string& path);

// datatype selects the on-disk representation; values are cast with rounding
// for integer types.
void write(const std::string& path, const Image& img, int datatype);

}  // namespace nestseg::nifti
