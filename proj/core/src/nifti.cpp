#include "nestseg/nifti.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <stdexcept>

namespace nestseg::nifti {

namespace {

#pragma pack(push, 1)
struct Nifti1Header {
  int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  int32_t extents;
  int16_t session_error;
  char regular;
  char dim_info;
  int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  int16_t intent_code;
  int16_t datatype;
  int16_t bitpix;
  int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  int16_t qform_code;
  int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)

static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

struct GzFile {
  gzFile f = nullptr;
  explicit GzFile(const std::string& path, const char* mode) {
    f = gzopen(path.c_str(), mode);
    if (!f) throw std::runtime_error("cannot open " + path);
  }
  ~GzFile() {
    if (f) gzclose(f);
  }
  void read(void* buf, size_t n) {
    if (gzread(f, buf, static_cast<unsigned>(n)) != static_cast<int>(n))
      throw std::runtime_error("truncated NIfTI file");
  }
  void write(const void* buf, size_t n) {
    if (gzwrite(f, buf, static_cast<unsigned>(n)) != static_cast<int>(n))
      throw std::runtime_error("NIfTI write failed");
  }
};

int bytes_per_voxel(int dt) {
  switch (dt) {
    case kUint8: case kInt8: return 1;
    case kInt16: case kUint16: return 2;
    case kInt32: case kUint32: case kFloat32: return 4;
    case kFloat64: return 8;
    default: throw std::runtime_error("unsupported NIfTI datatype " + std::to_string(dt));
  }
}

double decode_voxel(const uint8_t* p, int dt) {
  switch (dt) {
    case kUint8: return *p;
    case kInt8: return *reinterpret_cast<const int8_t*>(p);
    case kInt16: { int16_t v; std::memcpy(&v, p, 2); return v; }
    case kUint16: { uint16_t v; std::memcpy(&v, p, 2); return v; }
    case kInt32: { int32_t v; std::memcpy(&v, p, 4); return v; }
    case kUint32: { uint32_t v; std::memcpy(&v, p, 4); return v; }
    case kFloat32: { float v; std::memcpy(&v, p, 4); return v; }
    case kFloat64: { double v; std::memcpy(&v, p, 8); return v; }
    default: throw std::runtime_error("unsupported datatype");
  }
}

void encode_voxel(uint8_t* p, int dt, double v) {
  switch (dt) {
    case kUint8: { uint8_t x = static_cast<uint8_t>(std::lround(v)); std::memcpy(p, &x, 1); break; }
    case kInt8: { int8_t x = static_cast<int8_t>(std::lround(v)); std::memcpy(p, &x, 1); break; }
    case kInt16: { int16_t x = static_cast<int16_t>(std::lround(v)); std::memcpy(p, &x, 2); break; }
    case kUint16: { uint16_t x = static_cast<uint16_t>(std::lround(v)); std::memcpy(p, &x, 2); break; }
    case kInt32: { int32_t x = static_cast<int32_t>(std::lround(v)); std::memcpy(p, &x, 4); break; }
    case kUint32: { uint32_t x = static_cast<uint32_t>(std::lround(v)); std::memcpy(p, &x, 4); break; }
    case kFloat32: { float x = static_cast<float>(v); std::memcpy(p, &x, 4); break; }
    case kFloat64: { std::memcpy(p, &v, 8); break; }
    default: throw std::runtime_error("unsupported datatype");
  }
}

std::array<double, 16> affine_from_header(const Nifti1Header& h) {
  std::array<double, 16> a{};
  a[15] = 1.0;
  if (h.sform_code > 0) {
    for (int j = 0; j < 4; ++j) {
      a[0 * 4 + j] = h.srow_x[j];
      a[1 * 4 + j] = h.srow_y[j];
      a[2 * 4 + j] = h.srow_z[j];
    }
    return a;
  }
  if (h.qform_code > 0) {
    double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
    double t = 1.0 - b * b - c * c - d * d;
    double qa = t > 0 ? std::sqrt(t) : 0.0;
    double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
    double sx = h.pixdim[1], sy = h.pixdim[2], sz = h.pixdim[3] * qfac;
    double r[3][3] = {
        {qa * qa + b * b - c * c - d * d, 2 * (b * c - qa * d), 2 * (b * d + qa * c)},
        {2 * (b * c + qa * d), qa * qa + c * c - b * b - d * d, 2 * (c * d - qa * b)},
        {2 * (b * d - qa * c), 2 * (c * d + qa * b), qa * qa + d * d - b * b - c * c}};
    double s[3] = {sx, sy, sz};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) a[i * 4 + j] = r[i][j] * s[j];
    a[3] = h.qoffset_x;
    a[7] = h.qoffset_y;
    a[11] = h.qoffset_z;
    return a;
  }
  a[0] = h.pixdim[1] ? h.pixdim[1] : 1.0;
  a[5] = h.pixdim[2] ? h.pixdim[2] : 1.0;
  a[10] = h.pixdim[3] ? h.pixdim[3] : 1.0;
  return a;
}

}  // namespace

Image read(const std::string& path) {
  if (!std::filesystem::exists(path))
    throw std::runtime_error("file not found: " + path);
  GzFile f(path, "rb");
  Nifti1Header h{};
  f.read(&h, sizeof(h));
  if (h.sizeof_hdr != 348)
    throw std::runtime_error(path + ": not a NIfTI-1 file (bad sizeof_hdr)");
  if (std::strncmp(h.magic, "n+1", 3) != 0 && std::strncmp(h.magic, "ni1", 3) != 0)
    throw std::runtime_error(path + ": bad NIfTI magic");
  int ndim = h.dim[0];
  if (ndim < 3 || ndim > 4)
    throw std::runtime_error(path + ": only 3-D/4-D images supported, got dim[0]=" +
                             std::to_string(ndim));
  Image img;
  img.nx = h.dim[1];
  img.ny = h.dim[2];
  img.nz = h.dim[3];
  img.nc = ndim == 4 ? std::max<int64_t>(1, h.dim[4]) : 1;
  if (img.nx < 1 || img.ny < 1 || img.nz < 1)
    throw std::runtime_error(path + ": non-positive image dimension");
  img.affine = affine_from_header(h);
  img.src_datatype = h.datatype;
  int bpv = bytes_per_voxel(h.datatype);

  // skip to voxel data
  int64_t off = static_cast<int64_t>(h.vox_offset);
  if (off < 348) off = 352;
  std::vector<uint8_t> skip(off - sizeof(h));
  if (!skip.empty()) f.read(skip.data(), skip.size());

  int64_t nvox = img.nx * img.ny * img.nz * img.nc;
  std::vector<uint8_t> raw(nvox * bpv);
  f.read(raw.data(), raw.size());

  double slope = (h.scl_slope == 0.0f) ? 1.0 : h.scl_slope;
  double inter = h.scl_inter;
  img.data.resize(nvox);
  // disk order: x fastest, then y, z, t; ours: (c,x,y,z) with z fastest
  int64_t i = 0;
  for (int64_t c = 0; c < img.nc; ++c)
    for (int64_t z = 0; z < img.nz; ++z)
      for (int64_t y = 0; y < img.ny; ++y)
        for (int64_t x = 0; x < img.nx; ++x, ++i) {
          double v = decode_voxel(raw.data() + i * bpv, h.datatype) * slope + inter;
          img.data[((c * img.nx + x) * img.ny + y) * img.nz + z] = v;
        }
  return img;
}

void write(const std::string& path, const Image& img, int datatype) {
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = static_cast<int16_t>(img.nc > 1 ? 4 : 3);
  h.dim[1] = static_cast<int16_t>(img.nx);
  h.dim[2] = static_cast<int16_t>(img.ny);
  h.dim[3] = static_cast<int16_t>(img.nz);
  h.dim[4] = static_cast<int16_t>(img.nc > 1 ? img.nc : 1);
  for (int d = 5; d < 8; ++d) h.dim[d] = 1;
  h.datatype = static_cast<int16_t>(datatype);
  h.bitpix = static_cast<int16_t>(bytes_per_voxel(datatype) * 8);
  // voxel sizes from affine column norms
  h.pixdim[0] = 1.0f;
  for (int j = 0; j < 3; ++j) {
    double n = 0;
    for (int i = 0; i < 3; ++i) n += img.affine[i * 4 + j] * img.affine[i * 4 + j];
    h.pixdim[j + 1] = static_cast<float>(std::sqrt(n));
  }
  h.pixdim[4] = 1.0f;
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.scl_inter = 0.0f;
  h.xyzt_units = 10;  // mm | sec
  h.sform_code = 2;
  h.qform_code = 0;
  for (int j = 0; j < 4; ++j) {
    h.srow_x[j] = static_cast<float>(img.affine[0 * 4 + j]);
    h.srow_y[j] = static_cast<float>(img.affine[1 * 4 + j]);
    h.srow_z[j] = static_cast<float>(img.affine[2 * 4 + j]);
  }
  std::memcpy(h.magic, "n+1", 4);

  bool gz = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
  GzFile f(path, gz ? "wb" : "wbT");
  f.write(&h, sizeof(h));
  uint32_t pad = 0;
  f.write(&pad, 4);  // header extension: none

  int bpv = bytes_per_voxel(datatype);
  int64_t nvox = img.nx * img.ny * img.nz * img.nc;
  if (static_cast<int64_t>(img.data.size()) != nvox)
    throw std::runtime_error("nifti::write: data size does not match dims");
  std::vector<uint8_t> raw(nvox * bpv);
  int64_t i = 0;
  for (int64_t c = 0; c < img.nc; ++c)
    for (int64_t z = 0; z < img.nz; ++z)
      for (int64_t y = 0; y < img.ny; ++y)
        for (int64_t x = 0; x < img.nx; ++x, ++i) {
          double v = img.data[((c * img.nx + x) * img.ny + y) * img.nz + z];
          encode_voxel(raw.data() + i * bpv, datatype, v);
        }
  f.write(raw.data(), raw.size());
}

}  // namespace nestseg::nifti
