#include "nestseg/core_types.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "nestseg/nifti.hpp"

namespace nestseg {

// ---------------- Affine ----------------

Affine Affine::identity() {
  Affine a;
  a.m[0] = a.m[5] = a.m[10] = a.m[15] = 1.0;
  return a;
}

double Affine::det3() const {
  Eigen::Matrix3d l;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) l(i, j) = m[i * 4 + j];
  return l.determinant();
}

bool Affine::invertible(double tol) const { return std::abs(det3()) > tol; }

Affine Affine::inverse() const {
  Eigen::Matrix4d a;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) a(i, j) = m[i * 4 + j];
  Eigen::Matrix4d inv = a.inverse();
  Affine r;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) r.m[i * 4 + j] = inv(i, j);
  return r;
}

Affine Affine::mul(const Affine& o) const {
  Affine r;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double s = 0;
      for (int k = 0; k < 4; ++k) s += m[i * 4 + k] * o.m[k * 4 + j];
      r.m[i * 4 + j] = s;
    }
  return r;
}

std::array<double, 3> Affine::apply(double x, double y, double z) const {
  std::array<double, 3> w;
  for (int i = 0; i < 3; ++i)
    w[i] = m[i * 4 + 0] * x + m[i * 4 + 1] * y + m[i * 4 + 2] * z + m[i * 4 + 3];
  return w;
}

double Affine::col_norm(int j) const {
  double n = 0;
  for (int i = 0; i < 3; ++i) n += m[i * 4 + j] * m[i * 4 + j];
  return std::sqrt(n);
}

// ---------------- LabelProtocol ----------------

LabelProtocol::LabelProtocol(std::vector<std::pair<int, std::string>> entries)
    : entries_(std::move(entries)) {
  if (entries_.size() != kNumClasses)
    throw std::invalid_argument("LabelProtocol: expected 133 entries, got " +
                                std::to_string(entries_.size()));
  std::set<int> seen;
  for (const auto& [id, name] : entries_) {
    if (id < 0 || id >= kNumClasses)
      throw std::invalid_argument("LabelProtocol: id out of range: " + std::to_string(id));
    if (!seen.insert(id).second)
      throw std::invalid_argument("LabelProtocol: duplicate id " + std::to_string(id));
  }
  std::sort(entries_.begin(), entries_.end());
}

std::shared_ptr<const LabelProtocol> LabelProtocol::braincolor() {
  static std::shared_ptr<const LabelProtocol> proto = [] {
    std::vector<std::pair<int, std::string>> e;
    e.emplace_back(0, "background");
    for (int id = 1; id < kNumClasses; ++id) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "region_%03d", id);
      e.emplace_back(id, buf);
    }
    return std::make_shared<const LabelProtocol>(std::move(e));
  }();
  return proto;
}

std::shared_ptr<const LabelProtocol> LabelProtocol::load_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open protocol file " + path);
  nlohmann::json j;
  f >> j;
  std::vector<std::pair<int, std::string>> e;
  for (const auto& item : j.at("labels"))
    e.emplace_back(item.at("id").get<int>(), item.at("name").get<std::string>());
  return std::make_shared<const LabelProtocol>(std::move(e));
}

void LabelProtocol::save_json(const std::string& path) const {
  nlohmann::json j;
  j["version"] = 1;
  j["protocol"] = "braincolor-compatible";
  auto& arr = j["labels"] = nlohmann::json::array();
  for (const auto& [id, name] : entries_) arr.push_back({{"id", id}, {"name", name}});
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write protocol file " + path);
  f << j.dump(2) << "\n";
}

// ---------------- MniGrid ----------------

Affine MniGrid::affine() {
  Affine a = Affine::identity();
  for (int i = 0; i < 3; ++i)
    a.m[i * 4 + 3] = -kSpacingMm * (kShape[i] - 1) / 2.0;
  return a;
}

// ---------------- validation ----------------

void Volume::validate() const {
  if (nc < 1 || nx < 1 || ny < 1 || nz < 1)
    throw std::invalid_argument("Volume: non-positive dimensions");
  if (static_cast<int64_t>(data.size()) != nc * nx * ny * nz)
    throw std::invalid_argument("Volume: data size mismatch");
  if (!affine.invertible())
    throw std::invalid_argument("Volume: affine is not invertible");
  for (float v : data)
    if (!std::isfinite(v)) throw std::invalid_argument("Volume: non-finite voxel value");
}

void BinaryMask::validate() const {
  if (static_cast<int64_t>(data.size()) != nx * ny * nz)
    throw std::invalid_argument("BinaryMask: data size mismatch");
  for (uint8_t v : data)
    if (v > 1) throw std::invalid_argument("BinaryMask: value outside {0,1}");
}

void LabelMap::validate() const {
  if (static_cast<int64_t>(data.size()) != nx * ny * nz)
    throw std::invalid_argument("LabelMap: data size mismatch");
  if (!protocol) throw std::invalid_argument("LabelMap: missing protocol");
  for (uint16_t v : data)
    if (!protocol->contains(v))
      throw std::invalid_argument("LabelMap: id " + std::to_string(v) +
                                  " outside protocol range");
}

// ---------------- reorientation ----------------

namespace {

// Permute/flip voxel axes so the affine's linear part is closest to a
// positive diagonal (RAS-like). Returns false when the affine is too
// degenerate to decide; callers then keep the stored orientation.
struct Orientation {
  std::array<int, 3> perm;   // new axis j reads old axis perm[j]
  std::array<bool, 3> flip;  // flip along old axis perm[j]
  bool is_identity() const {
    return perm == std::array<int, 3>{0, 1, 2} && !flip[0] && !flip[1] && !flip[2];
  }
};

bool ras_orientation(const Affine& a, Orientation& o) {
  std::array<bool, 3> used{};
  for (int w = 0; w < 3; ++w) {  // world axis
    int best = -1;
    double bestv = 0;
    for (int v = 0; v < 3; ++v) {
      if (used[v]) continue;
      double c = std::abs(a.m[w * 4 + v]);
      if (c > bestv) { bestv = c; best = v; }
    }
    if (best < 0 || bestv == 0) return false;
    used[best] = true;
    o.perm[w] = best;
    o.flip[w] = a.m[w * 4 + best] < 0;
  }
  return true;
}

template <typename T>
void reorient_grid(std::vector<T>& data, int64_t nc, std::array<int64_t, 3>& dims,
                   Affine& affine, const Orientation& o) {
  std::array<int64_t, 3> nd = {dims[o.perm[0]], dims[o.perm[1]], dims[o.perm[2]]};
  std::vector<T> out(data.size());
  int64_t vol = dims[0] * dims[1] * dims[2];
  for (int64_t c = 0; c < nc; ++c) {
    const T* src = data.data() + c * vol;
    T* dst = out.data() + c * vol;
    for (int64_t x = 0; x < nd[0]; ++x)
      for (int64_t y = 0; y < nd[1]; ++y)
        for (int64_t z = 0; z < nd[2]; ++z) {
          std::array<int64_t, 3> ni = {x, y, z};
          std::array<int64_t, 3> oi;
          for (int j = 0; j < 3; ++j) {
            int64_t v = ni[j];
            if (o.flip[j]) v = nd[j] - 1 - v;
            oi[o.perm[j]] = v;
          }
          dst[(x * nd[1] + y) * nd[2] + z] =
              src[(oi[0] * dims[1] + oi[1]) * dims[2] + oi[2]];
        }
  }
  data.swap(out);
  // new affine: column j = +-column perm[j]; translation absorbs flips
  Affine na = affine;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double col = affine.m[i * 4 + o.perm[j]];
      na.m[i * 4 + j] = o.flip[j] ? -col : col;
    }
    double t = affine.m[i * 4 + 3];
    for (int j = 0; j < 3; ++j)
      if (o.flip[j]) t += affine.m[i * 4 + o.perm[j]] * (nd[j] - 1);
    na.m[i * 4 + 3] = t;
  }
  affine = na;
  dims = nd;
}

}  // namespace

// ---------------- volume / label / mask I/O ----------------

Volume load_volume(const std::string& path) {
  nifti::Image img = nifti::read(path);
  Volume v;
  v.nc = img.nc;
  v.nx = img.nx;
  v.ny = img.ny;
  v.nz = img.nz;
  v.affine = Affine::from_array(img.affine);
  v.source_path = path;
  v.data.resize(img.data.size());
  for (size_t i = 0; i < img.data.size(); ++i) {
    if (!std::isfinite(img.data[i]))
      throw std::runtime_error(path + ": non-finite voxel value");
    v.data[i] = static_cast<float>(img.data[i]);
  }
  if (!v.affine.invertible())
    throw std::runtime_error(path + ": singular affine in header");
  Orientation o;
  if (ras_orientation(v.affine, o) && !o.is_identity()) {
    std::array<int64_t, 3> dims = {v.nx, v.ny, v.nz};
    reorient_grid(v.data, v.nc, dims, v.affine, o);
    v.nx = dims[0];
    v.ny = dims[1];
    v.nz = dims[2];
  }
  v.validate();
  return v;
}

void save_volume(const Volume& v, const std::string& path) {
  v.validate();
  nifti::Image img;
  img.nc = v.nc;
  img.nx = v.nx;
  img.ny = v.ny;
  img.nz = v.nz;
  img.affine = v.affine.m;
  img.data.assign(v.data.begin(), v.data.end());
  nifti::write(path, img, nifti::kFloat32);
}

LabelMap load_label_map(const std::string& path,
                        std::shared_ptr<const LabelProtocol> protocol) {
  nifti::Image img = nifti::read(path);
  if (img.nc != 1) throw std::runtime_error(path + ": label map must be 3-D");
  LabelMap m;
  m.nx = img.nx;
  m.ny = img.ny;
  m.nz = img.nz;
  m.affine = Affine::from_array(img.affine);
  m.protocol = std::move(protocol);
  m.data.resize(img.data.size());
  for (size_t i = 0; i < img.data.size(); ++i) {
    double v = img.data[i];
    if (!std::isfinite(v) || v < 0 || v != std::floor(v))
      throw std::runtime_error(path + ": non-integer label value");
    m.data[i] = static_cast<uint16_t>(v);
  }
  Orientation o;
  if (ras_orientation(m.affine, o) && !o.is_identity()) {
    std::array<int64_t, 3> dims = {m.nx, m.ny, m.nz};
    reorient_grid(m.data, 1, dims, m.affine, o);
    m.nx = dims[0];
    m.ny = dims[1];
    m.nz = dims[2];
  }
  m.validate();
  return m;
}

void save_label_map(const LabelMap& map, const std::string& path) {
  map.validate();
  nifti::Image img;
  img.nx = map.nx;
  img.ny = map.ny;
  img.nz = map.nz;
  img.affine = map.affine.m;
  img.data.assign(map.data.begin(), map.data.end());
  nifti::write(path, img, nifti::kUint16);
}

BinaryMask load_mask(const std::string& path, IcvStructure structure) {
  nifti::Image img = nifti::read(path);
  if (img.nc != 1) throw std::runtime_error(path + ": mask must be 3-D");
  BinaryMask m;
  m.nx = img.nx;
  m.ny = img.ny;
  m.nz = img.nz;
  m.affine = Affine::from_array(img.affine);
  m.structure = structure;
  m.data.resize(img.data.size());
  for (size_t i = 0; i < img.data.size(); ++i)
    m.data[i] = img.data[i] > 0.5 ? 1 : 0;
  Orientation o;
  if (ras_orientation(m.affine, o) && !o.is_identity()) {
    std::array<int64_t, 3> dims = {m.nx, m.ny, m.nz};
    reorient_grid(m.data, 1, dims, m.affine, o);
    m.nx = dims[0];
    m.ny = dims[1];
    m.nz = dims[2];
  }
  m.validate();
  return m;
}

void save_mask(const BinaryMask& mask, const std::string& path) {
  mask.validate();
  nifti::Image img;
  img.nx = mask.nx;
  img.ny = mask.ny;
  img.nz = mask.nz;
  img.affine = mask.affine.m;
  img.data.assign(mask.data.begin(), mask.data.end());
  nifti::write(path, img, nifti::kUint8);
}

// ---------------- one-hot ----------------

Tensor one_hot(const uint16_t* labels, int64_t n, int num_classes) {
  Tensor t({num_classes, n});
  for (int64_t i = 0; i < n; ++i) {
    if (labels[i] >= num_classes)
      throw std::invalid_argument("one_hot: id " + std::to_string(labels[i]) +
                                  " >= num_classes " + std::to_string(num_classes));
    t[static_cast<int64_t>(labels[i]) * n + i] = 1.0;
  }
  return t;
}

Tensor one_hot(const LabelMap& map, int num_classes) {
  Tensor t = one_hot(map.data.data(), map.voxels(), num_classes);
  return t.reshaped({num_classes, map.nx, map.ny, map.nz});
}

}  // namespace nestseg
