#include "nestseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <unistd.h>

namespace nestseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// floor-rank percentile; unlike an interpolated quantile this makes
// normalization exactly idempotent (the re-measured bounds are {0,1})
double percentile(std::vector<float> sorted_copy, double pct) {
  std::sort(sorted_copy.begin(), sorted_copy.end());
  size_t idx = static_cast<size_t>(pct / 100.0 * (sorted_copy.size() - 1));
  return sorted_copy[idx];
}

}  // namespace

std::pair<Volume, NormalizationParams> normalize_intensity(const Volume& vol,
                                                           double low_pct,
                                                           double high_pct) {
  if (vol.data.empty()) throw std::invalid_argument("normalize_intensity: empty volume");
  if (!(low_pct < high_pct) || low_pct < 0 || high_pct > 100)
    throw std::invalid_argument("normalize_intensity: bad percentile range");
  NormalizationParams p;
  p.low_pct = low_pct;
  p.high_pct = high_pct;
  p.low_val = percentile(vol.data, low_pct);
  p.high_val = percentile(vol.data, high_pct);
  if (p.high_val <= p.low_val)
    throw std::invalid_argument("normalize_intensity: constant volume");
  Volume out = vol;
  double scale = 1.0 / (p.high_val - p.low_val);
  for (auto& v : out.data) {
    double x = std::clamp(static_cast<double>(v), p.low_val, p.high_val);
    v = static_cast<float>((x - p.low_val) * scale);
  }
  return {std::move(out), p};
}

namespace {

// target voxel -> source voxel index chain
Affine pull_chain(const Affine& src_affine, const Affine& world_affine,
                  const Affine& target_affine) {
  if (!world_affine.invertible() || !src_affine.invertible())
    throw std::invalid_argument("apply_affine_resample: singular affine");
  return src_affine.inverse().mul(world_affine.inverse()).mul(target_affine);
}

}  // namespace

Volume apply_affine_resample(const Volume& vol, const Affine& world_affine,
                             const std::array<int64_t, 3>& target_shape,
                             const Affine& target_affine, Interp interp) {
  Affine chain = pull_chain(vol.affine, world_affine, target_affine);
  Volume out;
  out.nc = vol.nc;
  out.nx = target_shape[0];
  out.ny = target_shape[1];
  out.nz = target_shape[2];
  out.affine = target_affine;
  out.skull_stripped = vol.skull_stripped;
  out.data.assign(static_cast<size_t>(vol.nc) * out.voxels(), 0.f);

  for (int64_t x = 0; x < out.nx; ++x)
    for (int64_t y = 0; y < out.ny; ++y)
      for (int64_t z = 0; z < out.nz; ++z) {
        auto p = chain.apply(x, y, z);
        if (interp == Interp::kNearest) {
          int64_t sx = std::llround(p[0]), sy = std::llround(p[1]),
                  sz = std::llround(p[2]);
          if (sx < 0 || sx >= vol.nx || sy < 0 || sy >= vol.ny || sz < 0 ||
              sz >= vol.nz)
            continue;
          for (int64_t c = 0; c < vol.nc; ++c)
            out.at(c, x, y, z) = vol.at(c, sx, sy, sz);
        } else {
          double fx = std::floor(p[0]), fy = std::floor(p[1]), fz = std::floor(p[2]);
          double tx = p[0] - fx, ty = p[1] - fy, tz = p[2] - fz;
          for (int64_t c = 0; c < vol.nc; ++c) {
            double acc = 0;
            for (int dx = 0; dx < 2; ++dx)
              for (int dy = 0; dy < 2; ++dy)
                for (int dz = 0; dz < 2; ++dz) {
                  int64_t sx = static_cast<int64_t>(fx) + dx;
                  int64_t sy = static_cast<int64_t>(fy) + dy;
                  int64_t sz = static_cast<int64_t>(fz) + dz;
                  if (sx < 0 || sx >= vol.nx || sy < 0 || sy >= vol.ny ||
                      sz < 0 || sz >= vol.nz)
                    continue;
                  double w = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) *
                             (dz ? tz : 1 - tz);
                  acc += w * vol.at(c, sx, sy, sz);
                }
            out.at(c, x, y, z) = static_cast<float>(acc);
          }
        }
      }
  return out;
}

LabelMap apply_affine_resample(const LabelMap& map, const Affine& world_affine,
                               const std::array<int64_t, 3>& target_shape,
                               const Affine& target_affine, Interp interp) {
  if (interp != Interp::kNearest)
    throw std::invalid_argument("apply_affine_resample: labels require nearest interpolation");
  Affine chain = pull_chain(map.affine, world_affine, target_affine);
  LabelMap out;
  out.nx = target_shape[0];
  out.ny = target_shape[1];
  out.nz = target_shape[2];
  out.affine = target_affine;
  out.protocol = map.protocol;
  out.data.assign(out.voxels(), 0);
  size_t i = 0;
  for (int64_t x = 0; x < out.nx; ++x)
    for (int64_t y = 0; y < out.ny; ++y)
      for (int64_t z = 0; z < out.nz; ++z, ++i) {
        auto p = chain.apply(x, y, z);
        int64_t sx = std::llround(p[0]), sy = std::llround(p[1]),
                sz = std::llround(p[2]);
        if (sx < 0 || sx >= map.nx || sy < 0 || sy >= map.ny || sz < 0 ||
            sz >= map.nz)
          continue;
        out.data[i] = map.at(sx, sy, sz);
      }
  return out;
}

BinaryMask apply_affine_resample(const BinaryMask& mask,
                                 const Affine& world_affine,
                                 const std::array<int64_t, 3>& target_shape,
                                 const Affine& target_affine, Interp interp) {
  if (interp != Interp::kNearest)
    throw std::invalid_argument("apply_affine_resample: masks require nearest interpolation");
  LabelMap tmp{std::vector<uint16_t>(mask.data.begin(), mask.data.end()),
               mask.nx, mask.ny, mask.nz, mask.affine,
               LabelProtocol::braincolor()};
  LabelMap res = apply_affine_resample(tmp, world_affine, target_shape,
                                       target_affine, Interp::kNearest);
  BinaryMask out;
  out.nx = res.nx;
  out.ny = res.ny;
  out.nz = res.nz;
  out.affine = res.affine;
  out.structure = mask.structure;
  out.data.assign(res.data.begin(), res.data.end());
  return out;
}

json PreprocessRecord::to_json() const {
  json steps_j = json::array();
  for (const auto& s : steps) steps_j.push_back({{"name", s.name}, {"details", s.details}});
  return json{{"steps", steps_j},
              {"forward_affine", forward_affine.m},
              {"normalization",
               {{"low_pct", normalization.low_pct},
                {"high_pct", normalization.high_pct},
                {"low_val", normalization.low_val},
                {"high_val", normalization.high_val}}},
              {"skull_stripped", skull_stripped}};
}

PreprocessRecord PreprocessRecord::from_json(const json& j) {
  PreprocessRecord r;
  for (const auto& s : j.at("steps"))
    r.steps.push_back({s.at("name"), s.at("details")});
  r.forward_affine.m = j.at("forward_affine").get<std::array<double, 16>>();
  const auto& n = j.at("normalization");
  r.normalization = {n.at("low_pct"), n.at("high_pct"), n.at("low_val"),
                     n.at("high_val")};
  r.skull_stripped = j.at("skull_stripped").get<bool>();
  return r;
}

namespace {

std::string substitute(std::string tmpl, const std::string& key,
                       const std::string& value) {
  size_t pos;
  while ((pos = tmpl.find(key)) != std::string::npos)
    tmpl.replace(pos, key.size(), value);
  return tmpl;
}

bool tool_available(const std::string& command_template) {
  std::string exe = command_template.substr(0, command_template.find(' '));
  if (exe.empty()) return false;
  if (exe.find('/') != std::string::npos) return fs::exists(exe);
  std::string probe = "command -v " + exe + " >/dev/null 2>&1";
  return std::system(probe.c_str()) == 0;
}

}  // namespace

Volume run_adapter(const ToolAdapter& adapter, const Volume& vol,
                   PreprocessRecord& record, Affine* out_affine) {
  if (out_affine) *out_affine = Affine::identity();
  if (adapter.passthrough) {
    record.steps.push_back({adapter.id, {{"mode", "passthrough"}}});
    return vol;
  }
  if (adapter.command_template.empty())
    throw std::runtime_error("tool '" + adapter.id +
                             "' not configured; pass-through requires an explicit flag");
  if (!tool_available(adapter.command_template))
    throw std::runtime_error("tool '" + adapter.id + "' not found on this host");

  fs::path work = fs::temp_directory_path() /
                  ("nestseg_adapter_" + adapter.id + "_" +
                   std::to_string(::getpid()));
  fs::create_directories(work);
  std::string in_path = (work / "input.nii.gz").string();
  std::string out_path = (work / "output.nii.gz").string();
  save_volume(vol, in_path);

  std::string cmd = substitute(
      substitute(adapter.command_template, "{input}", in_path), "{output}",
      out_path);
  std::string wrapped =
      "timeout " + std::to_string(adapter.timeout_sec) + " " + cmd +
      " >" + (work / "stdout.log").string() + " 2>" +
      (work / "stderr.log").string();
  int rc = std::system(wrapped.c_str());
  if (rc != 0) {
    fs::remove_all(work);
    throw std::runtime_error("tool '" + adapter.id + "' failed (exit " +
                             std::to_string(rc) + ")");
  }
  if (!fs::exists(out_path)) {
    fs::remove_all(work);
    throw std::runtime_error("tool '" + adapter.id + "' produced no output");
  }
  Volume out = load_volume(out_path);
  out.skull_stripped = vol.skull_stripped;
  if (out_affine) {
    fs::path aff_path = out_path + ".affine";
    if (fs::exists(aff_path)) {
      std::ifstream in(aff_path);
      for (double& v : out_affine->m)
        if (!(in >> v)) throw std::runtime_error("tool '" + adapter.id +
                                                 "': malformed affine file");
    }
  }
  record.steps.push_back({adapter.id, {{"command", cmd}, {"exit", rc}}});
  fs::remove_all(work);
  return out;
}

std::pair<Volume, PreprocessRecord> preprocess(const Volume& vol,
                                               const PreprocessConfig& cfg) {
  PreprocessRecord record;
  Volume cur = vol;
  if (cfg.skull_strip) {
    cur = run_adapter(cfg.strip, cur, record);
    cur.skull_stripped = true;
    record.skull_stripped = true;
  }
  cur = run_adapter(cfg.n4, cur, record);
  auto [normed, params] = normalize_intensity(cur, cfg.low_pct, cfg.high_pct);
  record.normalization = params;
  record.steps.push_back({"normalize",
                          {{"low_pct", params.low_pct},
                           {"high_pct", params.high_pct},
                           {"low_val", params.low_val},
                           {"high_val", params.high_val}}});
  Affine reg = Affine::identity();
  Volume registered = run_adapter(cfg.registration, normed, record, &reg);
  record.forward_affine = reg;
  Volume mni = apply_affine_resample(registered, reg, MniGrid::kShape,
                                     MniGrid::affine(), Interp::kTrilinear);
  record.steps.push_back({"resample_to_mni", {{"shape", MniGrid::kShape}}});
  return {std::move(mni), std::move(record)};
}

}  // namespace nestseg
