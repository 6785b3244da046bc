#include "nestseg/inference.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <queue>
#include <stdexcept>

namespace nestseg {

namespace fs = std::filesystem;
using nlohmann::json;

WindowPlan plan_windows(const std::array<int64_t, 3>& grid,
                        const std::array<int64_t, 3>& window, double overlap,
                        FusionWeighting weighting) {
  if (overlap < 0 || overlap >= 1)
    throw std::invalid_argument("plan_windows: overlap must be in [0,1)");
  WindowPlan plan;
  plan.grid = grid;
  plan.window = window;
  plan.overlap = overlap;
  plan.weighting = weighting;

  std::array<std::vector<int64_t>, 3> axis_pos;
  for (int a = 0; a < 3; ++a) {
    if (window[a] < 1 || grid[a] < window[a])
      throw std::invalid_argument("plan_windows: window exceeds grid");
    int64_t stride = std::max<int64_t>(
        1, static_cast<int64_t>(std::llround(window[a] * (1.0 - overlap))));
    int64_t last = grid[a] - window[a];
    for (int64_t p = 0; p < last; p += stride) axis_pos[a].push_back(p);
    axis_pos[a].push_back(last);  // trailing window clamped inward
  }
  for (int64_t x : axis_pos[0])
    for (int64_t y : axis_pos[1])
      for (int64_t z : axis_pos[2]) plan.corners.push_back({x, y, z});
  return plan;
}

namespace {

// separable spatial fusion weight over one window
std::array<std::vector<double>, 3> fusion_profile(const WindowPlan& plan) {
  std::array<std::vector<double>, 3> w;
  for (int a = 0; a < 3; ++a) {
    w[a].resize(plan.window[a], 1.0);
    if (plan.weighting == FusionWeighting::kGaussian) {
      double center = (plan.window[a] - 1) / 2.0;
      double sigma = plan.window[a] / 8.0;
      for (int64_t i = 0; i < plan.window[a]; ++i) {
        double d = (i - center) / sigma;
        w[a][i] = std::exp(-0.5 * d * d);
      }
    }
  }
  return w;
}

}  // namespace

Tensor sliding_window_infer(const Volume& vol, const WindowFn& window_fn,
                            int64_t out_channels, const WindowPlan& plan) {
  const auto [wx, wy, wz] = plan.window;
  std::array<int64_t, 3> vshape{vol.nx, vol.ny, vol.nz};
  // pad symmetrically when the volume is smaller than the plan grid
  std::array<int64_t, 3> lo{};
  for (int a = 0; a < 3; ++a) {
    if (plan.grid[a] < vshape[a])
      throw std::invalid_argument("sliding_window_infer: plan grid smaller than volume");
    lo[a] = (plan.grid[a] - vshape[a]) / 2;
  }
  const auto [gx, gy, gz] = plan.grid;

  Tensor acc = Tensor::zeros({out_channels, gx, gy, gz});
  Tensor wsum = Tensor::zeros({gx, gy, gz});
  auto profile = fusion_profile(plan);

  Tensor crop({vol.nc, wx, wy, wz});
  for (const auto& corner : plan.corners) {
    for (int64_t c = 0; c < vol.nc; ++c)
      for (int64_t x = 0; x < wx; ++x)
        for (int64_t y = 0; y < wy; ++y)
          for (int64_t z = 0; z < wz; ++z) {
            int64_t sx = corner[0] + x - lo[0];
            int64_t sy = corner[1] + y - lo[1];
            int64_t sz = corner[2] + z - lo[2];
            bool in = sx >= 0 && sx < vol.nx && sy >= 0 && sy < vol.ny &&
                      sz >= 0 && sz < vol.nz;
            crop[((c * wx + x) * wy + y) * wz + z] =
                in ? vol.at(c, sx, sy, sz) : 0.0;
          }
    Tensor out = window_fn(crop);
    if (out.dim(0) != out_channels || out.numel() != out_channels * wx * wy * wz)
      throw std::runtime_error("sliding_window_infer: window output shape mismatch");
    for (int64_t x = 0; x < wx; ++x)
      for (int64_t y = 0; y < wy; ++y)
        for (int64_t z = 0; z < wz; ++z) {
          double w = profile[0][x] * profile[1][y] * profile[2][z];
          int64_t gi = ((corner[0] + x) * gy + corner[1] + y) * gz + corner[2] + z;
          wsum[gi] += w;
          for (int64_t c = 0; c < out_channels; ++c)
            acc[c * gx * gy * gz + gi] += w * out[((c * wx + x) * wy + y) * wz + z];
        }
  }

  const auto [nx, ny, nz] = vshape;
  Tensor fused({out_channels, nx, ny, nz});
  for (int64_t x = 0; x < nx; ++x)
    for (int64_t y = 0; y < ny; ++y)
      for (int64_t z = 0; z < nz; ++z) {
        int64_t gi = ((x + lo[0]) * gy + y + lo[1]) * gz + z + lo[2];
        double w = wsum[gi];
        if (w <= 0)
          throw std::runtime_error("sliding_window_infer: uncovered voxel");
        for (int64_t c = 0; c < out_channels; ++c)
          fused[((c * nx + x) * ny + y) * nz + z] = acc[c * gx * gy * gz + gi] / w;
      }
  return fused;
}

Tensor sliding_window_infer(const Volume& vol, const NestModel& model,
                            const WindowPlan& plan) {
  const ModelConfig& cfg = model.config();
  if (std::array<int64_t, 3>{cfg.crop_size[0], cfg.crop_size[1], cfg.crop_size[2]} !=
      plan.window)
    throw std::invalid_argument("sliding_window_infer: plan window != model crop size");
  int64_t out_channels = cfg.num_classes + (cfg.icv_heads_enabled ? 2 : 0);
  WindowFn fn = [&](const Tensor& crop) {
    ad::NoGradGuard ng;
    ModelOutput out = model.forward(crop, cfg.icv_heads_enabled);
    if (!cfg.icv_heads_enabled) return out.brain_logits->value;
    return Tensor::concat_dim0(
        {out.brain_logits->value, out.ticv_logit->value, out.pfv_logit->value});
  };
  return sliding_window_infer(vol, fn, out_channels, plan);
}

BinaryMask keep_largest_component(const BinaryMask& mask) {
  const int64_t nx = mask.nx, ny = mask.ny, nz = mask.nz;
  std::vector<int32_t> comp(mask.data.size(), -1);
  int32_t ncomp = 0;
  std::vector<int64_t> sizes;
  std::queue<int64_t> q;
  for (int64_t s = 0; s < mask.voxels(); ++s) {
    if (!mask.data[s] || comp[s] >= 0) continue;
    comp[s] = ncomp;
    sizes.push_back(0);
    q.push(s);
    while (!q.empty()) {
      int64_t i = q.front();
      q.pop();
      sizes[ncomp]++;
      int64_t z = i % nz, y = (i / nz) % ny, x = i / (ny * nz);
      const int64_t dx[6] = {1, -1, 0, 0, 0, 0};
      const int64_t dy[6] = {0, 0, 1, -1, 0, 0};
      const int64_t dz[6] = {0, 0, 0, 0, 1, -1};
      for (int d = 0; d < 6; ++d) {
        int64_t X = x + dx[d], Y = y + dy[d], Z = z + dz[d];
        if (X < 0 || X >= nx || Y < 0 || Y >= ny || Z < 0 || Z >= nz) continue;
        int64_t j = (X * ny + Y) * nz + Z;
        if (mask.data[j] && comp[j] < 0) {
          comp[j] = ncomp;
          q.push(j);
        }
      }
    }
    ++ncomp;
  }
  if (ncomp <= 1) return mask;
  int32_t best = 0;
  for (int32_t c = 1; c < ncomp; ++c)
    if (sizes[c] > sizes[best]) best = c;
  BinaryMask out = mask;
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = comp[i] == best ? 1 : 0;
  return out;
}

SegmentationResult assemble_outputs(const Tensor& fused, int num_classes,
                                    const Affine& affine,
                                    bool largest_component) {
  if (fused.dim(0) != num_classes + 2)
    throw std::invalid_argument("assemble_outputs: expected class + 2 icv channels");
  int64_t nx = fused.dim(1), ny = fused.dim(2), nz = fused.dim(3);
  int64_t V = nx * ny * nz;

  SegmentationResult r;
  r.labels = LabelMap{std::vector<uint16_t>(V, 0), nx, ny, nz, affine,
                      LabelProtocol::braincolor()};
  r.ticv = BinaryMask{std::vector<uint8_t>(V, 0), nx, ny, nz, affine,
                      IcvStructure::kTicv};
  r.pfv = BinaryMask{std::vector<uint8_t>(V, 0), nx, ny, nz, affine,
                     IcvStructure::kPfv};

  for (int64_t v = 0; v < V; ++v) {
    // argmax over class logits equals argmax over their softmax
    int best = 0;
    double bestv = fused[v];
    for (int c = 1; c < num_classes; ++c) {
      double val = fused[c * V + v];
      if (val > bestv) {
        bestv = val;
        best = c;
      }
    }
    r.labels.data[v] = static_cast<uint16_t>(best);
    // sigmoid(x) >= 0.5 iff x >= 0, boundary inclusive
    r.ticv.data[v] = fused[num_classes * V + v] >= 0.0 ? 1 : 0;
    r.pfv.data[v] = fused[(num_classes + 1) * V + v] >= 0.0 ? 1 : 0;
  }
  if (largest_component) {
    r.ticv = keep_largest_component(r.ticv);
    r.pfv = keep_largest_component(r.pfv);
  }
  return r;
}

namespace {

// maps native voxel index -> source voxel index, rounding to nearest
template <typename T>
std::vector<T> pull_nearest(const std::vector<T>& src,
                            const std::array<int64_t, 3>& sshape,
                            const Affine& src_affine,
                            const Affine& native_affine,
                            const std::array<int64_t, 3>& nshape) {
  Affine to_src = src_affine.inverse().mul(native_affine);
  std::vector<T> out(static_cast<size_t>(nshape[0]) * nshape[1] * nshape[2], 0);
  size_t i = 0;
  for (int64_t x = 0; x < nshape[0]; ++x)
    for (int64_t y = 0; y < nshape[1]; ++y)
      for (int64_t z = 0; z < nshape[2]; ++z, ++i) {
        auto p = to_src.apply(x, y, z);
        int64_t sx = std::llround(p[0]);
        int64_t sy = std::llround(p[1]);
        int64_t sz = std::llround(p[2]);
        if (sx < 0 || sx >= sshape[0] || sy < 0 || sy >= sshape[1] || sz < 0 ||
            sz >= sshape[2])
          continue;
        out[i] = src[(sx * sshape[1] + sy) * sshape[2] + sz];
      }
  return out;
}

}  // namespace

SegmentationResult inverse_transform(const SegmentationResult& result,
                                     const Affine& native_affine,
                                     const std::array<int64_t, 3>& native_shape) {
  if (!result.labels.affine.invertible())
    throw std::invalid_argument("inverse_transform: recorded affine not invertible");
  std::array<int64_t, 3> sshape{result.labels.nx, result.labels.ny, result.labels.nz};

  SegmentationResult out;
  out.provenance = result.provenance;
  out.labels = LabelMap{
      pull_nearest(result.labels.data, sshape, result.labels.affine,
                   native_affine, native_shape),
      native_shape[0], native_shape[1], native_shape[2], native_affine,
      result.labels.protocol};
  out.ticv = BinaryMask{
      pull_nearest(result.ticv.data, sshape, result.ticv.affine, native_affine,
                   native_shape),
      native_shape[0], native_shape[1], native_shape[2], native_affine,
      IcvStructure::kTicv};
  out.pfv = BinaryMask{
      pull_nearest(result.pfv.data, sshape, result.pfv.affine, native_affine,
                   native_shape),
      native_shape[0], native_shape[1], native_shape[2], native_affine,
      IcvStructure::kPfv};
  return out;
}

void write_result(const SegmentationResult& result, const std::string& dir,
                  const std::string& stem) {
  fs::create_directories(dir);
  fs::path base(dir);
  save_label_map(result.labels, (base / (stem + "_seg.nii.gz")).string());
  save_mask(result.ticv, (base / (stem + "_ticv.nii.gz")).string());
  save_mask(result.pfv, (base / (stem + "_pfv.nii.gz")).string());
  std::ofstream out(base / (stem + "_manifest.json"));
  out << result.provenance.dump(2) << "\n";
  if (!out) throw std::runtime_error("write_result: cannot write manifest");
}

}  // namespace nestseg
