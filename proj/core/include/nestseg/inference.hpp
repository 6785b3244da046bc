#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

#include "nestseg/core_types.hpp"
#include "nestseg/model.hpp"
#include "nestseg/tensor.hpp"

namespace nestseg {

enum class FusionWeighting { kGaussian, kUniform };

struct WindowPlan {
  std::array<int64_t, 3> grid{};
  std::array<int64_t, 3> window{96, 96, 96};
  double overlap = 0.5;
  FusionWeighting weighting = FusionWeighting::kGaussian;
  std::vector<std::array<int64_t, 3>> corners;  // deterministic order
};

// Stride window*(1-overlap) per axis, trailing window clamped inward so the
// corners stay in bounds and the union covers every voxel.
WindowPlan plan_windows(const std::array<int64_t, 3>& grid,
                        const std::array<int64_t, 3>& window,
                        double overlap = 0.5,
                        FusionWeighting weighting = FusionWeighting::kGaussian);

// crop [in_channels, w...] -> logits [out_channels, w...]
using WindowFn = std::function<Tensor(const Tensor&)>;

// Weighted per-voxel fusion of per-window logits; weights normalized so a
// constant-output model fuses to exactly that constant. Grids smaller than
// the window are zero-padded symmetrically and cropped back afterwards.
Tensor sliding_window_infer(const Volume& vol, const WindowFn& window_fn,
                            int64_t out_channels, const WindowPlan& plan);

// Runs the model's forward pass without gradient tracking; output channels
// are the class logits followed by the TICV and PFV logits when the
// checkpoint carries those heads.
Tensor sliding_window_infer(const Volume& vol, const NestModel& model,
                            const WindowPlan& plan);

struct SegmentationResult {
  LabelMap labels;
  BinaryMask ticv;
  BinaryMask pfv;
  nlohmann::json provenance;
};

// fused: [num_classes + 2, ...]. Labels by per-voxel argmax; masks by
// sigmoid >= 0.5 (logit >= 0, boundary inclusive).
SegmentationResult assemble_outputs(const Tensor& fused, int num_classes,
                                    const Affine& affine,
                                    bool largest_component = false);

// Pull-based nearest-neighbor resampling of all three outputs onto the
// native grid under the inverted preprocessing affine.
SegmentationResult inverse_transform(const SegmentationResult& result,
                                     const Affine& native_affine,
                                     const std::array<int64_t, 3>& native_shape);

// Keep only the largest 6-connected component of the mask.
BinaryMask keep_largest_component(const BinaryMask& mask);

// Writes <stem>_seg.nii.gz, <stem>_ticv.nii.gz, <stem>_pfv.nii.gz and
// <stem>_manifest.json under dir.
void write_result(const SegmentationResult& result, const std::string& dir,
                  const std::string& stem);

}  // namespace nestseg
