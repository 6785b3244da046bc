#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "nestseg/core_types.hpp"

namespace nestseg {

struct NormalizationParams {
  double low_pct = 0.0;
  double high_pct = 99.5;
  double low_val = 0.0;   // clip bounds measured on the input
  double high_val = 0.0;
};

// Clip to the [low_pct, high_pct] intensity percentiles, then rescale to
// [0,1]. Errors on constant volumes.
std::pair<Volume, NormalizationParams> normalize_intensity(
    const Volume& vol, double low_pct = 0.0, double high_pct = 99.5);

enum class Interp { kTrilinear, kNearest };

// Pull-based resampling: world_affine maps native world to target world
// coordinates; each target voxel is pulled from the source through the
// inverted chain.
Volume apply_affine_resample(const Volume& vol, const Affine& world_affine,
                             const std::array<int64_t, 3>& target_shape,
                             const Affine& target_affine, Interp interp);
LabelMap apply_affine_resample(const LabelMap& map, const Affine& world_affine,
                               const std::array<int64_t, 3>& target_shape,
                               const Affine& target_affine,
                               Interp interp = Interp::kNearest);
BinaryMask apply_affine_resample(const BinaryMask& mask,
                                 const Affine& world_affine,
                                 const std::array<int64_t, 3>& target_shape,
                                 const Affine& target_affine,
                                 Interp interp = Interp::kNearest);

struct ToolAdapter {
  std::string id;                // "n4", "register", "synthstrip"
  std::string command_template;  // with {input} and {output} placeholders
  int timeout_sec = 600;
  bool passthrough = false;      // must be requested explicitly
};

struct PreprocessStep {
  std::string name;
  nlohmann::json details;
};

struct PreprocessRecord {
  std::vector<PreprocessStep> steps;
  Affine forward_affine = Affine::identity();  // native world -> MNI world
  NormalizationParams normalization;
  bool skull_stripped = false;

  nlohmann::json to_json() const;
  static PreprocessRecord from_json(const nlohmann::json& j);
};

// Runs the external tool on a temp NIfTI and reads the result back; in
// passthrough mode returns the input unchanged but still records the step.
// A registration adapter may leave "{output}.affine" (16 numbers, row-major
// native-world -> MNI-world) next to its output; returned separately.
Volume run_adapter(const ToolAdapter& adapter, const Volume& vol,
                   PreprocessRecord& record, Affine* out_affine = nullptr);

struct PreprocessConfig {
  bool skull_strip = false;
  ToolAdapter strip{"synthstrip", "", 600, false};
  ToolAdapter n4{"n4", "", 600, false};
  ToolAdapter registration{"register", "", 600, false};
  double low_pct = 0.0;
  double high_pct = 99.5;
};

// [optional strip] -> N4 -> normalize -> register -> resample to MNI grid.
std::pair<Volume, PreprocessRecord> preprocess(const Volume& vol,
                                               const PreprocessConfig& cfg);

}  // namespace nestseg
