#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace nestseg {

// Architecture hyperparameters. Three hierarchy levels; the block grid halves
// per axis each level and must end at (1,1,1) so the deepest level is a
// single block.
struct ModelConfig {
  int in_channels = 1;
  std::array<int, 3> patch_size = {4, 4, 4};
  std::array<int, 3> crop_size = {96, 96, 96};
  std::vector<int> embed_dims = {64, 128, 256};
  std::vector<int> num_heads = {4, 8, 16};
  std::vector<int> depths = {2, 2, 8};
  std::vector<std::array<int, 3>> block_grid = {{4, 4, 4}, {2, 2, 2}, {1, 1, 1}};
  int mlp_ratio = 4;
  int stem_channels = 32;
  // decoder conv widths, one per stage, ending at the fixed 32-channel output
  std::vector<int> decoder_channels = {128, 64, 32, 32, 32};
  int num_classes = 133;
  bool icv_heads_enabled = false;

  static constexpr int kLevels = 3;
  static constexpr int kDecoderOutChannels = 32;

  // patch-grid extents at a hierarchy level
  std::array<int64_t, 3> grid(int level) const;
  int64_t num_patches(int level) const;
  int64_t blocks(int level) const;            // T
  int64_t tokens_per_block(int level) const;  // n
  int upsample_stages() const;                // log2(patch) per axis

  // returns every violation; empty means valid
  std::vector<std::string> validate() const;
  void validate_or_throw() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  bool same_backbone(const ModelConfig& o) const;  // equal except icv heads

  // presets
  static ModelConfig defaults();              // paper-scale geometry
  static ModelConfig toy(int num_classes);    // 32-cube crop, CPU-trainable
  static ModelConfig tiny(int num_classes);   // 8-cube crop, gradient checks
};

}  // namespace nestseg
