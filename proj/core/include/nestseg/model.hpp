#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "nestseg/autodiff.hpp"
#include "nestseg/model_config.hpp"
#include "nestseg/tensor.hpp"

namespace nestseg {

// Lossless rearrangement between patch-grid row order and block-sequence
// order: row t*n + j of the output reads row index[t*n+j] of the grid-ordered
// token matrix.
std::vector<int64_t> blockify_index(const std::array<int64_t, 3>& grid,
                                    const std::array<int, 3>& block_grid);
std::vector<int64_t> invert_index(const std::vector<int64_t>& idx);

// (b, T, n, C') token arrangement at one hierarchy level. Batch items are
// processed as independent crops, so b == 1 per instance.
struct BlockedSequence {
  ad::Var data;  // [T, n, C]
  int level = 0;
  std::array<int64_t, 3> grid{};
  int64_t blocks() const { return data->value.dim(0); }
  int64_t tokens_per_block() const { return data->value.dim(1); }
  int64_t channels() const { return data->value.dim(2); }
};

struct HierarchyFeatures {
  ad::Var stem;                    // [stem_channels, crop...]
  std::array<ad::Var, 3> levels;   // [E_l, grid_l...]
};

struct ModelOutput {
  ad::Var brain_logits;  // [num_classes, crop...]
  ad::Var ticv_logit;    // [1, crop...] when icv heads enabled
  ad::Var pfv_logit;
};

// Hierarchical nested-transformer encoder with a U-Net-style decoder and
// softmax/sigmoid output heads.
class NestModel {
 public:
  NestModel(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  // crop: [in_channels, crop...] -> grid-ordered tokens [N0, E0] (+positions)
  ad::Var patch_embed(const Tensor& crop) const;
  BlockedSequence blockify(const ad::Var& tokens, int level) const;
  ad::Var deblockify(const BlockedSequence& seq) const;
  BlockedSequence transformer_block(const BlockedSequence& seq, int depth) const;
  // [E_l, g...] -> [E_{l+1}, g/2...]; conv3 + norm + maxpool2 so information
  // crosses former block boundaries
  ad::Var aggregate_downsample(const ad::Var& grid_feat, int level) const;

  HierarchyFeatures encode(const Tensor& crop) const;
  ad::Var decode(const HierarchyFeatures& feats) const;  // 32ch @ crop res
  ModelOutput forward(const Tensor& crop, bool finetune_mode) const;

  const std::vector<std::pair<std::string, ad::Var>>& parameters() const {
    return params_;
  }
  ad::Var param(const std::string& name) const;
  int64_t num_parameters() const;
  void zero_grad();

  // Checkpoint: directory with manifest.json + params.bin (little-endian f64).
  void save_checkpoint(const std::string& dir, int64_t iteration,
                       const std::string& stage, bool skull_stripped = false) const;
  static NestModel load_checkpoint(const std::string& dir);
  static ModelConfig peek_config(const std::string& dir);
  static nlohmann::json read_manifest(const std::string& dir);

  // All shared parameters copied exactly; the two icv heads keep their fresh
  // initialization. Throws on any backbone shape mismatch.
  static NestModel load_pretrained_into_finetune(const std::string& pretrain_dir,
                                                 const ModelConfig& finetune_cfg,
                                                 uint64_t seed);

 private:
  ad::Var add_param(const std::string& name, Tensor t);
  ad::Var tokens_to_grid(const ad::Var& tokens, const std::array<int64_t, 3>& g) const;
  ad::Var grid_to_tokens(const ad::Var& grid_feat) const;

  ModelConfig cfg_;
  std::vector<std::pair<std::string, ad::Var>> params_;
  std::map<std::string, ad::Var> by_name_;
  // cached blockify permutations per level
  std::array<std::shared_ptr<const std::vector<int64_t>>, 3> block_idx_;
  std::array<std::shared_ptr<const std::vector<int64_t>>, 3> unblock_idx_;
};

uint64_t fnv1a64(const void* data, size_t n);

}  // namespace nestseg
