#include "nestseg/model_config.hpp"

#include <stdexcept>

namespace nestseg {

namespace {
bool is_pow2(int v) { return v > 0 && (v & (v - 1)) == 0; }
int ilog2(int v) {
  int l = 0;
  while (v > 1) { v >>= 1; ++l; }
  return l;
}
}  // namespace

std::array<int64_t, 3> ModelConfig::grid(int level) const {
  std::array<int64_t, 3> g;
  for (int a = 0; a < 3; ++a) g[a] = crop_size[a] / patch_size[a];
  for (int l = 0; l < level; ++l)
    for (int a = 0; a < 3; ++a) g[a] /= 2;
  return g;
}

int64_t ModelConfig::num_patches(int level) const {
  auto g = grid(level);
  return g[0] * g[1] * g[2];
}

int64_t ModelConfig::blocks(int level) const {
  const auto& b = block_grid[level];
  return static_cast<int64_t>(b[0]) * b[1] * b[2];
}

int64_t ModelConfig::tokens_per_block(int level) const {
  return num_patches(level) / blocks(level);
}

int ModelConfig::upsample_stages() const { return ilog2(patch_size[0]); }

std::vector<std::string> ModelConfig::validate() const {
  std::vector<std::string> errs;
  auto err = [&](const std::string& s) { errs.push_back(s); };

  if (in_channels < 1) err("in_channels must be >= 1");
  if (num_classes < 2) err("num_classes must be >= 2");
  if (stem_channels < 1) err("stem_channels must be >= 1");
  if (mlp_ratio < 1) err("mlp_ratio must be >= 1");
  if (embed_dims.size() != kLevels) err("embed_dims must have exactly 3 levels");
  if (num_heads.size() != kLevels) err("num_heads must have exactly 3 levels");
  if (depths.size() != kLevels) err("depths must have exactly 3 levels");
  if (block_grid.size() != kLevels) err("block_grid must have exactly 3 levels");
  if (!errs.empty()) return errs;  // level-indexed checks below need the sizes

  for (int a = 0; a < 3; ++a) {
    if (crop_size[a] < 1 || patch_size[a] < 1) {
      err("crop_size and patch_size must be positive");
      return errs;
    }
    if (crop_size[a] % patch_size[a] != 0)
      err("crop_size[" + std::to_string(a) + "]=" + std::to_string(crop_size[a]) +
          " not divisible by patch_size " + std::to_string(patch_size[a]));
    if (!is_pow2(patch_size[a]))
      err("patch_size[" + std::to_string(a) +
          "] must be a power of two (decoder doubles resolution per stage)");
  }
  if (patch_size[1] != patch_size[0] || patch_size[2] != patch_size[0])
    err("anisotropic patch sizes are not supported");
  if (!errs.empty()) return errs;

  for (int l = 0; l < kLevels; ++l) {
    if (embed_dims[l] < 1) err("embed_dims must be positive");
    if (depths[l] < 1) err("depths must be >= 1");
    if (num_heads[l] < 1 || embed_dims[l] % num_heads[l] != 0)
      err("embed_dims[" + std::to_string(l) + "] not divisible by num_heads");
    auto g = grid(l);
    const auto& bg = block_grid[l];
    for (int a = 0; a < 3; ++a) {
      if (bg[a] < 1 || g[a] % bg[a] != 0)
        err("level " + std::to_string(l) + ": grid extent " + std::to_string(g[a]) +
            " not divisible by block_grid " + std::to_string(bg[a]));
      if (l + 1 < kLevels) {
        if (g[a] % 2 != 0)
          err("level " + std::to_string(l) + ": odd grid extent " +
              std::to_string(g[a]) + " cannot be halved");
        if (block_grid[l + 1][a] * 2 != bg[a])
          err("block_grid must halve per axis each level");
      }
    }
  }
  if (block_grid[kLevels - 1] != std::array<int, 3>{1, 1, 1})
    err("block count must reduce to 1 at the deepest level");

  size_t want = 2 + static_cast<size_t>(std::max(1, upsample_stages())) + 1;
  if (decoder_channels.size() != want)
    err("decoder_channels needs " + std::to_string(want) + " entries for this patch size, got " +
        std::to_string(decoder_channels.size()));
  else if (decoder_channels.back() != kDecoderOutChannels)
    err("decoder_channels must end at 32");
  for (int c : decoder_channels)
    if (c < 1) err("decoder_channels must be positive");
  return errs;
}

void ModelConfig::validate_or_throw() const {
  auto errs = validate();
  if (errs.empty()) return;
  std::string msg = "invalid model config:";
  for (const auto& e : errs) msg += "\n  - " + e;
  throw std::invalid_argument(msg);
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j;
  j["in_channels"] = in_channels;
  j["patch_size"] = patch_size;
  j["crop_size"] = crop_size;
  j["embed_dims"] = embed_dims;
  j["num_heads"] = num_heads;
  j["depths"] = depths;
  j["block_grid"] = block_grid;
  j["mlp_ratio"] = mlp_ratio;
  j["stem_channels"] = stem_channels;
  j["decoder_channels"] = decoder_channels;
  j["num_classes"] = num_classes;
  j["icv_heads_enabled"] = icv_heads_enabled;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  if (j.contains("patch_size")) c.patch_size = j["patch_size"];
  if (j.contains("crop_size")) c.crop_size = j["crop_size"];
  if (j.contains("embed_dims")) c.embed_dims = j["embed_dims"].get<std::vector<int>>();
  if (j.contains("num_heads")) c.num_heads = j["num_heads"].get<std::vector<int>>();
  if (j.contains("depths")) c.depths = j["depths"].get<std::vector<int>>();
  if (j.contains("block_grid"))
    c.block_grid = j["block_grid"].get<std::vector<std::array<int, 3>>>();
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.stem_channels = j.value("stem_channels", c.stem_channels);
  if (j.contains("decoder_channels"))
    c.decoder_channels = j["decoder_channels"].get<std::vector<int>>();
  c.num_classes = j.value("num_classes", c.num_classes);
  c.icv_heads_enabled = j.value("icv_heads_enabled", c.icv_heads_enabled);
  return c;
}

bool ModelConfig::same_backbone(const ModelConfig& o) const {
  ModelConfig a = *this, b = o;
  a.icv_heads_enabled = b.icv_heads_enabled = false;
  return a.to_json() == b.to_json();
}

ModelConfig ModelConfig::defaults() { return ModelConfig{}; }

ModelConfig ModelConfig::toy(int num_classes) {
  ModelConfig c;
  c.patch_size = {2, 2, 2};
  c.crop_size = {32, 32, 32};
  c.embed_dims = {8, 16, 32};
  c.num_heads = {2, 4, 8};
  c.depths = {1, 1, 2};
  c.mlp_ratio = 2;
  c.stem_channels = 8;
  c.decoder_channels = {16, 8, 8, 32};
  c.num_classes = num_classes;
  return c;
}

ModelConfig ModelConfig::tiny(int num_classes) {
  ModelConfig c;
  c.patch_size = {1, 1, 1};
  c.crop_size = {8, 8, 8};
  c.embed_dims = {4, 4, 8};
  c.num_heads = {1, 1, 2};
  c.depths = {1, 1, 1};
  c.mlp_ratio = 2;
  c.stem_channels = 4;
  c.decoder_channels = {8, 8, 8, 32};
  c.num_classes = num_classes;
  return c;
}

}  // namespace nestseg
