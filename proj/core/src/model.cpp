#include "nestseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <stdexcept>

namespace nestseg {

namespace fs = std::filesystem;
using ad::Var;

uint64_t fnv1a64(const void* data, size_t n) {
  const uint8_t* p = static_cast<const uint8_t*>(data);
  uint64_t h = 1469598103934665603ull;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::vector<int64_t> blockify_index(const std::array<int64_t, 3>& grid,
                                    const std::array<int, 3>& block_grid) {
  std::array<int64_t, 3> b = {block_grid[0], block_grid[1], block_grid[2]};
  for (int a = 0; a < 3; ++a)
    if (b[a] < 1 || grid[a] % b[a] != 0)
      throw std::invalid_argument("blockify: grid extent " + std::to_string(grid[a]) +
                                  " not divisible by block count " + std::to_string(b[a]));
  std::array<int64_t, 3> p = {grid[0] / b[0], grid[1] / b[1], grid[2] / b[2]};
  std::vector<int64_t> idx(grid[0] * grid[1] * grid[2]);
  int64_t r = 0;
  for (int64_t bx = 0; bx < b[0]; ++bx)
    for (int64_t by = 0; by < b[1]; ++by)
      for (int64_t bz = 0; bz < b[2]; ++bz)
        for (int64_t ox = 0; ox < p[0]; ++ox)
          for (int64_t oy = 0; oy < p[1]; ++oy)
            for (int64_t oz = 0; oz < p[2]; ++oz, ++r)
              idx[r] = ((bx * p[0] + ox) * grid[1] + (by * p[1] + oy)) * grid[2] +
                       (bz * p[2] + oz);
  return idx;
}

std::vector<int64_t> invert_index(const std::vector<int64_t>& idx) {
  std::vector<int64_t> inv(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) inv[idx[i]] = static_cast<int64_t>(i);
  return inv;
}

namespace {

Tensor trunc_normal(std::vector<int64_t> shape, std::mt19937_64& rng, double std) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> d(0.0, std);
  for (int64_t i = 0; i < t.numel(); ++i) {
    double v = d(rng);
    while (std::abs(v) > 2 * std) v = d(rng);
    t[i] = v;
  }
  return t;
}

}  // namespace

Var NestModel::add_param(const std::string& name, Tensor t) {
  Var v = ad::leaf(std::move(t));
  params_.emplace_back(name, v);
  by_name_[name] = v;
  return v;
}

NestModel::NestModel(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate_or_throw();
  std::mt19937_64 rng(seed);
  const double kStd = 0.02;
  auto w = [&](const std::string& n, std::vector<int64_t> s) {
    return add_param(n, trunc_normal(std::move(s), rng, kStd));
  };
  auto zeros = [&](const std::string& n, std::vector<int64_t> s) {
    return add_param(n, Tensor::zeros(std::move(s)));
  };
  auto ones = [&](const std::string& n, std::vector<int64_t> s) {
    return add_param(n, Tensor::full(std::move(s), 1.0));
  };

  int64_t P = cfg_.patch_size[0];
  int64_t S = cfg_.stem_channels;
  int64_t Cin = cfg_.in_channels;
  w("stem.w", {S, Cin, 3, 3, 3});
  zeros("stem.b", {S});
  w("patch_embed.w", {Cin * P * P * P, cfg_.embed_dims[0]});
  zeros("patch_embed.b", {cfg_.embed_dims[0]});
  w("pos_embed", {cfg_.num_patches(0), cfg_.embed_dims[0]});

  for (int l = 0; l < ModelConfig::kLevels; ++l) {
    int64_t C = cfg_.embed_dims[l];
    for (int d = 0; d < cfg_.depths[l]; ++d) {
      std::string pre = "enc" + std::to_string(l) + ".blk" + std::to_string(d) + ".";
      ones(pre + "ln1.g", {C});
      zeros(pre + "ln1.b", {C});
      for (const char* nm : {"q", "k", "v"}) {
        w(pre + "attn." + nm + ".w", {C, C});
        zeros(pre + "attn." + std::string(nm) + ".b", {C});
      }
      w(pre + "attn.proj.w", {C, C});
      zeros(pre + "attn.proj.b", {C});
      ones(pre + "ln2.g", {C});
      zeros(pre + "ln2.b", {C});
      w(pre + "mlp.fc1.w", {C, cfg_.mlp_ratio * C});
      zeros(pre + "mlp.fc1.b", {cfg_.mlp_ratio * C});
      w(pre + "mlp.fc2.w", {cfg_.mlp_ratio * C, C});
      zeros(pre + "mlp.fc2.b", {C});
    }
    if (l + 1 < ModelConfig::kLevels) {
      std::string pre = "agg" + std::to_string(l) + ".";
      int64_t Cn = cfg_.embed_dims[l + 1];
      w(pre + "conv.w", {Cn, C, 3, 3, 3});
      zeros(pre + "conv.b", {Cn});
      ones(pre + "norm.g", {Cn});
      zeros(pre + "norm.b", {Cn});
    }
  }

  // decoder stages: level-1 merge, level-0 merge, expansion to crop
  // resolution (stem concatenated at full resolution), then 1x1 projection
  int stages = 2 + std::max(1, cfg_.upsample_stages());
  int64_t in_ch = cfg_.embed_dims[2];
  for (int s = 0; s < stages; ++s) {
    int64_t skip = 0;
    if (s == 0) skip = cfg_.embed_dims[1];
    else if (s == 1) skip = cfg_.embed_dims[0];
    else if (s == stages - 1) skip = S;
    int64_t out_ch = cfg_.decoder_channels[s];
    std::string pre = "dec" + std::to_string(s) + ".";
    w(pre + "conv.w", {out_ch, in_ch + skip, 3, 3, 3});
    zeros(pre + "conv.b", {out_ch});
    in_ch = out_ch;
  }
  w("dec.proj.w", {ModelConfig::kDecoderOutChannels, in_ch});
  zeros("dec.proj.b", {ModelConfig::kDecoderOutChannels});

  w("head.brain.w", {cfg_.num_classes, ModelConfig::kDecoderOutChannels});
  zeros("head.brain.b", {cfg_.num_classes});
  if (cfg_.icv_heads_enabled) {
    // fresh heads last so backbone init is reproducible across head settings
    w("head.ticv.w", {1, ModelConfig::kDecoderOutChannels});
    zeros("head.ticv.b", {1});
    w("head.pfv.w", {1, ModelConfig::kDecoderOutChannels});
    zeros("head.pfv.b", {1});
  }

  for (int l = 0; l < ModelConfig::kLevels; ++l) {
    auto idx = std::make_shared<std::vector<int64_t>>(
        blockify_index(cfg_.grid(l), cfg_.block_grid[l]));
    unblock_idx_[l] = std::make_shared<const std::vector<int64_t>>(invert_index(*idx));
    block_idx_[l] = std::move(idx);
  }
}

Var NestModel::param(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::out_of_range("no parameter named " + name);
  return it->second;
}

int64_t NestModel::num_parameters() const {
  int64_t n = 0;
  for (const auto& [_, v] : params_) n += v->value.numel();
  return n;
}

void NestModel::zero_grad() {
  for (auto& [_, v] : params_) v->grad = Tensor();
}

Var NestModel::tokens_to_grid(const Var& tokens, const std::array<int64_t, 3>& g) const {
  int64_t C = tokens->value.dim(1);
  return ad::reshape(ad::permute(tokens, {1, 0}), {C, g[0], g[1], g[2]});
}

Var NestModel::grid_to_tokens(const Var& grid_feat) const {
  int64_t C = grid_feat->value.dim(0);
  int64_t N = grid_feat->value.numel() / C;
  return ad::permute(ad::reshape(grid_feat, {C, N}), {1, 0});
}

Var NestModel::patch_embed(const Tensor& crop) const {
  const auto& cs = cfg_.crop_size;
  if (crop.rank() != 4 || crop.dim(0) != cfg_.in_channels || crop.dim(1) != cs[0] ||
      crop.dim(2) != cs[1] || crop.dim(3) != cs[2])
    throw std::invalid_argument("patch_embed: crop shape " + crop.shape_str() +
                                " does not match config crop size");
  int64_t P = cfg_.patch_size[0];
  auto g = cfg_.grid(0);
  int64_t Cin = cfg_.in_channels;
  int64_t K = Cin * P * P * P;
  Tensor patches({cfg_.num_patches(0), K});
  int64_t X = cs[0], Y = cs[1], Z = cs[2];
  int64_t r = 0;
  for (int64_t ix = 0; ix < g[0]; ++ix)
    for (int64_t iy = 0; iy < g[1]; ++iy)
      for (int64_t iz = 0; iz < g[2]; ++iz, ++r) {
        double* row = patches.data() + r * K;
        int64_t j = 0;
        for (int64_t c = 0; c < Cin; ++c)
          for (int64_t px = 0; px < P; ++px)
            for (int64_t py = 0; py < P; ++py)
              for (int64_t pz = 0; pz < P; ++pz, ++j)
                row[j] = crop[((c * X + ix * P + px) * Y + iy * P + py) * Z + iz * P + pz];
      }
  Var tokens = ad::add_rowbias(ad::matmul(ad::constant(std::move(patches)),
                                          param("patch_embed.w")),
                               param("patch_embed.b"));
  return ad::add(tokens, param("pos_embed"));
}

BlockedSequence NestModel::blockify(const Var& tokens, int level) const {
  auto g = cfg_.grid(level);
  if (tokens->value.rank() != 2 || tokens->value.dim(0) != g[0] * g[1] * g[2])
    throw std::invalid_argument("blockify: token count does not match level grid");
  int64_t T = cfg_.blocks(level);
  int64_t n = cfg_.tokens_per_block(level);
  int64_t C = tokens->value.dim(1);
  BlockedSequence seq;
  seq.data = ad::reshape(ad::gather_rows(tokens, block_idx_[level]), {T, n, C});
  seq.level = level;
  seq.grid = g;
  return seq;
}

Var NestModel::deblockify(const BlockedSequence& seq) const {
  int64_t N = seq.blocks() * seq.tokens_per_block();
  auto g = cfg_.grid(seq.level);
  if (N != g[0] * g[1] * g[2])
    throw std::invalid_argument("deblockify: sequence inconsistent with level grid");
  return ad::gather_rows(ad::reshape(seq.data, {N, seq.channels()}),
                         unblock_idx_[seq.level]);
}

BlockedSequence NestModel::transformer_block(const BlockedSequence& seq, int depth) const {
  int l = seq.level;
  int64_t T = seq.blocks(), n = seq.tokens_per_block(), C = seq.channels();
  int64_t H = cfg_.num_heads[l];
  if (C % H != 0)
    throw std::invalid_argument("transformer_block: channels not divisible by heads");
  int64_t hd = C / H;
  std::string pre = "enc" + std::to_string(l) + ".blk" + std::to_string(depth) + ".";

  Var x = ad::reshape(seq.data, {T * n, C});
  Var h = ad::layernorm_lastdim(x, param(pre + "ln1.g"), param(pre + "ln1.b"));
  auto heads = [&](const char* nm) {
    Var y = ad::add_rowbias(ad::matmul(h, param(pre + "attn." + std::string(nm) + ".w")),
                            param(pre + "attn." + std::string(nm) + ".b"));
    return ad::reshape(ad::permute(ad::reshape(y, {T, n, H, hd}), {0, 2, 1, 3}),
                       {T * H, n, hd});
  };
  Var q = heads("q"), k = heads("k"), v = heads("v");
  Var att = ad::softmax_lastdim(ad::scale(ad::bmm_nt(q, k), 1.0 / std::sqrt(double(hd))));
  Var o = ad::bmm(att, v);
  o = ad::reshape(ad::permute(ad::reshape(o, {T, H, n, hd}), {0, 2, 1, 3}), {T * n, C});
  o = ad::add_rowbias(ad::matmul(o, param(pre + "attn.proj.w")),
                      param(pre + "attn.proj.b"));
  x = ad::add(x, o);

  Var h2 = ad::layernorm_lastdim(x, param(pre + "ln2.g"), param(pre + "ln2.b"));
  Var m = ad::add_rowbias(ad::matmul(h2, param(pre + "mlp.fc1.w")),
                          param(pre + "mlp.fc1.b"));
  m = ad::add_rowbias(ad::matmul(ad::gelu(m), param(pre + "mlp.fc2.w")),
                      param(pre + "mlp.fc2.b"));
  x = ad::add(x, m);

  BlockedSequence out;
  out.data = ad::reshape(x, {T, n, C});
  out.level = l;
  out.grid = seq.grid;
  return out;
}

Var NestModel::aggregate_downsample(const Var& grid_feat, int level) const {
  for (int a = 1; a < 4; ++a)
    if (grid_feat->value.dim(a) % 2 != 0)
      throw std::invalid_argument("aggregate_downsample: odd grid extent");
  std::string pre = "agg" + std::to_string(level) + ".";
  Var h = ad::conv3d(grid_feat, param(pre + "conv.w"), param(pre + "conv.b"), 1);
  // per-voxel normalization over channels
  std::array<int64_t, 3> g = {h->value.dim(1), h->value.dim(2), h->value.dim(3)};
  Var t = grid_to_tokens(h);
  t = ad::layernorm_lastdim(t, param(pre + "norm.g"), param(pre + "norm.b"));
  return ad::maxpool2(tokens_to_grid(t, g));
}

HierarchyFeatures NestModel::encode(const Tensor& crop) const {
  HierarchyFeatures feats;
  Var x = ad::constant(crop);
  feats.stem = ad::gelu(ad::conv3d(x, param("stem.w"), param("stem.b"), 1));
  Var tokens = patch_embed(crop);
  for (int l = 0; l < ModelConfig::kLevels; ++l) {
    BlockedSequence seq = blockify(tokens, l);
    for (int d = 0; d < cfg_.depths[l]; ++d) seq = transformer_block(seq, d);
    tokens = deblockify(seq);
    feats.levels[l] = tokens_to_grid(tokens, cfg_.grid(l));
    if (l + 1 < ModelConfig::kLevels) {
      Var down = aggregate_downsample(feats.levels[l], l);
      tokens = grid_to_tokens(down);
    }
  }
  return feats;
}

Var NestModel::decode(const HierarchyFeatures& feats) const {
  if (!feats.stem)
    throw std::invalid_argument("decode: missing stem feature");
  for (int l = 0; l < ModelConfig::kLevels; ++l)
    if (!feats.levels[l])
      throw std::invalid_argument("decode: missing level " + std::to_string(l) +
                                  " feature");
  int stages = 2 + std::max(1, cfg_.upsample_stages());
  Var d = feats.levels[2];
  for (int s = 0; s < stages; ++s) {
    if (s == 0) {
      d = ad::concat0(ad::upsample_nearest2(d), feats.levels[1]);
    } else if (s == 1) {
      d = ad::concat0(ad::upsample_nearest2(d), feats.levels[0]);
    } else {
      if (cfg_.upsample_stages() > 0) d = ad::upsample_nearest2(d);
      if (s == stages - 1) d = ad::concat0(d, feats.stem);
    }
    std::string pre = "dec" + std::to_string(s) + ".";
    d = ad::gelu(ad::conv3d(d, param(pre + "conv.w"), param(pre + "conv.b"), 1));
  }
  return ad::conv1x1(d, param("dec.proj.w"), param("dec.proj.b"));
}

ModelOutput NestModel::forward(const Tensor& crop, bool finetune_mode) const {
  if (finetune_mode && !cfg_.icv_heads_enabled)
    throw std::invalid_argument(
        "forward: finetune mode requires icv_heads_enabled in the model config");
  HierarchyFeatures feats = encode(crop);
  Var f32 = decode(feats);
  ModelOutput out;
  out.brain_logits = ad::conv1x1(f32, param("head.brain.w"), param("head.brain.b"));
  if (finetune_mode) {
    out.ticv_logit = ad::conv1x1(f32, param("head.ticv.w"), param("head.ticv.b"));
    out.pfv_logit = ad::conv1x1(f32, param("head.pfv.w"), param("head.pfv.b"));
  }
  return out;
}

// ---------------- checkpoints ----------------

void NestModel::save_checkpoint(const std::string& dir, int64_t iteration,
                                const std::string& stage, bool skull_stripped) const {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format_version"] = 1;
  manifest["config"] = cfg_.to_json();
  manifest["iteration"] = iteration;
  manifest["stage"] = stage;
  manifest["skull_stripped"] = skull_stripped;
  manifest["total_parameters"] = num_parameters();

  std::ofstream blob(fs::path(dir) / "params.bin", std::ios::binary);
  if (!blob) throw std::runtime_error("cannot write checkpoint blob in " + dir);
  auto& plist = manifest["params"] = nlohmann::json::array();
  int64_t offset = 0;
  uint64_t all_hash = 1469598103934665603ull;
  for (const auto& [name, v] : params_) {
    size_t bytes = v->value.numel() * sizeof(double);
    blob.write(reinterpret_cast<const char*>(v->value.data()), bytes);
    uint64_t h = fnv1a64(v->value.data(), bytes);
    all_hash ^= h;
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    plist.push_back({{"name", name},
                     {"shape", v->value.shape()},
                     {"offset", offset},
                     {"fnv1a64", hex}});
    offset += static_cast<int64_t>(bytes);
  }
  blob.close();
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(all_hash));
  manifest["blob_checksum"] = hex;
  std::ofstream mf(fs::path(dir) / "manifest.json");
  mf << manifest.dump(2) << "\n";
}

nlohmann::json NestModel::read_manifest(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("no checkpoint manifest in " + dir);
  nlohmann::json manifest;
  mf >> manifest;
  if (manifest.value("format_version", 0) != 1)
    throw std::runtime_error("unsupported checkpoint format in " + dir);
  return manifest;
}

ModelConfig NestModel::peek_config(const std::string& dir) {
  return ModelConfig::from_json(read_manifest(dir)["config"]);
}

namespace {

std::vector<double> read_blob(const std::string& dir) {
  std::ifstream blob(fs::path(dir) / "params.bin", std::ios::binary | std::ios::ate);
  if (!blob) throw std::runtime_error("no checkpoint blob in " + dir);
  std::streamsize bytes = blob.tellg();
  blob.seekg(0);
  std::vector<double> buf(bytes / sizeof(double));
  blob.read(reinterpret_cast<char*>(buf.data()), bytes);
  return buf;
}

}  // namespace

NestModel NestModel::load_checkpoint(const std::string& dir) {
  nlohmann::json manifest = read_manifest(dir);
  NestModel model(ModelConfig::from_json(manifest["config"]), 0);
  std::vector<double> blob = read_blob(dir);
  for (const auto& p : manifest["params"]) {
    std::string name = p["name"];
    auto shape = p["shape"].get<std::vector<int64_t>>();
    int64_t offset = p["offset"].get<int64_t>() / static_cast<int64_t>(sizeof(double));
    Var v = model.param(name);
    if (v->value.shape() != shape)
      throw std::runtime_error("checkpoint parameter " + name + " has shape mismatch");
    int64_t n = v->value.numel();
    if (offset + n > static_cast<int64_t>(blob.size()))
      throw std::runtime_error("checkpoint blob truncated at " + name);
    std::copy(blob.begin() + offset, blob.begin() + offset + n, v->value.data());
  }
  return model;
}

NestModel NestModel::load_pretrained_into_finetune(const std::string& pretrain_dir,
                                                   const ModelConfig& finetune_cfg,
                                                   uint64_t seed) {
  nlohmann::json manifest = read_manifest(pretrain_dir);
  ModelConfig pre_cfg = ModelConfig::from_json(manifest["config"]);
  if (!finetune_cfg.icv_heads_enabled)
    throw std::invalid_argument("finetune config must enable the icv heads");
  if (!pre_cfg.same_backbone(finetune_cfg))
    throw std::runtime_error(
        "pretrain checkpoint architecture does not match the finetune config");

  NestModel model(finetune_cfg, seed);
  std::vector<double> blob = read_blob(pretrain_dir);
  std::set<std::string> copied;
  for (const auto& p : manifest["params"]) {
    std::string name = p["name"];
    auto shape = p["shape"].get<std::vector<int64_t>>();
    Var v = model.param(name);  // throws if the finetune model lacks it
    if (v->value.shape() != shape)
      throw std::runtime_error("shared parameter " + name + " has shape mismatch");
    int64_t offset = p["offset"].get<int64_t>() / static_cast<int64_t>(sizeof(double));
    std::copy(blob.begin() + offset, blob.begin() + offset + v->value.numel(),
              v->value.data());
    copied.insert(name);
  }
  static const std::set<std::string> kNewHeads = {"head.ticv.w", "head.ticv.b",
                                                  "head.pfv.w", "head.pfv.b"};
  for (const auto& [name, _] : model.parameters())
    if (!copied.count(name) && !kNewHeads.count(name))
      throw std::runtime_error("parameter " + name +
                               " missing from the pretrain checkpoint");
  return model;
}

}  // namespace nestseg
