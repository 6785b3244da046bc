#include "nestseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "nestseg/evaluation.hpp"
#include "nestseg/inference.hpp"

namespace nestseg {

namespace fs = std::filesystem;
using ad::Var;
using nlohmann::json;

TrainConfig TrainConfig::pretrain_defaults() {
  TrainConfig c;
  c.stage = "pretrain";
  c.model = ModelConfig::defaults();
  c.base_lr = 1e-4;
  c.total_iterations = 200000;
  return c;
}

TrainConfig TrainConfig::finetune_defaults() {
  TrainConfig c;
  c.stage = "finetune";
  c.model = ModelConfig::defaults();
  c.model.icv_heads_enabled = true;
  c.base_lr = 1e-5;
  c.total_iterations = 25000;
  return c;
}

std::vector<std::string> TrainConfig::validate() const {
  std::vector<std::string> errs = model.validate();
  if (stage != "pretrain" && stage != "finetune")
    errs.push_back("stage must be 'pretrain' or 'finetune'");
  if (stage == "finetune" && !model.icv_heads_enabled)
    errs.push_back("finetune stage requires model.icv_heads_enabled");
  if (stage == "pretrain" && model.icv_heads_enabled)
    errs.push_back("pretrain stage must not enable icv heads");
  if (!(base_lr > 0)) errs.push_back("base_lr must be positive");
  if (weight_decay < 0) errs.push_back("weight_decay must be non-negative");
  if (total_iterations <= 0) errs.push_back("total_iterations must be positive");
  if (batch_size < 1) errs.push_back("batch_size must be >= 1");
  if (validation_interval <= 0) errs.push_back("validation_interval must be positive");
  if (log_interval <= 0) errs.push_back("log_interval must be positive");
  if (loss_weights.switch_iteration < 0)
    errs.push_back("loss switch_iteration must be non-negative");
  return errs;
}

std::vector<std::string> augmentation_pipeline() { return {"random_crop"}; }

json TrainConfig::to_json() const {
  return json{{"stage", stage},
              {"model", model.to_json()},
              {"base_lr", base_lr},
              {"weight_decay", weight_decay},
              {"total_iterations", total_iterations},
              {"batch_size", batch_size},
              {"seed", seed},
              {"validation_interval", validation_interval},
              {"log_interval", log_interval},
              {"loss_weights",
               {{"pre_switch", {loss_weights.pre_switch.first, loss_weights.pre_switch.second}},
                {"post_switch", {loss_weights.post_switch.first, loss_weights.post_switch.second}},
                {"switch_iteration", loss_weights.switch_iteration}}},
              {"include_background", include_background},
              {"adam_beta1", adam_beta1},
              {"adam_beta2", adam_beta2},
              {"adam_eps", adam_eps},
              {"dataset_dir", dataset_dir},
              {"output_dir", output_dir},
              {"pretrain_checkpoint", pretrain_checkpoint}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.stage = j.at("stage");
  c.model = ModelConfig::from_json(j.at("model"));
  c.base_lr = j.at("base_lr");
  c.weight_decay = j.at("weight_decay");
  c.total_iterations = j.at("total_iterations");
  c.batch_size = j.at("batch_size");
  c.seed = j.at("seed");
  c.validation_interval = j.at("validation_interval");
  c.log_interval = j.at("log_interval");
  const auto& w = j.at("loss_weights");
  c.loss_weights.pre_switch = {w.at("pre_switch")[0], w.at("pre_switch")[1]};
  c.loss_weights.post_switch = {w.at("post_switch")[0], w.at("post_switch")[1]};
  c.loss_weights.switch_iteration = w.at("switch_iteration");
  c.include_background = j.at("include_background");
  c.adam_beta1 = j.at("adam_beta1");
  c.adam_beta2 = j.at("adam_beta2");
  c.adam_eps = j.at("adam_eps");
  c.dataset_dir = j.at("dataset_dir");
  c.output_dir = j.at("output_dir");
  c.pretrain_checkpoint = j.at("pretrain_checkpoint");
  return c;
}

Subject Subject::load(const std::string& dir, const std::string& id) {
  fs::path base = fs::path(dir) / id;
  Subject s;
  s.id = id;
  s.volume = load_volume((base / "t1.nii.gz").string());
  s.labels = load_label_map((base / "labels.nii.gz").string(),
                            LabelProtocol::braincolor());
  if (fs::exists(base / "ticv.nii.gz"))
    s.ticv = load_mask((base / "ticv.nii.gz").string(), IcvStructure::kTicv);
  if (fs::exists(base / "pfv.nii.gz"))
    s.pfv = load_mask((base / "pfv.nii.gz").string(), IcvStructure::kPfv);
  return s;
}

CropSample random_crop(const Subject& s, const std::array<int, 3>& crop,
                       std::mt19937_64& rng) {
  std::array<int64_t, 3> vshape{s.volume.nx, s.volume.ny, s.volume.nz};
  std::array<int64_t, 3> start{};
  for (int a = 0; a < 3; ++a) {
    if (vshape[a] >= crop[a]) {
      std::uniform_int_distribution<int64_t> d(0, vshape[a] - crop[a]);
      start[a] = d(rng);
    } else {
      start[a] = -((crop[a] - vshape[a]) / 2);  // symmetric zero padding
    }
  }

  const int64_t cx = crop[0], cy = crop[1], cz = crop[2];
  CropSample out;
  out.corner = start;
  out.image = Tensor({s.volume.nc, cx, cy, cz});
  out.labels.assign(static_cast<size_t>(cx * cy * cz), 0);
  bool has_masks = !s.ticv.data.empty();
  if (has_masks) {
    out.ticv = Tensor::zeros({1, cx, cy, cz});
    out.pfv = Tensor::zeros({1, cx, cy, cz});
  }

  int64_t i = 0;
  for (int64_t x = 0; x < cx; ++x)
    for (int64_t y = 0; y < cy; ++y)
      for (int64_t z = 0; z < cz; ++z, ++i) {
        int64_t sx = start[0] + x, sy = start[1] + y, sz = start[2] + z;
        bool in = sx >= 0 && sx < vshape[0] && sy >= 0 && sy < vshape[1] &&
                  sz >= 0 && sz < vshape[2];
        for (int64_t c = 0; c < s.volume.nc; ++c)
          out.image[c * cx * cy * cz + i] = in ? s.volume.at(c, sx, sy, sz) : 0.0;
        if (!in) continue;
        out.labels[i] = s.labels.at(sx, sy, sz);
        if (has_masks) {
          out.ticv[i] = s.ticv.at(sx, sy, sz);
          out.pfv[i] = s.pfv.at(sx, sy, sz);
        }
      }
  return out;
}

double cosine_lr(int64_t iteration, double base_lr, int64_t total_iterations) {
  if (iteration < 0 || iteration > total_iterations)
    throw std::out_of_range("cosine_lr: iteration outside [0, total]");
  return base_lr * (1.0 + std::cos(M_PI * iteration / total_iterations)) / 2.0;
}

AdamW::AdamW(std::vector<ad::Var> params, double beta1, double beta2,
             double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.push_back(Tensor::zeros(p->value.shape()));
    v_.push_back(Tensor::zeros(p->value.shape()));
  }
}

void AdamW::step(double lr, double weight_decay) {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, t_);
  double bc2 = 1.0 - std::pow(beta2_, t_);
  for (size_t k = 0; k < params_.size(); ++k) {
    Var p = params_[k];
    const bool has_grad = p->grad.defined();
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      double g = has_grad ? p->grad[i] : 0.0;
      m_[k][i] = beta1_ * m_[k][i] + (1 - beta1_) * g;
      v_[k][i] = beta2_ * v_[k][i] + (1 - beta2_) * g * g;
      double mhat = m_[k][i] / bc1;
      double vhat = v_[k][i] / bc2;
      // decoupled decay, scaled by lr so lr=0 is an exact null step
      p->value[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) +
                           weight_decay * p->value[i]);
    }
  }
}

void AdamW::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  int64_t n = static_cast<int64_t>(params_.size());
  out.write(reinterpret_cast<const char*>(&t_), sizeof(t_));
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  for (size_t k = 0; k < params_.size(); ++k) {
    int64_t c = m_[k].numel();
    out.write(reinterpret_cast<const char*>(&c), sizeof(c));
    out.write(reinterpret_cast<const char*>(m_[k].data()), c * sizeof(double));
    out.write(reinterpret_cast<const char*>(v_[k].data()), c * sizeof(double));
  }
  if (!out) throw std::runtime_error("AdamW::save: write failed");
}

void AdamW::load(const std::string& path, std::vector<ad::Var> params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("AdamW::load: cannot open " + path);
  params_ = std::move(params);
  m_.clear();
  v_.clear();
  int64_t n = 0;
  in.read(reinterpret_cast<char*>(&t_), sizeof(t_));
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (n != static_cast<int64_t>(params_.size()))
    throw std::runtime_error("AdamW::load: parameter count mismatch");
  for (int64_t k = 0; k < n; ++k) {
    int64_t c = 0;
    in.read(reinterpret_cast<char*>(&c), sizeof(c));
    if (c != params_[k]->value.numel())
      throw std::runtime_error("AdamW::load: moment size mismatch");
    Tensor m(params_[k]->value.shape()), v(params_[k]->value.shape());
    in.read(reinterpret_cast<char*>(m.data()), c * sizeof(double));
    in.read(reinterpret_cast<char*>(v.data()), c * sizeof(double));
    m_.push_back(std::move(m));
    v_.push_back(std::move(v));
  }
  if (!in) throw std::runtime_error("AdamW::load: truncated file");
}

namespace {

std::vector<Var> param_vars(const NestModel& model) {
  std::vector<Var> out;
  for (const auto& [name, v] : model.parameters()) out.push_back(v);
  return out;
}

NestModel build_model(const TrainConfig& cfg) {
  if (cfg.stage == "finetune") {
    if (cfg.pretrain_checkpoint.empty())
      throw std::invalid_argument("finetune requires a pretrain checkpoint");
    return NestModel::load_pretrained_into_finetune(cfg.pretrain_checkpoint,
                                                    cfg.model, cfg.seed);
  }
  return NestModel(cfg.model, cfg.seed);
}

}  // namespace

TrainState init_train_state(const TrainConfig& cfg) {
  auto errs = cfg.validate();
  if (!errs.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& e : errs) msg += "\n  - " + e;
    throw std::invalid_argument(msg);
  }
  NestModel model = build_model(cfg);
  AdamW opt(param_vars(model), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  return TrainState{cfg, std::move(model), std::move(opt),
                    std::mt19937_64(cfg.seed), 0, -1.0, -1};
}

void save_train_state(const TrainState& state, const std::string& dir) {
  fs::create_directories(dir);
  state.model.save_checkpoint((fs::path(dir) / "model").string(),
                              state.iteration, state.cfg.stage);
  state.opt.save((fs::path(dir) / "optimizer.bin").string());
  std::ostringstream rng_ss;
  rng_ss << state.rng;
  json j{{"config", state.cfg.to_json()},
         {"iteration", state.iteration},
         {"best_brain_dsc", state.best_brain_dsc},
         {"best_iteration", state.best_iteration},
         {"rng", rng_ss.str()}};
  std::ofstream out(fs::path(dir) / "state.json");
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("save_train_state: write failed");
}

TrainState load_train_state(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "state.json");
  if (!in) throw std::runtime_error("load_train_state: no state.json in " + dir);
  json j = json::parse(in);
  TrainConfig cfg = TrainConfig::from_json(j.at("config"));
  NestModel model = NestModel::load_checkpoint((fs::path(dir) / "model").string());
  AdamW opt;
  opt.load((fs::path(dir) / "optimizer.bin").string(), param_vars(model));
  std::mt19937_64 rng;
  std::istringstream rng_ss(j.at("rng").get<std::string>());
  rng_ss >> rng;
  return TrainState{std::move(cfg), std::move(model), std::move(opt),
                    std::move(rng), j.at("iteration"), j.at("best_brain_dsc"),
                    j.at("best_iteration")};
}

LossBreakdown train_step(TrainState& state, const std::vector<CropSample>& batch) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  const TrainConfig& cfg = state.cfg;
  const bool finetune = cfg.stage == "finetune";
  const int C = cfg.model.num_classes;

  state.model.zero_grad();
  Var total;
  LossBreakdown bd;
  for (const auto& sample : batch) {
    Tensor onehot = one_hot(sample.labels.data(),
                            static_cast<int64_t>(sample.labels.size()), C)
                        .reshaped({C, cfg.model.crop_size[0],
                                   cfg.model.crop_size[1], cfg.model.crop_size[2]});
    ModelOutput out = state.model.forward(sample.image, finetune);
    Var item_loss;
    if (finetune) {
      if (!sample.ticv.defined() || !sample.pfv.defined())
        throw std::invalid_argument("train_step: finetune batch lacks icv masks");
      CompositeLoss cl =
          composite_loss(out, onehot, sample.ticv, sample.pfv, cfg.loss_weights,
                         state.iteration, 1e-5, cfg.include_background);
      item_loss = cl.total;
      bd.l_brain += cl.breakdown.l_brain / batch.size();
      bd.l_ticv += cl.breakdown.l_ticv / batch.size();
      bd.l_pfv += cl.breakdown.l_pfv / batch.size();
      bd.beta1 = cl.breakdown.beta1;
      bd.beta2 = cl.breakdown.beta2;
    } else {
      item_loss = dice_loss(softmax_channels(out.brain_logits), onehot, 1e-5,
                            cfg.include_background);
      bd.l_brain += item_loss->value[0] / batch.size();
    }
    total = total ? ad::add(total, item_loss) : item_loss;
  }
  if (batch.size() > 1) total = ad::scale(total, 1.0 / batch.size());
  bd.total = total->value[0];

  if (!std::isfinite(bd.total)) {
    std::ostringstream diag;
    diag << "train_step: non-finite loss at iteration " << state.iteration
         << " (brain=" << bd.l_brain << " ticv=" << bd.l_ticv
         << " pfv=" << bd.l_pfv << ");";
    for (const auto& [name, p] : state.model.parameters()) {
      double mx = 0;
      for (int64_t i = 0; i < p->value.numel(); ++i)
        mx = std::max(mx, std::abs(p->value[i]));
      if (!std::isfinite(mx)) diag << " param " << name << " non-finite;";
    }
    throw std::runtime_error(diag.str());
  }

  ad::backward(total);
  double lr = cosine_lr(state.iteration, cfg.base_lr, cfg.total_iterations);
  state.opt.step(lr, cfg.weight_decay);
  state.iteration++;
  return bd;
}

ValidationScores validate(const TrainState& state,
                          const std::vector<Subject>& val_set) {
  if (val_set.empty()) throw std::invalid_argument("validate: empty validation set");
  const ModelConfig& mc = state.cfg.model;
  std::array<int64_t, 3> window{mc.crop_size[0], mc.crop_size[1], mc.crop_size[2]};
  const bool icv = mc.icv_heads_enabled;

  ValidationScores sum;
  for (const Subject& s : val_set) {
    std::array<int64_t, 3> grid;
    std::array<int64_t, 3> vshape{s.volume.nx, s.volume.ny, s.volume.nz};
    for (int a = 0; a < 3; ++a) grid[a] = std::max(vshape[a], window[a]);
    WindowPlan plan = plan_windows(grid, window);
    Tensor fused = sliding_window_infer(s.volume, state.model, plan);

    // argmax label map from the class channels
    int64_t V = vshape[0] * vshape[1] * vshape[2];
    LabelMap pred{std::vector<uint16_t>(V, 0), vshape[0], vshape[1], vshape[2],
                  s.labels.affine, s.labels.protocol};
    for (int64_t v = 0; v < V; ++v) {
      int best = 0;
      for (int c = 1; c < mc.num_classes; ++c)
        if (fused[c * V + v] > fused[best * V + v]) best = c;
      pred.data[v] = static_cast<uint16_t>(best);
    }
    RegionDsc r = region_dsc(pred, s.labels);
    // mean over classes present in either map (absent classes score a
    // constant 1.0 and would mask learning progress)
    double present_sum = 0;
    int present_n = 0;
    std::vector<bool> absent(s.labels.protocol->num_classes(), false);
    for (int c : r.absent_classes) absent[c] = true;
    for (const auto& [c, d] : r.per_class)
      if (!absent[c]) {
        present_sum += d;
        ++present_n;
      }
    sum.brain += present_n ? present_sum / present_n : 1.0;

    if (icv) {
      BinaryMask pt{std::vector<uint8_t>(V, 0), vshape[0], vshape[1], vshape[2],
                    s.ticv.affine, IcvStructure::kTicv};
      BinaryMask pp = pt;
      pp.structure = IcvStructure::kPfv;
      for (int64_t v = 0; v < V; ++v) {
        pt.data[v] = fused[mc.num_classes * V + v] >= 0 ? 1 : 0;
        pp.data[v] = fused[(mc.num_classes + 1) * V + v] >= 0 ? 1 : 0;
      }
      sum.ticv += dsc(pt, s.ticv);
      sum.pfv += dsc(pp, s.pfv);
    }
  }
  double n = static_cast<double>(val_set.size());
  return ValidationScores{sum.brain / n, icv ? sum.ticv / n : -1.0,
                          icv ? sum.pfv / n : -1.0};
}

std::array<std::vector<std::string>, 3> split_dataset(
    std::vector<std::string> items, const std::array<int, 3>& counts,
    uint64_t seed) {
  int64_t need = static_cast<int64_t>(counts[0]) + counts[1] + counts[2];
  if (static_cast<int64_t>(items.size()) < need)
    throw std::invalid_argument("split_dataset: need " + std::to_string(need) +
                                " items, have " + std::to_string(items.size()));
  std::mt19937_64 rng(seed);
  std::shuffle(items.begin(), items.end(), rng);
  std::array<std::vector<std::string>, 3> out;
  auto it = items.begin();
  for (int g = 0; g < 3; ++g) {
    out[g].assign(it, it + counts[g]);
    it += counts[g];
  }
  return out;
}

TrainState run_training(const TrainConfig& cfg,
                        const std::vector<Subject>& train_set,
                        const std::vector<Subject>& val_set) {
  if (train_set.empty())
    throw std::invalid_argument("run_training: empty training set");
  TrainState state = init_train_state(cfg);
  fs::create_directories(cfg.output_dir);
  {
    std::ofstream echo(fs::path(cfg.output_dir) / "config.json");
    echo << cfg.to_json().dump(2) << "\n";
  }
  std::ofstream log(fs::path(cfg.output_dir) / "train_log.jsonl");
  std::array<int, 3> crop{cfg.model.crop_size[0], cfg.model.crop_size[1],
                          cfg.model.crop_size[2]};

  while (state.iteration < cfg.total_iterations) {
    std::vector<CropSample> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      std::uniform_int_distribution<size_t> pick(0, train_set.size() - 1);
      batch.push_back(random_crop(train_set[pick(state.rng)], crop, state.rng));
    }
    int64_t step_iter = state.iteration;
    double lr = cosine_lr(step_iter, cfg.base_lr, cfg.total_iterations);
    LossBreakdown bd = train_step(state, batch);

    bool log_now = state.iteration % cfg.log_interval == 0 ||
                   state.iteration == cfg.total_iterations;
    bool val_now = !val_set.empty() &&
                   (state.iteration % cfg.validation_interval == 0 ||
                    state.iteration == cfg.total_iterations);
    if (log_now || val_now) {
      json row{{"iteration", state.iteration}, {"lr", lr},
               {"loss", bd.total},            {"l_brain", bd.l_brain}};
      if (cfg.stage == "finetune") {
        row["l_ticv"] = bd.l_ticv;
        row["l_pfv"] = bd.l_pfv;
        row["beta1"] = bd.beta1;
        row["beta2"] = bd.beta2;
      }
      if (val_now) {
        ValidationScores vs = validate(state, val_set);
        row["val_brain_dsc"] = vs.brain;
        if (cfg.stage == "finetune") {
          row["val_ticv_dsc"] = vs.ticv;
          row["val_pfv_dsc"] = vs.pfv;
        }
        if (vs.brain > state.best_brain_dsc) {
          state.best_brain_dsc = vs.brain;
          state.best_iteration = state.iteration;
          state.model.save_checkpoint((fs::path(cfg.output_dir) / "best").string(),
                                      state.iteration, cfg.stage);
        }
      }
      log << row.dump() << "\n";
      log.flush();
    }
  }

  state.model.save_checkpoint((fs::path(cfg.output_dir) / "last").string(),
                              state.iteration, cfg.stage);
  if (state.best_iteration < 0)
    state.model.save_checkpoint((fs::path(cfg.output_dir) / "best").string(),
                                state.iteration, cfg.stage);
  save_train_state(state, (fs::path(cfg.output_dir) / "state").string());
  return state;
}

}  // namespace nestseg
