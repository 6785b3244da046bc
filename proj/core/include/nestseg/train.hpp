#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "nestseg/core_types.hpp"
#include "nestseg/losses.hpp"
#include "nestseg/model.hpp"

namespace nestseg {

struct TrainConfig {
  std::string stage = "pretrain";  // "pretrain" | "finetune"
  ModelConfig model;
  double base_lr = 1e-4;
  double weight_decay = 1e-5;
  int64_t total_iterations = 200000;
  int batch_size = 1;
  uint64_t seed = 0;
  int64_t validation_interval = 2500;
  int64_t log_interval = 50;
  LossWeights loss_weights;
  bool include_background = true;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::string dataset_dir;
  std::string output_dir;
  std::string pretrain_checkpoint;  // finetune only

  static TrainConfig pretrain_defaults();
  static TrainConfig finetune_defaults();
  std::vector<std::string> validate() const;  // all violations, not just the first

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// The only transform applied to training data (no further augmentation).
std::vector<std::string> augmentation_pipeline();

struct Subject {
  std::string id;
  Volume volume;
  LabelMap labels;
  BinaryMask ticv;
  BinaryMask pfv;

  static Subject load(const std::string& dir, const std::string& id);
};

struct CropSample {
  Tensor image;                  // [C, crop...]
  std::vector<uint16_t> labels;  // crop voxels, grid order
  Tensor ticv, pfv;              // [1, crop...]
  std::array<int64_t, 3> corner;
};

// Identical window applied to image, labels, and both masks; volumes smaller
// than the crop are zero-padded symmetrically.
CropSample random_crop(const Subject& s, const std::array<int, 3>& crop,
                       std::mt19937_64& rng);

// lr(i) = base * (1 + cos(pi * i / total)) / 2, lr_min = 0
double cosine_lr(int64_t iteration, double base_lr, int64_t total_iterations);

// Adaptive-moment optimizer with decoupled, lr-scaled weight decay.
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::vector<ad::Var> params, double beta1, double beta2, double eps);

  void step(double lr, double weight_decay);
  int64_t steps_taken() const { return t_; }

  void save(const std::string& path) const;
  void load(const std::string& path, std::vector<ad::Var> params);

 private:
  std::vector<ad::Var> params_;
  std::vector<Tensor> m_, v_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  int64_t t_ = 0;
};

struct TrainState {
  TrainConfig cfg;
  NestModel model;
  AdamW opt;
  std::mt19937_64 rng;
  int64_t iteration = 0;
  double best_brain_dsc = -1.0;
  int64_t best_iteration = -1;
};

// Fresh state; finetune stage loads the backbone from cfg.pretrain_checkpoint.
TrainState init_train_state(const TrainConfig& cfg);

// Full resume support: parameters, optimizer moments, RNG, and counters.
void save_train_state(const TrainState& state, const std::string& dir);
TrainState load_train_state(const std::string& dir);

// One optimizer update over the batch; throws on non-finite loss with a
// parameter-statistics diagnostic in the message.
LossBreakdown train_step(TrainState& state, const std::vector<CropSample>& batch);

struct ValidationScores {
  double brain = 0;  // mean DSC over classes present in the ground truth
  double ticv = 0;
  double pfv = 0;
};

ValidationScores validate(const TrainState& state,
                          const std::vector<Subject>& val_set);

std::array<std::vector<std::string>, 3> split_dataset(
    std::vector<std::string> items, const std::array<int, 3>& counts,
    uint64_t seed);

// The full loop: crop sampling, stepping, periodic validation, JSONL logging
// to <output_dir>/train_log.jsonl, best/last checkpoints, final state save.
// Returns the finished state.
TrainState run_training(const TrainConfig& cfg,
                        const std::vector<Subject>& train_set,
                        const std::vector<Subject>& val_set);

}  // namespace nestseg
