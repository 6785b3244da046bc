// End-to-end acceptance gate. Each numbered criterion prints exactly one
// PASS/FAIL line; the process exits nonzero when any criterion fails.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "nestseg/autodiff.hpp"
#include "nestseg/evaluation.hpp"
#include "nestseg/inference.hpp"
#include "nestseg/losses.hpp"
#include "nestseg/model.hpp"
#include "nestseg/phantom.hpp"
#include "nestseg/preprocess.hpp"
#include "nestseg/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nestseg;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int number, const std::string& what, bool ok,
            const std::string& detail = "") {
  std::cout << (ok ? "PASS" : "FAIL") << "  " << number << ". " << what;
  if (!detail.empty()) std::cout << "  [" << detail << "]";
  std::cout << std::endl;
  if (!ok) ++g_failures;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

fs::path work_dir() {
  static fs::path d = [] {
    fs::path p = fs::temp_directory_path() / "nestseg_acceptance";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return d;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream ss;
  ss.precision(prec);
  ss << v;
  return ss.str();
}

// ---------------------------------------------------------------------------
// 1. blockify/deblockify are exact inverses at production geometry, fast

void criterion_blockify_roundtrip() {
  ModelConfig cfg = ModelConfig::defaults();
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  auto t0 = Clock::now();
  bool ok = true;
  for (int rep = 0; rep < 50 && ok; ++rep) {
    int level = rep % ModelConfig::kLevels;
    auto grid = cfg.grid(level);
    auto idx = blockify_index(grid, cfg.block_grid[level]);
    auto inv = invert_index(idx);
    int64_t n = cfg.num_patches(level);
    std::vector<double> tokens(n);
    for (auto& v : tokens) v = u(rng);
    // permute forward then backward; must reproduce the input bitwise
    std::vector<double> blocked(n), back(n);
    for (int64_t i = 0; i < n; ++i) blocked[i] = tokens[idx[i]];
    for (int64_t i = 0; i < n; ++i) back[i] = blocked[inv[i]];
    ok = std::equal(back.begin(), back.end(), tokens.begin());
    // the inverse must also be a true permutation inverse
    for (int64_t i = 0; i < n && ok; ++i) ok = inv[idx[i]] == i;
  }
  double secs = seconds_since(t0);
  report(1, "block rearrangement round-trips losslessly (50 runs, production geometry)",
         ok && secs < 10.0, fmt(secs, 3) + " s");
}

// ---------------------------------------------------------------------------
// 2. hierarchy arithmetic at production geometry

void criterion_hierarchy_arithmetic() {
  ModelConfig cfg = ModelConfig::defaults();
  bool ok = cfg.grid(0) == std::array<int64_t, 3>{24, 24, 24} &&
            cfg.grid(1) == std::array<int64_t, 3>{12, 12, 12} &&
            cfg.grid(2) == std::array<int64_t, 3>{6, 6, 6} &&
            cfg.blocks(0) == 64 && cfg.blocks(1) == 8 && cfg.blocks(2) == 1 &&
            cfg.tokens_per_block(0) == 216 && cfg.tokens_per_block(1) == 216 &&
            cfg.tokens_per_block(2) == 216 && cfg.validate().empty();
  report(2, "hierarchy arithmetic: grids 24/12/6 cubed, 64/8/1 blocks of 216 tokens", ok);
}

// ---------------------------------------------------------------------------
// 3. attention is strictly local to each block

void criterion_attention_locality() {
  NestModel model(ModelConfig::toy(4), 7);
  const ModelConfig& cfg = model.config();
  ad::NoGradGuard ng;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);

  Tensor crop({cfg.in_channels, cfg.crop_size[0], cfg.crop_size[1], cfg.crop_size[2]});
  for (int64_t i = 0; i < crop.numel(); ++i) crop[i] = u(rng);

  ad::Var tokens = model.patch_embed(crop);
  BlockedSequence a = model.blockify(tokens, 0);
  BlockedSequence b = a;
  Tensor perturbed = a.data->value.clone();
  int64_t per_block = a.tokens_per_block() * a.channels();
  for (int64_t i = 0; i < per_block; ++i) perturbed[i] += u(rng);  // block 0 only
  b.data = ad::constant(perturbed);

  Tensor ya = model.transformer_block(a, 0).data->value;
  Tensor yb = model.transformer_block(b, 0).data->value;
  bool changed_inside = false, leaked_outside = false;
  for (int64_t i = 0; i < ya.numel(); ++i) {
    if (i < per_block) {
      if (ya[i] != yb[i]) changed_inside = true;
    } else if (ya[i] != yb[i]) {
      leaked_outside = true;
    }
  }
  report(3, "attention locality: perturbing one block leaves all others bitwise unchanged",
         changed_inside && !leaked_outside);
}

// ---------------------------------------------------------------------------
// 4. analytic gradients match central finite differences

void criterion_gradient_check() {
  const int nc = 3;
  ModelConfig tiny = ModelConfig::tiny(nc);
  tiny.icv_heads_enabled = true;
  NestModel model(tiny, 11);
  const ModelConfig& cfg = model.config();
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0, 1);

  Tensor crop({cfg.in_channels, cfg.crop_size[0], cfg.crop_size[1], cfg.crop_size[2]});
  for (int64_t i = 0; i < crop.numel(); ++i) crop[i] = u(rng);
  int64_t nvox = crop.numel() / cfg.in_channels;
  std::vector<uint16_t> labels(nvox);
  Tensor ticv({1, cfg.crop_size[0], cfg.crop_size[1], cfg.crop_size[2]});
  Tensor pfv = ticv.clone();
  for (int64_t i = 0; i < nvox; ++i) {
    labels[i] = static_cast<uint16_t>(i % nc);
    ticv[i] = (i % 2) ? 1.0 : 0.0;
    pfv[i] = (i % 5 == 0) ? 1.0 : 0.0;
  }
  Tensor onehot = one_hot(labels.data(), nvox, nc);
  LossWeights w;

  auto loss_value = [&]() {
    ad::NoGradGuard ng;
    ModelOutput out = model.forward(crop, true);
    return composite_loss(out, onehot, ticv, pfv, w, 0).breakdown.total;
  };

  model.zero_grad();
  {
    ModelOutput out = model.forward(crop, true);
    CompositeLoss loss = composite_loss(out, onehot, ticv, pfv, w, 0);
    ad::backward(loss.total);
  }

  const double tol = 1e-4;
  int checked = 0, passed = 0;
  for (const auto& [name, p] : model.parameters()) {
    Tensor& v = p->value;
    int64_t n = v.numel();
    std::uniform_int_distribution<int64_t> pick(0, n - 1);
    for (int s = 0; s < 2; ++s) {  // two sampled entries per tensor
      int64_t i = pick(rng);
      double keep = v[i];
      double an = p->grad[i];
      // a wrong gradient fails at every step size; finite-difference
      // cancellation noise on near-zero gradients passes at a larger one
      bool entry_ok = false;
      for (double h : {1e-5, 1e-4, 3e-4}) {
        v[i] = keep + h;
        double lp = loss_value();
        v[i] = keep - h;
        double lm = loss_value();
        v[i] = keep;
        double fd = (lp - lm) / (2 * h);
        double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
        if (rel <= tol) {
          entry_ok = true;
          break;
        }
      }
      ++checked;
      if (entry_ok) ++passed;
    }
  }
  double frac = static_cast<double>(passed) / checked;
  report(4, "analytic gradients match finite differences at 1e-4 relative",
         frac >= 0.99, fmt(100 * frac, 4) + "% of " + std::to_string(checked) +
                           " sampled entries");
}

// ---------------------------------------------------------------------------
// 5. loss terms match independent brute-force oracles

double oracle_dice(const std::vector<double>& p, const std::vector<double>& t,
                   int C, double smooth) {
  int64_t n = p.size() / C;
  double acc = 0;
  for (int c = 0; c < C; ++c) {
    double inter = 0, sp = 0, st = 0;
    for (int64_t i = 0; i < n; ++i) {
      inter += p[c * n + i] * t[c * n + i];
      sp += p[c * n + i];
      st += t[c * n + i];
    }
    acc += (2 * inter + smooth) / (sp + st + smooth);
  }
  return 1.0 - acc / C;
}

double oracle_bce(const std::vector<double>& p, const std::vector<double>& t,
                  double eps) {
  double acc = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    double q = std::min(std::max(p[i], eps), 1.0 - eps);
    acc += -(t[i] * std::log(q) + (1 - t[i]) * std::log(1 - q));
  }
  return acc / p.size();
}

void criterion_loss_oracles() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> cdist(1, 5);
  bool ok = true;
  for (int rep = 0; rep < 100 && ok; ++rep) {
    int C = cdist(rng);
    int64_t n = 4 + rep % 37;
    std::vector<double> pv(C * n), tv(C * n, 0);
    for (auto& x : pv) x = u(rng);
    for (int64_t i = 0; i < n; ++i) tv[(rep + i) % C * n + i] = 1.0;

    ad::NoGradGuard ng;
    ad::Var probs = ad::constant(Tensor({C, n}, pv));
    Tensor target({C, n}, tv);
    double got_dice = dice_loss(probs, target)->value[0];
    double got_bce = bce_loss(probs, target)->value[0];
    ok = std::abs(got_dice - oracle_dice(pv, tv, C, 1e-5)) < 1e-6 &&
         std::abs(got_bce - oracle_bce(pv, tv, 1e-7)) < 1e-6;
  }

  // DSC against direct voxel counting on random masks
  for (int rep = 0; rep < 20 && ok; ++rep) {
    BinaryMask a, b;
    a.nx = a.ny = a.nz = b.nx = b.ny = b.nz = 9;
    a.data.assign(9 * 9 * 9, 0);
    b.data.assign(9 * 9 * 9, 0);
    std::bernoulli_distribution coin(0.3);
    for (auto& v : a.data) v = coin(rng);
    for (auto& v : b.data) v = coin(rng);
    int64_t inter = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
      inter += a.data[i] && b.data[i];
      na += a.data[i];
      nb += b.data[i];
    }
    double expect = (na + nb) == 0 ? 1.0 : 2.0 * inter / double(na + nb);
    ok = std::abs(dsc(a, b) - expect) < 1e-12;
  }
  report(5, "dice/cross-entropy/DSC match brute-force oracles (100+20 random cases)", ok);
}

// ---------------------------------------------------------------------------
// 6. loss-weight and learning-rate schedules

void criterion_schedules() {
  LossWeights w;
  bool ok = beta_schedule(0, w) == std::make_pair(0.8, 1.0) &&
            beta_schedule(19999, w) == std::make_pair(0.8, 1.0) &&
            beta_schedule(20000, w) == std::make_pair(0.8, 1.0) &&
            beta_schedule(20001, w) == std::make_pair(0.08, 0.1) &&
            beta_schedule(25000, w) == std::make_pair(0.08, 0.1);
  ok = ok && cosine_lr(0, 1e-4, 200000) == 1e-4 &&
       std::abs(cosine_lr(200000, 1e-4, 200000)) < 1e-20 &&
       std::abs(cosine_lr(100000, 1e-4, 200000) - 5e-5) < 1e-18;
  report(6, "loss weights switch after iteration 20000 and cosine decay hits its endpoints", ok);
}

// ---------------------------------------------------------------------------
// 7 + 8. desk-scale convergence and TICV-before-regions ordering

struct ConvergenceArtifacts {
  fs::path finetune_dir;
  fs::path cohort_dir;
  bool trained = false;
};

ConvergenceArtifacts criterion_convergence() {
  ConvergenceArtifacts art;
  auto t0 = Clock::now();
  const int nc = 4;

  art.cohort_dir = work_dir() / "conv_cohort";
  PhantomSpec spec;
  spec.shape = {64, 64, 64};
  spec.num_regions = nc - 1;
  generate_cohort(1, spec, 42, art.cohort_dir.string());
  std::vector<Subject> subjects = {Subject::load(art.cohort_dir.string(), "sub-000")};

  TrainConfig pre = TrainConfig::pretrain_defaults();
  pre.model = ModelConfig::toy(nc);
  pre.total_iterations = 300;
  pre.validation_interval = 150;
  pre.log_interval = 50;
  pre.base_lr = 1e-3;
  pre.seed = 9;
  pre.dataset_dir = art.cohort_dir.string();
  pre.output_dir = (work_dir() / "conv_pre").string();
  run_training(pre, subjects, subjects);

  TrainConfig fin = TrainConfig::finetune_defaults();
  fin.model = ModelConfig::toy(nc);
  fin.model.icv_heads_enabled = true;
  fin.total_iterations = 1700;
  fin.validation_interval = 100;
  fin.log_interval = 100;
  fin.base_lr = 1e-3;
  fin.loss_weights.switch_iteration = 1200;
  fin.seed = 9;
  fin.dataset_dir = art.cohort_dir.string();
  fin.output_dir = (work_dir() / "conv_fine").string();
  fin.pretrain_checkpoint = pre.output_dir + "/best";
  TrainState st = run_training(fin, subjects, subjects);
  art.finetune_dir = fin.output_dir;
  art.trained = true;

  // score the trained model over the full phantom with fused windows
  const Subject& s = subjects[0];
  std::array<int64_t, 3> window{fin.model.crop_size[0], fin.model.crop_size[1],
                                fin.model.crop_size[2]};
  WindowPlan plan = plan_windows({s.volume.nx, s.volume.ny, s.volume.nz}, window);
  Tensor fused = sliding_window_infer(s.volume, st.model, plan);
  SegmentationResult res = assemble_outputs(fused, nc, s.volume.affine);
  SubjectEval ev = evaluate_subject("sub-000", res.labels, s.labels, res.ticv,
                                    s.ticv, res.pfv, s.pfv);
  // mean over the phantom's actual regions; the protocol-wide mean would be
  // inflated by the 1.0 score of classes absent from both maps
  double brain = 0;
  for (int k = 1; k < nc; ++k) brain += ev.per_class.at(k);
  brain /= nc - 1;
  double secs = seconds_since(t0);

  // thresholds pinned from calibration: 0.943 / 0.992 / 0.921 measured,
  // minus margin for cross-machine numeric drift
  bool ok = brain >= 0.92 && ev.ticv >= 0.97 && ev.pfv >= 0.88 && secs < 900;
  report(7,
         "desk-scale training converges within 2000 iterations "
         "(region DSC >= 0.92, TICV >= 0.97, PFV >= 0.88, under 15 min)",
         ok, "brain " + fmt(brain) + ", ticv " + fmt(ev.ticv) + ", pfv " +
                 fmt(ev.pfv) + ", " + fmt(secs, 3) + " s");
  return art;
}

void criterion_ticv_first(const ConvergenceArtifacts& art) {
  if (!art.trained) {
    report(8, "TICV reaches DSC 0.9 no later than the region mean", false,
           "no training log");
    return;
  }
  std::ifstream log(art.finetune_dir / "train_log.jsonl");
  int64_t ticv_cross = -1, brain_cross = -1;
  std::string line;
  while (std::getline(log, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (!j.contains("val_brain_dsc")) continue;
    int64_t it = j.at("iteration");
    if (ticv_cross < 0 && j.value("val_ticv_dsc", -1.0) >= 0.9) ticv_cross = it;
    if (brain_cross < 0 && j.at("val_brain_dsc").get<double>() >= 0.9) brain_cross = it;
  }
  bool ok = ticv_cross >= 0 && (brain_cross < 0 || ticv_cross <= brain_cross);
  report(8, "TICV reaches DSC 0.9 no later than the region mean", ok,
         "ticv@" + std::to_string(ticv_cross) + ", regions@" +
             std::to_string(brain_cross));
}

// ---------------------------------------------------------------------------
// 9. the class head is bitwise unaffected by adding the TICV/PFV heads

void criterion_head_invariance() {
  const int nc = 4;
  fs::path dir = work_dir() / "head_ckpt";
  NestModel pre(ModelConfig::toy(nc), 21);
  pre.save_checkpoint(dir.string(), 0, "pretrain");

  ModelConfig fcfg = ModelConfig::toy(nc);
  fcfg.icv_heads_enabled = true;
  NestModel fine = NestModel::load_pretrained_into_finetune(dir.string(), fcfg, 22);

  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0, 1);
  Tensor crop({1, fcfg.crop_size[0], fcfg.crop_size[1], fcfg.crop_size[2]});
  for (int64_t i = 0; i < crop.numel(); ++i) crop[i] = u(rng);

  ad::NoGradGuard ng;
  Tensor a = pre.forward(crop, false).brain_logits->value;
  ModelOutput fo = fine.forward(crop, true);
  Tensor b = fo.brain_logits->value;
  bool ok = a.numel() == b.numel() && fo.ticv_logit && fo.pfv_logit;
  for (int64_t i = 0; ok && i < a.numel(); ++i) ok = a[i] == b[i];
  report(9, "class logits are bitwise identical with and without the TICV/PFV heads", ok);
}

// ---------------------------------------------------------------------------
// 10. inference pipeline determinism

uint64_t file_checksum(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  std::string s = ss.str();
  return fnv1a64(s.data(), s.size());
}

void criterion_determinism(const ConvergenceArtifacts& art) {
  if (!art.trained) {
    report(10, "repeated segmentation runs are bitwise identical", false,
           "no trained model");
    return;
  }
  std::string cli = NESTSEG_CLI_PATH;
  std::string input = (art.cohort_dir / "sub-000" / "t1.nii.gz").string();
  std::string ckpt = (art.finetune_dir / "best").string();
  bool ok = true;
  std::array<fs::path, 2> outs{work_dir() / "det_a", work_dir() / "det_b"};
  for (const auto& out : outs) {
    std::string cmd = cli + " segment --input " + input + " --checkpoint " +
                      ckpt + " --out " + out.string() +
                      " --allow-passthrough --stem s > /dev/null 2>&1";
    ok = ok && std::system(cmd.c_str()) == 0;
  }
  for (const char* f : {"s_seg.nii.gz", "s_ticv.nii.gz", "s_pfv.nii.gz"})
    ok = ok && file_checksum(outs[0] / f) == file_checksum(outs[1] / f);

  // fused logits must not depend on window visit order
  double max_diff = 0;
  if (ok) {
    Subject s = Subject::load(art.cohort_dir.string(), "sub-000");
    NestModel model = NestModel::load_checkpoint(ckpt);
    const auto& cs = model.config().crop_size;
    WindowPlan plan = plan_windows({s.volume.nx, s.volume.ny, s.volume.nz},
                                   {cs[0], cs[1], cs[2]});
    WindowPlan reversed = plan;
    std::reverse(reversed.corners.begin(), reversed.corners.end());
    Tensor a = sliding_window_infer(s.volume, model, plan);
    Tensor b = sliding_window_infer(s.volume, model, reversed);
    for (int64_t i = 0; i < a.numel(); ++i)
      max_diff = std::max(max_diff, std::abs(a[i] - b[i]));
    ok = max_diff <= 1e-6;
  }
  report(10, "repeated runs are bitwise identical and fusion ignores window order",
         ok, "max fusion diff " + fmt(max_diff, 3));
}

// ---------------------------------------------------------------------------
// 11. full cohort workflow through the command line

void criterion_end_to_end() {
  auto t0 = Clock::now();
  std::string cli = NESTSEG_CLI_PATH;
  fs::path root = work_dir() / "e2e";
  fs::path cohort = root / "cohort";
  bool ok = true;
  auto sh = [&](const std::string& cmd) {
    if (std::system((cmd + " > /dev/null 2>&1").c_str()) != 0) ok = false;
  };

  sh(cli + " phantom --out " + cohort.string() +
     " --subjects 45 --regions 3 --grid 48 48 48 --seed 2024");

  std::string overrides =
      " --toy --set model.num_classes=4 --set validation_interval=100"
      " --set log_interval=50 --set base_lr=0.001 --split 32,8,5 --set seed=1";
  sh(cli + " pretrain --data " + cohort.string() + " --out " +
     (root / "pre").string() + overrides + " --set total_iterations=200");
  sh(cli + " finetune --data " + cohort.string() + " --out " +
     (root / "fine").string() + " --pretrained " + (root / "pre" / "best").string() +
     overrides + " --set total_iterations=300 --set loss_weights.switch_iteration=150");

  // reproduce the split to find the held-out test subjects
  CohortManifest man = load_cohort_manifest(cohort.string());
  auto groups = split_dataset(man.subject_dirs, {32, 8, 5}, 1);
  const std::vector<std::string>& test_ids = groups[2];
  ok = ok && test_ids.size() == 5;

  // ground-truth view containing only the test subjects
  fs::path test_gt = root / "test_gt";
  fs::create_directories(test_gt);
  json tman{{"n", 5}, {"seed", man.seed}, {"subjects", test_ids}};
  std::ofstream(test_gt / "manifest.json") << tman.dump(2);
  for (const auto& id : test_ids)
    fs::create_directory_symlink(fs::absolute(cohort / id), test_gt / id);

  for (const auto& id : test_ids)
    sh(cli + " segment --input " + (cohort / id / "t1.nii.gz").string() +
       " --checkpoint " + (root / "fine" / "best").string() + " --out " +
       (root / "pred").string() + " --allow-passthrough --stem " + id);
  sh(cli + " evaluate --pred " + (root / "pred").string() + " --gt " +
     test_gt.string() + " --out " + (root / "report").string());
  sh(cli + " plot --log " + (root / "fine" / "train_log.jsonl").string() +
     " --out " + (root / "curves.svg").string() + " --switch-iteration 150");

  std::string detail;
  if (ok) {
    DscReport rep = load_report_json((root / "report.json").string());
    for (const DscColumn* c : {&rep.brain, &rep.ticv, &rep.pfv}) {
      ok = ok && c->dsc >= 0.0 && c->dsc <= 1.0 && c->lci <= c->dsc &&
           c->dsc <= c->uci && c->lci >= 0.0 && c->uci <= 1.0;
    }
    ok = ok && rep.subjects.size() == 5 && fs::file_size(root / "curves.svg") > 0;
    detail = "brain " + fmt(rep.brain.dsc) + " [" + fmt(rep.brain.lci) + ", " +
             fmt(rep.brain.uci) + "], ";
  }
  double secs = seconds_since(t0);
  ok = ok && secs < 2700;
  report(11, "45-subject workflow: generate, split, train both stages, segment, evaluate",
         ok, detail + fmt(secs, 3) + " s");
}

// ---------------------------------------------------------------------------
// 12. geometry round-trip

void criterion_geometry() {
  PhantomSpec spec;
  spec.shape = {32, 40, 28};
  spec.num_regions = 2;
  spec.noise_sigma = 0;
  Phantom ph = generate_phantom(spec);

  // affine inverse sanity
  Affine a = ph.volume.affine;
  Affine id = a.inverse().mul(a);
  bool ok = true;
  Affine expect = Affine::identity();
  for (int i = 0; i < 16; ++i) ok = ok && std::abs(id.m[i] - expect.m[i]) < 1e-12;

  // same-spacing nearest-neighbor resample there and back is exact
  Affine shifted = ph.labels.affine;
  shifted.m[3] += 3;  // target grid shifted 3 mm along x
  std::array<int64_t, 3> bigger{40, 48, 36};
  LabelMap moved = apply_affine_resample(ph.labels, Affine::identity(), bigger, shifted);
  LabelMap back = apply_affine_resample(
      moved, Affine::identity(),
      {ph.labels.nx, ph.labels.ny, ph.labels.nz}, ph.labels.affine);
  for (int64_t i = 0; i < ph.labels.voxels() && ok; ++i)
    ok = back.data[i] == ph.labels.data[i];

  // segmentation-result inverse transform restores the native grid and ids
  SegmentationResult res{ph.labels, ph.ticv, ph.pfv, json::object()};
  SegmentationResult native = inverse_transform(res, ph.labels.affine,
                                                {ph.labels.nx, ph.labels.ny, ph.labels.nz});
  ok = ok && native.labels.voxels() == ph.labels.voxels();
  for (int64_t i = 0; i < ph.labels.voxels() && ok; ++i)
    ok = native.labels.data[i] == ph.labels.data[i] &&
         native.ticv.data[i] == ph.ticv.data[i];
  report(12, "resampling geometry round-trips label maps exactly", ok);
}

}  // namespace

int main() {
  std::cout << "acceptance checks\n-----------------\n";
  criterion_blockify_roundtrip();
  criterion_hierarchy_arithmetic();
  criterion_attention_locality();
  criterion_gradient_check();
  criterion_loss_oracles();
  criterion_schedules();
  ConvergenceArtifacts art = criterion_convergence();
  criterion_ticv_first(art);
  criterion_head_invariance();
  criterion_determinism(art);
  criterion_end_to_end();
  criterion_geometry();
  std::cout << "-----------------\n"
            << (g_failures == 0 ? "all criteria passed"
                                : std::to_string(g_failures) + " criteria failed")
            << std::endl;
  return g_failures == 0 ? 0 : 1;
}
