// Single entry point for the whole workflow: phantom data generation,
// two-stage training, full-volume segmentation, evaluation, and curve plots.
//
// Exit codes: 0 success, 1 usage, 2 config/input validation, 3 runtime.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "nestseg/evaluation.hpp"
#include "nestseg/inference.hpp"
#include "nestseg/model.hpp"
#include "nestseg/phantom.hpp"
#include "nestseg/preprocess.hpp"
#include "nestseg/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace nestseg;

namespace {

constexpr int kOk = 0, kUsage = 1, kValidation = 2, kRuntime = 3;

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_echo(const json& j, const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << "\n";
}

// Applies "dotted.key=value" overrides onto a config JSON; keys must already
// exist so typos are caught instead of silently ignored.
void apply_overrides(json& cfg, const std::vector<std::string>& sets) {
  for (const std::string& kv : sets) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw ValidationError("--set expects key=value, got '" + kv + "'");
    std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
    json* node = &cfg;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!node->contains(parts[i]))
        throw ValidationError("unknown config key '" + key + "'");
      node = &(*node)[parts[i]];
    }
    if (parts.empty() || !node->contains(parts.back()))
      throw ValidationError("unknown config key '" + key + "'");
    json parsed = json::parse(value, nullptr, false);
    (*node)[parts.back()] = parsed.is_discarded() ? json(value) : parsed;
  }
}

std::vector<Subject> load_subjects(const std::string& cohort_dir,
                                   const std::vector<std::string>& ids) {
  std::vector<Subject> out;
  for (const auto& id : ids) out.push_back(Subject::load(cohort_dir, id));
  return out;
}

int run_train_stage(const std::string& stage, const std::string& config_path,
                    const std::vector<std::string>& sets,
                    const std::string& data_dir, const std::string& out_dir,
                    const std::string& pretrained,
                    const std::string& split_arg, bool toy, bool dump_config) {
  TrainConfig base = stage == "finetune" ? TrainConfig::finetune_defaults()
                                         : TrainConfig::pretrain_defaults();
  if (toy) {
    ModelConfig m = ModelConfig::toy(base.model.num_classes);
    m.icv_heads_enabled = stage == "finetune";
    base.model = m;
  }
  json cfg_json = base.to_json();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ValidationError("cannot open config " + config_path);
    cfg_json.merge_patch(json::parse(in));
  }
  apply_overrides(cfg_json, sets);
  TrainConfig cfg = TrainConfig::from_json(cfg_json);
  cfg.stage = stage;
  if (!data_dir.empty()) cfg.dataset_dir = data_dir;
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  if (!pretrained.empty()) cfg.pretrain_checkpoint = pretrained;

  if (dump_config) {
    std::cout << cfg.to_json().dump(2) << "\n";
    return kOk;
  }
  auto errs = cfg.validate();
  if (stage == "finetune" && cfg.pretrain_checkpoint.empty())
    errs.push_back("finetune requires --pretrained <checkpoint dir>");
  if (cfg.dataset_dir.empty()) errs.push_back("no dataset directory given");
  if (cfg.output_dir.empty()) errs.push_back("no output directory given");
  if (!errs.empty()) {
    std::cerr << "invalid configuration:\n";
    for (const auto& e : errs) std::cerr << "  - " << e << "\n";
    return kValidation;
  }

  CohortManifest man = load_cohort_manifest(cfg.dataset_dir);
  std::vector<std::string> train_ids = man.subject_dirs, val_ids;
  if (!split_arg.empty()) {
    std::array<int, 3> counts{};
    if (std::sscanf(split_arg.c_str(), "%d,%d,%d", &counts[0], &counts[1],
                    &counts[2]) != 3)
      throw ValidationError("--split expects three comma-separated counts");
    auto groups = split_dataset(man.subject_dirs, counts, cfg.seed);
    train_ids = groups[0];
    val_ids = groups[1];
  } else {
    val_ids = train_ids;  // small-cohort mode: validate on the training data
  }

  std::vector<Subject> train_set = load_subjects(cfg.dataset_dir, train_ids);
  std::vector<Subject> val_set = load_subjects(cfg.dataset_dir, val_ids);
  TrainState st = run_training(cfg, train_set, val_set);
  std::cout << "finished " << stage << " at iteration " << st.iteration
            << "; best validation DSC " << st.best_brain_dsc << " at iteration "
            << st.best_iteration << "\n";
  return kOk;
}

int cmd_segment(const std::string& input, const std::string& checkpoint,
                const std::string& out_dir, bool skull_stripped,
                bool allow_passthrough, bool largest_component,
                std::string stem) {
  if (!fs::exists(fs::path(checkpoint) / "manifest.json"))
    throw ValidationError("checkpoint not found: " + checkpoint);
  json manifest = NestModel::read_manifest(checkpoint);
  bool ckpt_stripped = manifest.value("skull_stripped", false);
  if (skull_stripped != ckpt_stripped)
    throw ValidationError(
        std::string("--skull-stripped ") + (skull_stripped ? "set" : "not set") +
        " but the checkpoint was trained on " +
        (ckpt_stripped ? "skull-stripped" : "non-stripped") +
        " data; pick the matching model variant");

  if (stem.empty()) {
    stem = fs::path(input).filename().string();
    for (const char* suffix : {".nii.gz", ".nii"}) {
      if (stem.size() > std::strlen(suffix) &&
          stem.rfind(suffix) == stem.size() - std::strlen(suffix))
        stem = stem.substr(0, stem.size() - std::strlen(suffix));
    }
  }

  std::string stage = "load input";
  std::vector<fs::path> written;
  try {
    Volume native = load_volume(input);
    Affine native_affine = native.affine;
    std::array<int64_t, 3> native_shape{native.nx, native.ny, native.nz};

    stage = "preprocess";
    PreprocessConfig pcfg;
    pcfg.skull_strip = skull_stripped;
    pcfg.strip.passthrough = allow_passthrough;
    pcfg.n4.passthrough = allow_passthrough;
    pcfg.registration.passthrough = allow_passthrough;
    auto [mni, record] = preprocess(native, pcfg);

    stage = "inference";
    NestModel model = NestModel::load_checkpoint(checkpoint);
    const ModelConfig& mc = model.config();
    if (!mc.icv_heads_enabled)
      throw ValidationError("checkpoint lacks the TICV/PFV heads; segment needs a finetuned model");
    std::array<int64_t, 3> window{mc.crop_size[0], mc.crop_size[1], mc.crop_size[2]};
    std::array<int64_t, 3> grid{std::max<int64_t>(mni.nx, window[0]),
                                std::max<int64_t>(mni.ny, window[1]),
                                std::max<int64_t>(mni.nz, window[2])};
    WindowPlan plan = plan_windows(grid, window);
    Tensor fused = sliding_window_infer(mni, model, plan);

    stage = "assemble";
    SegmentationResult mni_result =
        assemble_outputs(fused, mc.num_classes, mni.affine, largest_component);

    stage = "inverse transform";
    SegmentationResult native_result =
        inverse_transform(mni_result, native_affine, native_shape);

    stage = "write outputs";
    json corners = json::array();
    for (const auto& c : plan.corners) corners.push_back(c);
    native_result.provenance =
        json{{"input", input},
             {"checkpoint", checkpoint},
             {"checkpoint_blob_checksum", manifest.value("blob_checksum", json())},
             {"skull_stripped", skull_stripped},
             {"largest_component", largest_component},
             {"preprocess", record.to_json()},
             {"window_plan",
              {{"window", plan.window}, {"overlap", plan.overlap}, {"corners", corners}}}};
    for (const char* suffix : {"_seg.nii.gz", "_ticv.nii.gz", "_pfv.nii.gz",
                               "_manifest.json"})
      written.push_back(fs::path(out_dir) / (stem + suffix));
    write_result(native_result, out_dir, stem);
    write_echo(json{{"command", "segment"},
                    {"input", input},
                    {"checkpoint", checkpoint},
                    {"skull_stripped", skull_stripped},
                    {"allow_passthrough", allow_passthrough},
                    {"largest_component", largest_component}},
               fs::path(out_dir) / (stem + "_config_echo.json"));
    std::cout << "wrote " << stem << "_{seg,ticv,pfv}.nii.gz to " << out_dir << "\n";
    return kOk;
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    // remove partial outputs so a failed run leaves nothing half-written
    for (const auto& p : written) fs::remove(p);
    std::string msg = "segment failed during " + stage + ": " + e.what();
    if (std::string(e.what()).find("pass-through") != std::string::npos)
      throw ValidationError(msg);  // missing tool needs an explicit user choice
    throw std::runtime_error(msg);
  }
}

int cmd_evaluate(const std::string& pred_dir, const std::string& gt_dir,
                 const std::string& out_prefix, uint64_t seed) {
  CohortManifest man = load_cohort_manifest(gt_dir);
  std::vector<std::string> missing;
  std::vector<SubjectEval> evals;
  for (const auto& id : man.subject_dirs) {
    fs::path seg = fs::path(pred_dir) / (id + "_seg.nii.gz");
    if (!fs::exists(seg)) {
      missing.push_back(id);
      continue;
    }
    Subject gt = Subject::load(gt_dir, id);
    LabelMap pred = load_label_map(seg.string(), gt.labels.protocol);
    BinaryMask pt = load_mask((fs::path(pred_dir) / (id + "_ticv.nii.gz")).string(),
                              IcvStructure::kTicv);
    BinaryMask pp = load_mask((fs::path(pred_dir) / (id + "_pfv.nii.gz")).string(),
                              IcvStructure::kPfv);
    evals.push_back(evaluate_subject(id, pred, gt.labels, pt, gt.ticv, pp, gt.pfv));
  }
  if (!missing.empty()) {
    std::cerr << "missing predictions for:";
    for (const auto& id : missing) std::cerr << " " << id;
    std::cerr << "\n";
    return kValidation;
  }
  if (evals.empty()) throw ValidationError("no subjects evaluated");
  DscReport rep = DscReport::from_subjects(std::move(evals), seed);
  emit_report(rep, out_prefix);
  write_echo(json{{"command", "evaluate"}, {"pred", pred_dir}, {"gt", gt_dir}},
             out_prefix + "_config_echo.json");
  std::cout << "brain " << rep.brain.dsc << " ticv " << rep.ticv.dsc << " pfv "
            << rep.pfv.dsc << " -> " << out_prefix << ".{json,csv,md}\n";
  return kOk;
}

int cmd_plot(const std::string& log_path, const std::string& out_path,
             int64_t switch_iteration) {
  std::ifstream in(log_path);
  if (!in) throw ValidationError("cannot open log " + log_path);
  struct Row {
    int64_t it;
    double brain, ticv, pfv;
    bool has_icv;
  };
  std::vector<Row> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (!j.contains("val_brain_dsc")) continue;
    rows.push_back({j.at("iteration"), j.at("val_brain_dsc"),
                    j.value("val_ticv_dsc", -1.0), j.value("val_pfv_dsc", -1.0),
                    j.contains("val_ticv_dsc")});
  }
  if (rows.empty()) throw ValidationError("log has no validation rows");

  const double W = 800, H = 480, ml = 60, mr = 20, mt = 20, mb = 40;
  int64_t max_it = rows.back().it;
  auto X = [&](double it) { return ml + (W - ml - mr) * it / std::max<int64_t>(1, max_it); };
  auto Y = [&](double d) { return mt + (H - mt - mb) * (1.0 - d); };
  auto poly = [&](auto get, const char* color) {
    std::string s = "<polyline fill=\"none\" stroke=\"" + std::string(color) +
                    "\" stroke-width=\"1.5\" points=\"";
    for (const auto& r : rows) s += std::to_string(X(r.it)) + "," + std::to_string(Y(get(r))) + " ";
    return s + "\"/>\n";
  };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
      << "\" height=\"" << H << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (double d = 0; d <= 1.001; d += 0.25)
    svg << "<line x1=\"" << ml << "\" y1=\"" << Y(d) << "\" x2=\"" << W - mr
        << "\" y2=\"" << Y(d) << "\" stroke=\"#ddd\"/>"
        << "<text x=\"10\" y=\"" << Y(d) + 4 << "\" font-size=\"12\">" << d
        << "</text>\n";
  svg << poly([](const Row& r) { return r.brain; }, "#1f77b4");
  svg << "<text x=\"" << ml << "\" y=\"" << mt << "\" font-size=\"12\" fill=\"#1f77b4\">brain DSC</text>\n";
  if (rows.front().has_icv) {
    svg << poly([](const Row& r) { return r.ticv; }, "#d62728");
    svg << poly([](const Row& r) { return r.pfv; }, "#2ca02c");
    svg << "<text x=\"" << ml + 90 << "\" y=\"" << mt << "\" font-size=\"12\" fill=\"#d62728\">TICV</text>\n";
    svg << "<text x=\"" << ml + 140 << "\" y=\"" << mt << "\" font-size=\"12\" fill=\"#2ca02c\">PFV</text>\n";
  }
  if (switch_iteration >= 0 && switch_iteration <= max_it)
    svg << "<line x1=\"" << X(switch_iteration) << "\" y1=\"" << mt
        << "\" x2=\"" << X(switch_iteration) << "\" y2=\"" << H - mb
        << "\" stroke=\"#888\" stroke-dasharray=\"4,3\"/>"
        << "<text x=\"" << X(switch_iteration) + 4 << "\" y=\"" << H - mb - 6
        << "\" font-size=\"11\" fill=\"#888\">weight switch</text>\n";
  svg << "<text x=\"" << (W / 2 - 30) << "\" y=\"" << H - 10
      << "\" font-size=\"12\">iteration</text>\n";
  svg << "</svg>\n";

  fs::path outp(out_path);
  if (outp.has_parent_path()) fs::create_directories(outp.parent_path());
  std::ofstream out(outp);
  out << svg.str();
  if (!out) throw std::runtime_error("cannot write " + out_path);
  std::cout << "wrote " << out_path << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Volumetric whole-brain segmentation with TICV/PFV estimation"};
  app.require_subcommand(1);

  // phantom
  auto* ph = app.add_subcommand("phantom", "Generate a synthetic cohort");
  std::string ph_out;
  int ph_n = 45, ph_regions = 3;
  std::vector<int64_t> ph_grid{96, 96, 96};
  double ph_noise = 0.01;
  uint64_t ph_seed = 0;
  ph->add_option("--out", ph_out, "Cohort output directory")->required();
  ph->add_option("--subjects", ph_n, "Number of subjects");
  ph->add_option("--regions", ph_regions, "Number of brain regions (1..132)");
  ph->add_option("--grid", ph_grid, "Grid shape X Y Z")->expected(3);
  ph->add_option("--noise", ph_noise, "Gaussian noise sigma");
  ph->add_option("--seed", ph_seed, "Cohort seed");

  // pretrain / finetune
  std::string tr_config, tr_data, tr_out, tr_pretrained, tr_split;
  std::vector<std::string> tr_sets;
  bool tr_toy = false, tr_dump = false;
  for (const char* stage : {"pretrain", "finetune"}) {
    auto* sc = app.add_subcommand(stage, std::string("Run the ") + stage + " stage");
    sc->add_option("--config", tr_config, "JSON config file");
    sc->add_option("--set", tr_sets, "Override config keys (dotted.key=value)");
    sc->add_option("--data", tr_data, "Cohort directory");
    sc->add_option("--out", tr_out, "Output directory");
    sc->add_option("--split", tr_split, "train,val,test counts (e.g. 32,8,5)");
    sc->add_flag("--toy", tr_toy, "Desk-scale model preset");
    sc->add_flag("--dump-config", tr_dump, "Print the effective config and exit");
    if (std::string(stage) == "finetune")
      sc->add_option("--pretrained", tr_pretrained, "Pretrain checkpoint directory");
  }

  // segment
  auto* seg = app.add_subcommand("segment", "Segment a T1w volume");
  std::string seg_in, seg_ckpt, seg_out, seg_stem;
  bool seg_stripped = false, seg_passthrough = false, seg_lcc = false;
  seg->add_option("--input", seg_in, "Input NIfTI")->required();
  seg->add_option("--checkpoint", seg_ckpt, "Model checkpoint directory")->required();
  seg->add_option("--out", seg_out, "Output directory")->required();
  seg->add_option("--stem", seg_stem, "Output filename stem (default: input stem)");
  seg->add_flag("--skull-stripped", seg_stripped,
                "Input is skull-stripped (requires a matching model)");
  seg->add_flag("--allow-passthrough", seg_passthrough,
                "Skip unavailable external tools (N4, registration)");
  seg->add_flag("--largest-component", seg_lcc,
                "Keep only the largest connected TICV/PFV component");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score predictions against ground truth");
  std::string ev_pred, ev_gt, ev_out;
  uint64_t ev_seed = 0;
  ev->add_option("--pred", ev_pred, "Directory with <subject>_seg/_ticv/_pfv files")->required();
  ev->add_option("--gt", ev_gt, "Ground-truth cohort directory")->required();
  ev->add_option("--out", ev_out, "Report path prefix")->required();
  ev->add_option("--seed", ev_seed, "Bootstrap seed");

  // plot
  auto* pl = app.add_subcommand("plot", "Render validation curves from a training log");
  std::string pl_log, pl_out;
  int64_t pl_switch = 20000;
  pl->add_option("--log", pl_log, "train_log.jsonl path")->required();
  pl->add_option("--out", pl_out, "Output SVG path")->required();
  pl->add_option("--switch-iteration", pl_switch,
                 "Loss-weight switch marker position (-1 to hide)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (ph->parsed()) {
      PhantomSpec spec;
      spec.shape = {ph_grid[0], ph_grid[1], ph_grid[2]};
      spec.num_regions = ph_regions;
      spec.noise_sigma = ph_noise;
      generate_cohort(ph_n, spec, ph_seed, ph_out);
      write_echo(json{{"command", "phantom"},
                      {"subjects", ph_n},
                      {"regions", ph_regions},
                      {"grid", ph_grid},
                      {"noise", ph_noise},
                      {"seed", ph_seed}},
                 fs::path(ph_out) / "config_echo.json");
      std::cout << "wrote " << ph_n << " subjects to " << ph_out << "\n";
      return kOk;
    }
    for (const char* stage : {"pretrain", "finetune"})
      if (app.get_subcommand(stage)->parsed())
        return run_train_stage(stage, tr_config, tr_sets, tr_data, tr_out,
                               tr_pretrained, tr_split, tr_toy, tr_dump);
    if (seg->parsed())
      return cmd_segment(seg_in, seg_ckpt, seg_out, seg_stripped,
                         seg_passthrough, seg_lcc, seg_stem);
    if (ev->parsed()) return cmd_evaluate(ev_pred, ev_gt, ev_out, ev_seed);
    if (pl->parsed()) return cmd_plot(pl_log, pl_out, pl_switch);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
