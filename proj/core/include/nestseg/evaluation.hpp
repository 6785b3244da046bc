#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nestseg/core_types.hpp"

namespace nestseg {

// 2|A∩B| / (|A|+|B|); both masks empty counts as perfect agreement (1.0).
double dsc(const BinaryMask& pred, const BinaryMask& gt);

struct RegionDsc {
  std::map<int, double> per_class;  // ids 1..132
  double mean = 0;                  // over ids 1..132, background excluded
  std::vector<int> absent_classes;  // ids empty in both maps (scored 1.0)
};
RegionDsc region_dsc(const LabelMap& pred, const LabelMap& gt);

// Nonparametric percentile bootstrap over subjects.
std::pair<double, double> bootstrap_ci(const std::vector<double>& scores,
                                       double level = 0.95,
                                       int resamples = 10000,
                                       uint64_t seed = 0);

struct SubjectEval {
  std::string subject;
  double brain = 0;  // mean region DSC
  double ticv = 0;
  double pfv = 0;
  double ticv_volume_mm3 = 0;  // predicted-mask volumes
  double pfv_volume_mm3 = 0;
  std::map<int, double> per_class;
  std::vector<int> absent_classes;
};

SubjectEval evaluate_subject(const std::string& subject, const LabelMap& pred,
                             const LabelMap& gt, const BinaryMask& pred_ticv,
                             const BinaryMask& gt_ticv,
                             const BinaryMask& pred_pfv,
                             const BinaryMask& gt_pfv);

struct DscColumn {
  double dsc = 0, lci = 0, uci = 0;
};

struct DscReport {
  DscColumn brain, ticv, pfv;
  std::vector<SubjectEval> subjects;

  static DscReport from_subjects(std::vector<SubjectEval> subjects,
                                 uint64_t seed = 0);
};

// Writes <prefix>.json, <prefix>.csv, and <prefix>.md (three-column layout:
// brain/TICV/PFV, each with DSC, LCI, UCI).
void emit_report(const DscReport& report, const std::string& prefix);
DscReport load_report_json(const std::string& path);

double mask_volume_mm3(const BinaryMask& mask);

}  // namespace nestseg
