#include "nestseg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include "json.hpp"

namespace nestseg {

using nlohmann::json;

double dsc(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.nx != gt.nx || pred.ny != gt.ny || pred.nz != gt.nz)
    throw std::invalid_argument("dsc: grid mismatch");
  int64_t inter = 0, a = 0, b = 0;
  for (int64_t i = 0; i < pred.voxels(); ++i) {
    a += pred.data[i];
    b += gt.data[i];
    inter += pred.data[i] & gt.data[i];
  }
  if (a + b == 0) return 1.0;
  return 2.0 * inter / static_cast<double>(a + b);
}

RegionDsc region_dsc(const LabelMap& pred, const LabelMap& gt) {
  if (pred.nx != gt.nx || pred.ny != gt.ny || pred.nz != gt.nz)
    throw std::invalid_argument("region_dsc: grid mismatch");
  if (!pred.protocol || !gt.protocol ||
      pred.protocol->num_classes() != gt.protocol->num_classes())
    throw std::invalid_argument("region_dsc: protocol mismatch");
  const int C = gt.protocol->num_classes();
  std::vector<int64_t> inter(C, 0), np(C, 0), ng(C, 0);
  for (int64_t i = 0; i < pred.voxels(); ++i) {
    uint16_t p = pred.data[i], g = gt.data[i];
    np[p]++;
    ng[g]++;
    if (p == g) inter[p]++;
  }
  RegionDsc r;
  double sum = 0;
  for (int c = 1; c < C; ++c) {
    double d;
    if (np[c] + ng[c] == 0) {
      d = 1.0;
      r.absent_classes.push_back(c);
    } else {
      d = 2.0 * inter[c] / static_cast<double>(np[c] + ng[c]);
    }
    r.per_class[c] = d;
    sum += d;
  }
  r.mean = sum / (C - 1);
  return r;
}

std::pair<double, double> bootstrap_ci(const std::vector<double>& scores,
                                       double level, int resamples,
                                       uint64_t seed) {
  if (scores.size() < 2)
    throw std::invalid_argument("bootstrap_ci: need at least 2 subjects");
  if (level <= 0 || level >= 1)
    throw std::invalid_argument("bootstrap_ci: level outside (0,1)");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> pick(0, scores.size() - 1);
  std::vector<double> means(resamples);
  for (int r = 0; r < resamples; ++r) {
    double s = 0;
    for (size_t i = 0; i < scores.size(); ++i) s += scores[pick(rng)];
    means[r] = s / scores.size();
  }
  std::sort(means.begin(), means.end());
  auto pct = [&](double q) {
    double pos = q * (resamples - 1);
    size_t lo = static_cast<size_t>(pos);
    size_t hi = std::min<size_t>(lo + 1, resamples - 1);
    double f = pos - lo;
    return means[lo] * (1 - f) + means[hi] * f;
  };
  double alpha = (1 - level) / 2;
  return {pct(alpha), pct(1 - alpha)};
}

double mask_volume_mm3(const BinaryMask& mask) {
  int64_t n = 0;
  for (uint8_t v : mask.data) n += v;
  return n * std::abs(mask.affine.det3());
}

SubjectEval evaluate_subject(const std::string& subject, const LabelMap& pred,
                             const LabelMap& gt, const BinaryMask& pred_ticv,
                             const BinaryMask& gt_ticv,
                             const BinaryMask& pred_pfv,
                             const BinaryMask& gt_pfv) {
  SubjectEval e;
  e.subject = subject;
  RegionDsc r = region_dsc(pred, gt);
  e.brain = r.mean;
  e.per_class = std::move(r.per_class);
  e.absent_classes = std::move(r.absent_classes);
  e.ticv = dsc(pred_ticv, gt_ticv);
  e.pfv = dsc(pred_pfv, gt_pfv);
  e.ticv_volume_mm3 = mask_volume_mm3(pred_ticv);
  e.pfv_volume_mm3 = mask_volume_mm3(pred_pfv);
  return e;
}

DscReport DscReport::from_subjects(std::vector<SubjectEval> subjects,
                                   uint64_t seed) {
  if (subjects.empty())
    throw std::invalid_argument("DscReport: no subjects");
  DscReport rep;
  rep.subjects = std::move(subjects);
  auto column = [&](auto getter) {
    std::vector<double> s;
    for (const auto& e : rep.subjects) s.push_back(getter(e));
    DscColumn c;
    c.dsc = 0;
    for (double v : s) c.dsc += v;
    c.dsc /= s.size();
    if (s.size() >= 2) {
      std::tie(c.lci, c.uci) = bootstrap_ci(s, 0.95, 10000, seed);
      // the point estimate is the sample mean; keep the invariant exact
      c.lci = std::min(c.lci, c.dsc);
      c.uci = std::max(c.uci, c.dsc);
    } else {
      c.lci = c.uci = c.dsc;
    }
    return c;
  };
  rep.brain = column([](const SubjectEval& e) { return e.brain; });
  rep.ticv = column([](const SubjectEval& e) { return e.ticv; });
  rep.pfv = column([](const SubjectEval& e) { return e.pfv; });
  return rep;
}

namespace {

json column_json(const DscColumn& c) {
  return json{{"dsc", c.dsc}, {"lci", c.lci}, {"uci", c.uci}};
}

DscColumn column_from_json(const json& j) {
  return DscColumn{j.at("dsc"), j.at("lci"), j.at("uci")};
}

}  // namespace

void emit_report(const DscReport& rep, const std::string& prefix) {
  json subs = json::array();
  for (const auto& e : rep.subjects) {
    json pc = json::object();
    for (const auto& [id, d] : e.per_class) pc[std::to_string(id)] = d;
    subs.push_back(json{{"subject", e.subject},
                        {"brain", e.brain},
                        {"ticv", e.ticv},
                        {"pfv", e.pfv},
                        {"ticv_volume_mm3", e.ticv_volume_mm3},
                        {"pfv_volume_mm3", e.pfv_volume_mm3},
                        {"per_class", pc},
                        {"absent_classes", e.absent_classes}});
  }
  json j{{"brain", column_json(rep.brain)},
         {"ticv", column_json(rep.ticv)},
         {"pfv", column_json(rep.pfv)},
         {"subjects", subs}};
  {
    std::ofstream out(prefix + ".json");
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("emit_report: cannot write " + prefix + ".json");
  }
  {
    std::ofstream out(prefix + ".csv");
    out << "structure,dsc,lci,uci\n";
    out << "brain," << rep.brain.dsc << "," << rep.brain.lci << "," << rep.brain.uci << "\n";
    out << "ticv," << rep.ticv.dsc << "," << rep.ticv.lci << "," << rep.ticv.uci << "\n";
    out << "pfv," << rep.pfv.dsc << "," << rep.pfv.lci << "," << rep.pfv.uci << "\n";
    if (!out) throw std::runtime_error("emit_report: cannot write " + prefix + ".csv");
  }
  {
    std::ofstream out(prefix + ".md");
    char buf[256];
    out << "| | Brain | | | TICV | | | PFV | | |\n";
    out << "|---|---|---|---|---|---|---|---|---|---|\n";
    out << "| | DSC | LCI | UCI | DSC | LCI | UCI | DSC | LCI | UCI |\n";
    std::snprintf(buf, sizeof(buf),
                  "| mean | %.3f | %.3f | %.3f | %.3f | %.3f | %.3f | %.3f | %.3f | %.3f |\n",
                  rep.brain.dsc, rep.brain.lci, rep.brain.uci, rep.ticv.dsc,
                  rep.ticv.lci, rep.ticv.uci, rep.pfv.dsc, rep.pfv.lci,
                  rep.pfv.uci);
    out << buf;
    if (!out) throw std::runtime_error("emit_report: cannot write " + prefix + ".md");
  }
}

DscReport load_report_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_report_json: cannot open " + path);
  json j = json::parse(in);
  DscReport rep;
  rep.brain = column_from_json(j.at("brain"));
  rep.ticv = column_from_json(j.at("ticv"));
  rep.pfv = column_from_json(j.at("pfv"));
  for (const auto& s : j.at("subjects")) {
    SubjectEval e;
    e.subject = s.at("subject");
    e.brain = s.at("brain");
    e.ticv = s.at("ticv");
    e.pfv = s.at("pfv");
    e.ticv_volume_mm3 = s.at("ticv_volume_mm3");
    e.pfv_volume_mm3 = s.at("pfv_volume_mm3");
    for (const auto& [k, v] : s.at("per_class").items())
      e.per_class[std::stoi(k)] = v.get<double>();
    e.absent_classes = s.at("absent_classes").get<std::vector<int>>();
    rep.subjects.push_back(std::move(e));
  }
  return rep;
}

}  // namespace nestseg
