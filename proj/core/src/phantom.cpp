#include "nestseg/phantom.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>

#include "json.hpp"

namespace nestseg {

namespace fs = std::filesystem;
using nlohmann::json;

double PhantomSpec::region_intensity_at(int k) const {
  if (k < 1 || k > num_regions)
    throw std::out_of_range("region_intensity_at: label out of range");
  if (!region_intensity.empty()) return region_intensity.at(k - 1);
  if (num_regions == 1) return 0.65;
  return 0.35 + 0.6 * (k - 1) / static_cast<double>(num_regions - 1);
}

void PhantomSpec::validate() const {
  if (num_regions < 1 || num_regions > 132)
    throw std::invalid_argument("phantom: region count must be in 1..132");
  if (!region_intensity.empty() &&
      region_intensity.size() != static_cast<size_t>(num_regions))
    throw std::invalid_argument("phantom: intensity table size != region count");
  for (int a = 0; a < 3; ++a) {
    if (shape[a] < 8) throw std::invalid_argument("phantom: grid too small");
    if (axis_scale[a] <= 0 || axis_scale[a] > 0.95)
      throw std::invalid_argument("phantom: axis_scale outside (0, 0.95]");
    double semi = axis_scale[a] * (shape[a] - 1) / 2.0;
    // each shell must stay at least ~1.5 voxels thick at the equator
    if (semi / num_regions < 1.5)
      throw std::invalid_argument("phantom: grid too small for requested shells");
  }
  if (ticv_margin <= 0 || ticv_margin > 0.5)
    throw std::invalid_argument("phantom: ticv_margin outside (0, 0.5]");
  if (noise_sigma < 0) throw std::invalid_argument("phantom: negative noise sigma");
}

namespace {

Affine centered_affine(const std::array<int64_t, 3>& s) {
  Affine a = Affine::identity();
  a.m[3] = -(s[0] - 1) / 2.0;
  a.m[7] = -(s[1] - 1) / 2.0;
  a.m[11] = -(s[2] - 1) / 2.0;
  return a;
}

}  // namespace

double analytic_region_volume(const PhantomSpec& spec) {
  double a0 = spec.axis_scale[0] * (spec.shape[0] - 1) / 2.0;
  double a1 = spec.axis_scale[1] * (spec.shape[1] - 1) / 2.0;
  double a2 = spec.axis_scale[2] * (spec.shape[2] - 1) / 2.0;
  return 4.0 / 3.0 * M_PI * a0 * a1 * a2 / spec.num_regions;
}

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const auto [nx, ny, nz] = spec.shape;
  const int K = spec.num_regions;
  const double cx = (nx - 1) / 2.0, cy = (ny - 1) / 2.0, cz = (nz - 1) / 2.0;
  const double ax = spec.axis_scale[0] * cx;
  const double ay = spec.axis_scale[1] * cy;
  const double az = spec.axis_scale[2] * cz;
  const double tm = 1.0 + spec.ticv_margin;

  // posterior-inferior pocket: ellipsoid pushed toward -y, -z inside the TICV
  const double py = cy - 0.55 * ay * tm;
  const double pz = cz - 0.55 * az * tm;
  const double pax = 0.55 * ax * tm, pay = 0.55 * ay * tm, paz = 0.55 * az * tm;

  Affine aff = centered_affine(spec.shape);
  Phantom ph;
  ph.volume = Volume{std::vector<float>(static_cast<size_t>(nx * ny * nz), 0.f),
                     1, nx, ny, nz, aff, "", false};
  ph.labels = LabelMap{std::vector<uint16_t>(ph.volume.data.size(), 0),
                       nx, ny, nz, aff, LabelProtocol::braincolor()};
  ph.ticv = BinaryMask{std::vector<uint8_t>(ph.volume.data.size(), 0),
                       nx, ny, nz, aff, IcvStructure::kTicv};
  ph.pfv = BinaryMask{std::vector<uint8_t>(ph.volume.data.size(), 0),
                      nx, ny, nz, aff, IcvStructure::kPfv};

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);

  size_t i = 0;
  for (int64_t x = 0; x < nx; ++x)
    for (int64_t y = 0; y < ny; ++y)
      for (int64_t z = 0; z < nz; ++z, ++i) {
        double ux = (x - cx) / ax, uy = (y - cy) / ay, uz = (z - cz) / az;
        double rho = std::sqrt(ux * ux + uy * uy + uz * uz);
        double tx = (x - cx) / (ax * tm), ty = (y - cy) / (ay * tm),
               tz = (z - cz) / (az * tm);
        bool in_ticv = tx * tx + ty * ty + tz * tz <= 1.0;
        double qx = (x - cx) / pax, qy = (y - py) / pay, qz = (z - pz) / paz;
        bool in_pfv = in_ticv && qx * qx + qy * qy + qz * qz <= 1.0;

        double intensity = 0.0;
        if (rho <= 1.0) {
          // equal-volume shells: boundaries at (k/K)^(1/3)
          int k = std::min<int>(K, 1 + static_cast<int>(std::floor(
                                        rho * rho * rho * K)));
          ph.labels.data[i] = static_cast<uint16_t>(k);
          intensity = spec.region_intensity_at(k);
        } else if (in_ticv) {
          intensity = spec.margin_intensity;
        }
        if (in_ticv) ph.ticv.data[i] = 1;
        if (in_pfv) {
          ph.pfv.data[i] = 1;
          intensity += spec.pfv_offset;
        }
        double v = intensity + (spec.noise_sigma > 0 ? noise(rng) : 0.0);
        ph.volume.data[i] = static_cast<float>(v);
      }

  ph.volume.validate();
  ph.labels.validate();
  ph.ticv.validate();
  ph.pfv.validate();
  return ph;
}

CohortManifest generate_cohort(int n, const PhantomSpec& tmpl, uint64_t seed,
                               const std::string& dir) {
  if (n < 1) throw std::invalid_argument("generate_cohort: n must be >= 1");
  tmpl.validate();
  fs::create_directories(dir);

  CohortManifest man;
  man.n = n;
  man.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-0.05, 0.05);

  for (int s = 0; s < n; ++s) {
    PhantomSpec sp = tmpl;
    sp.seed = rng();
    for (int a = 0; a < 3; ++a)
      sp.axis_scale[a] = tmpl.axis_scale[a] * (1.0 + jitter(rng));
    char name[16];
    std::snprintf(name, sizeof(name), "sub-%03d", s);
    fs::path sub = fs::path(dir) / name;
    fs::create_directories(sub);
    Phantom ph = generate_phantom(sp);
    save_volume(ph.volume, (sub / "t1.nii.gz").string());
    save_label_map(ph.labels, (sub / "labels.nii.gz").string());
    save_mask(ph.ticv, (sub / "ticv.nii.gz").string());
    save_mask(ph.pfv, (sub / "pfv.nii.gz").string());
    man.subject_dirs.push_back(name);
  }

  json j{{"n", man.n}, {"seed", man.seed}, {"subjects", man.subject_dirs}};
  std::ofstream out(fs::path(dir) / "manifest.json");
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("generate_cohort: cannot write manifest");
  return man;
}

CohortManifest load_cohort_manifest(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw std::runtime_error("cohort manifest not found in " + dir);
  json j = json::parse(in);
  CohortManifest man;
  man.n = j.at("n").get<int>();
  man.seed = j.at("seed").get<uint64_t>();
  man.subject_dirs = j.at("subjects").get<std::vector<std::string>>();
  return man;
}

}  // namespace nestseg
