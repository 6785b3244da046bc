#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "nestseg/core_types.hpp"

namespace nestseg {

// Synthetic "brain": K concentric equal-volume ellipsoid shells labeled 1..K,
// a TICV mask that dilates the brain ellipsoid by a non-brain margin, and a
// PFV mask confined to the posterior-inferior part of the TICV. The PFV
// compartment carries a small additive intensity offset so both icv masks are
// recoverable from image content alone.
struct PhantomSpec {
  std::array<int64_t, 3> shape = {96, 96, 96};
  int num_regions = 3;  // K, labels 1..K
  double noise_sigma = 0.01;
  uint64_t seed = 0;
  // brain semi-axes as fractions of the half-extent per axis
  std::array<double, 3> axis_scale = {0.72, 0.72, 0.72};
  double ticv_margin = 0.18;     // relative dilation of the brain ellipsoid
  double margin_intensity = 0.2; // CSF/skull shell between brain and TICV edge
  double pfv_offset = 0.06;      // additive intensity inside the PFV
  std::vector<double> region_intensity;  // optional; defaults spaced in [0.35,0.95]

  double region_intensity_at(int k) const;  // k in 1..K
  void validate() const;
};

struct Phantom {
  Volume volume;
  LabelMap labels;
  BinaryMask ticv;
  BinaryMask pfv;
};

Phantom generate_phantom(const PhantomSpec& spec);

// Analytic shell volume in voxel units (1 mm isotropic): each of the K shells
// holds an equal share of the brain ellipsoid.
double analytic_region_volume(const PhantomSpec& spec);

// Writes n jittered subjects under dir/sub-NNN/{t1,labels,ticv,pfv}.nii.gz
// plus manifest.json; deterministic per seed.
struct CohortManifest {
  int n = 0;
  uint64_t seed = 0;
  std::vector<std::string> subject_dirs;  // relative to the cohort root
};
CohortManifest generate_cohort(int n, const PhantomSpec& tmpl, uint64_t seed,
                               const std::string& dir);
CohortManifest load_cohort_manifest(const std::string& dir);

}  // namespace nestseg
