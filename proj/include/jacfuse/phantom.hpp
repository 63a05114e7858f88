// phantom.hpp - synthetic MRI/CT head generator with class-dependent
// atrophy (ventricle expansion, cortical thinning) for desk-scale benchmarks.
#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "jacfuse/dataset.hpp"
#include "jacfuse/registration.hpp"
#include "jacfuse/volume.hpp"

namespace jacfuse {
namespace phantom {

struct PhantomConfig {
  Dims3 dims{48, 48, 48}; // each axis divisible by 4
  // Indexed by ClassLabel; must be strictly increasing.
  std::array<double, kNumClasses> ventricle_expansion{1.00, 1.15, 1.30, 1.50};
  std::array<double, kNumClasses> cortical_thinning{1.00, 0.97, 0.93, 0.88};
  double noise_sigma = 0.02;
  double bias_amplitude = 0.3; // MRI only, multiplicative exp(amplitude * poly)
  double skull_intensity = 0.9;
  // Piecewise-linear intensity lookup applied to the CT's ideal image.
  std::vector<std::pair<double, double>> ct_intensity_remap{
      {0.00, 0.00}, {0.05, 0.02}, {0.10, 0.06}, {0.55, 0.45},
      {0.75, 0.60}, {0.90, 1.00}, {1.20, 1.10}};
  double jitter_rotation_deg = 3.0;
  double jitter_translation_vox = 2.0;
  double texture_amplitude = 0.05; // low-frequency tissue modulation
};

void validate_config(const PhantomConfig &cfg);

struct SubjectTruth {
  ClassLabel label = ClassLabel::Normal;
  double ventricle_expansion = 1.0;
  double cortical_thinning = 1.0;
  Eigen::Matrix4d jitter = Eigen::Matrix4d::Identity(); // canonical -> subject
  std::size_t ventricle_voxels = 0;
};

struct PhantomSubject {
  Volume3D mri;
  Volume3D ct;
  Mask3D brain_mask;     // ground truth, hard ellipsoid boundary
  Mask3D ventricle_mask; // ground truth
  SubjectTruth truth;
};

// Deterministic in (label, seed). MRI and CT share identical geometry; the
// MRI additionally carries a smooth multiplicative bias field, the CT an
// intensity remap. Both get Gaussian noise and a clip to [0, 1.2].
PhantomSubject generate_subject(ClassLabel label, uint64_t seed,
                                const PhantomConfig &cfg);

// Writes <id>_mri.nii / <id>_ct.nii under out_dir plus manifest.json, with
// a seeded missing_fraction of subjects dropping one random modality.
// Subjects cycle through the four classes; CDR follows the class (MildAD
// alternates 1 and 2).
DatasetManifest generate_dataset(int n_per_class, double missing_fraction,
                                 uint64_t seed, const PhantomConfig &cfg,
                                 const std::string &out_dir);

struct TemplateResult {
  Volume3D volume;
  // Mean member-to-template SSD after each refinement pass.
  std::vector<double> member_ssd;
};

// Iterative mean: average, register every member to the average, re-average.
TemplateResult build_template(const std::vector<Volume3D> &normals,
                              const RegistrationParams &params,
                              int iterations = 2);

} // namespace phantom
} // namespace jacfuse
