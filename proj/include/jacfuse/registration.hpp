// registration.hpp - affine pre-alignment, demons-style deformable
// registration, and the multi-stage orchestration (MRI to template, CT to
// the subject's registered MRI with a donor fallback).
#pragma once

#include <Eigen/Core>
#include <optional>
#include <string>
#include <vector>

#include "jacfuse/dataset.hpp"
#include "jacfuse/volume.hpp"

namespace jacfuse {

// Maps fixed-image voxel coordinates to moving-image voxel coordinates.
struct AffineTransform {
  Eigen::Matrix4d matrix = Eigen::Matrix4d::Identity();
};

// Per-voxel displacement D(x) in voxel units on the fixed grid; the warp
// samples the moving image at x + D(x).
struct DisplacementField {
  Dims3 dims{};
  Eigen::ArrayXd dx, dy, dz;

  static DisplacementField zeros(const Dims3 &d) {
    DisplacementField f;
    f.dims = d;
    const auto n = static_cast<Eigen::Index>(d.count());
    f.dx = Eigen::ArrayXd::Zero(n);
    f.dy = Eigen::ArrayXd::Zero(n);
    f.dz = Eigen::ArrayXd::Zero(n);
    return f;
  }
  double mean_magnitude() const {
    return (dx.square() + dy.square() + dz.square()).sqrt().mean();
  }
};

struct RegistrationParams {
  int pyramid_levels = 3;
  int iterations_coarse = 100; // coarsest level
  int iterations_fine = 50;    // finest level, interpolated between
  double alpha = 2.0;          // field smoothing sigma in voxels
  double step_size = 1.0;
  double convergence_tol = 1e-4; // relative SSD improvement
};

Volume3D warp(const Volume3D &moving, const DisplacementField &field);
Volume3D warp_affine(const Volume3D &moving, const AffineTransform &a,
                     const Dims3 &out_dims);

// Gradient descent on mean squared intensity difference over 12 affine
// parameters, coarse to fine; returns the best observed transform.
AffineTransform register_affine(const Volume3D &moving, const Volume3D &fixed,
                                const RegistrationParams &params);

// Demons-style scheme: per iteration the force
//   f = (F - W) grad(W) / (|grad W|^2 + (F - W)^2 + delta),  W = warp(M, D)
// is scaled by step_size, added to D, and the field is Gaussian-smoothed
// with sigma = alpha. Returns the field with the best SSD among accepted
// iterates; the zero field is always a candidate, so the result never has
// higher SSD than the input alignment.
DisplacementField register_deformable(const Volume3D &moving,
                                      const Volume3D &fixed,
                                      const RegistrationParams &params);

struct RegistrationSubjectInput {
  std::string id;
  ClassLabel label = ClassLabel::Normal;
  std::optional<Volume3D> mri; // preprocessed, brain-masked, [0,1]
  std::optional<Volume3D> ct;
  std::optional<Mask3D> ct_mask; // for donor moment signat, when ct present
};

struct SubjectRegistration {
  std::string id;
  std::optional<AffineTransform> mri_affine, ct_affine;
  std::optional<DisplacementField> mri_field, ct_field;
  std::optional<Volume3D> mri_registered, ct_registered;
  // Subject whose registered MRI served as the CT's fixed image ("" if the
  // subject has no CT).
  std::string ct_reference_id;
};

// MRI of every subject to the template (affine then deformable, the affine
// folded in by warping first so the stored field is deformable-only), then
// each CT to that subject's registered MRI. A subject without MRI borrows
// the registered MRI of the same-label subject with the closest CT
// (skewness, kurtosis) signature, ties by lexicographic id. Per-subject
// registrations are independent; the result does not depend on jobs.
std::vector<SubjectRegistration>
register_pipeline(const std::vector<RegistrationSubjectInput> &subjects,
                  const Volume3D &tmpl, const RegistrationParams &params,
                  int jobs = 1);

// Displacement fields serialize as 4D NIfTI, 3 components on the 4th axis.
void write_field(const DisplacementField &field, const std::string &path);
DisplacementField read_field(const std::string &path);

} // namespace jacfuse
