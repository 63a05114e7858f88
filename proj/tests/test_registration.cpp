#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "jacfuse/errors.hpp"
#include "jacfuse/phantom.hpp"
#include "jacfuse/registration.hpp"

using namespace jacfuse;

namespace {

Volume3D ramp_x(const Dims3 &d) {
  Volume3D v(d, 0.0);
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i)
        v.at(i, j, k) = static_cast<double>(i);
  return v;
}

Volume3D phantom_mri(ClassLabel cls, uint64_t seed, int n = 48) {
  phantom::PhantomConfig cfg;
  cfg.dims = {n, n, n};
  cfg.noise_sigma = 0.0; // geometry only; noise variants covered elsewhere
  cfg.bias_amplitude = 0.0;
  return phantom::generate_subject(cls, seed, cfg).mri;
}

} // namespace

TEST_CASE("warp with the zero field is the identity") {
  const Volume3D v = phantom_mri(ClassLabel::Normal, 1, 24);
  const auto f = DisplacementField::zeros(v.dims);
  const Volume3D w = warp(v, f);
  CHECK((w.data - v.data).abs().maxCoeff() == 0.0);
}

TEST_CASE("warp by a constant unit field shifts a ramp") {
  const Dims3 d{12, 8, 8};
  const Volume3D v = ramp_x(d);
  auto f = DisplacementField::zeros(d);
  f.dx.setConstant(1.0);
  const Volume3D w = warp(v, f);
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx - 1; ++i)
        CHECK(w.at(i, j, k) == doctest::Approx(i + 1.0).epsilon(1e-12));
}

TEST_CASE("warp is linear in image values") {
  const Volume3D v = phantom_mri(ClassLabel::MCI, 2, 24);
  Volume3D v3 = v;
  v3.data *= 3.0;
  auto f = DisplacementField::zeros(v.dims);
  for (Eigen::Index i = 0; i < f.dx.size(); ++i) {
    f.dx[i] = 0.4 * std::sin(0.1 * i);
    f.dy[i] = 0.3 * std::cos(0.07 * i);
    f.dz[i] = -0.2 * std::sin(0.05 * i + 1.0);
  }
  const Volume3D w = warp(v, f);
  const Volume3D w3 = warp(v3, f);
  CHECK((w3.data - 3.0 * w.data).abs().maxCoeff() < 1e-12);
}

TEST_CASE("warp_affine handles identity, integer shifts, and rejects "
          "singular transforms") {
  const Dims3 d{10, 10, 10};
  const Volume3D v = ramp_x(d);

  AffineTransform id;
  const Volume3D w = warp_affine(v, id, d);
  CHECK((w.data - v.data).abs().maxCoeff() == 0.0);

  AffineTransform shift;
  shift.matrix(0, 3) = 2.0; // sample moving at x+2
  const Volume3D ws = warp_affine(v, shift, d);
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx - 2; ++i)
        CHECK(ws.at(i, j, k) == doctest::Approx(i + 2.0).epsilon(1e-12));

  AffineTransform sing;
  sing.matrix(0, 0) = 0.0;
  CHECK_THROWS_AS(warp_affine(v, sing, d), SingularTransform);
}

TEST_CASE("affine registration of a volume to itself stays at identity") {
  const Volume3D v = phantom_mri(ClassLabel::Normal, 3);
  const AffineTransform a = register_affine(v, v, RegistrationParams{});
  CHECK((a.matrix - Eigen::Matrix4d::Identity()).norm() < 0.05);
}

TEST_CASE("affine registration recovers a 3-voxel translation") {
  const Volume3D fixed = phantom_mri(ClassLabel::Normal, 4);
  AffineTransform truth;
  truth.matrix(1, 3) = 3.0;
  const Volume3D moving = warp_affine(fixed, truth, fixed.dims);
  // moving(x) = fixed(x + 3y), so mapping fixed->moving must send x to x-3y.
  const AffineTransform rec = register_affine(moving, fixed,
                                              RegistrationParams{});
  CHECK(std::abs(rec.matrix(1, 3) + 3.0) < 0.5);
  CHECK(std::abs(rec.matrix(0, 3)) < 0.5);
  CHECK(std::abs(rec.matrix(2, 3)) < 0.5);
  CHECK((rec.matrix.topLeftCorner<3, 3>() - Eigen::Matrix3d::Identity())
            .norm() < 0.05);
}

TEST_CASE("affine registration recovers a 1.1x isotropic scale") {
  const Volume3D fixed = phantom_mri(ClassLabel::Normal, 5);
  const Eigen::Vector3d c(23.5, 23.5, 23.5);
  AffineTransform truth; // scale about the volume centre
  truth.matrix.topLeftCorner<3, 3>() *= 1.1;
  truth.matrix.topRightCorner<3, 1>() = c - 1.1 * c;
  const Volume3D moving = warp_affine(fixed, truth, fixed.dims);
  const AffineTransform rec = register_affine(moving, fixed,
                                              RegistrationParams{});
  // Recovered mapping fixed->moving should be the inverse scale 1/1.1.
  for (int i = 0; i < 3; ++i)
    CHECK(std::abs(rec.matrix(i, i) - 1.0 / 1.1) < 0.03);
}

TEST_CASE("deformable registration of identical volumes returns a near-zero "
          "field") {
  const Volume3D v = phantom_mri(ClassLabel::MildAD, 6);
  const DisplacementField f = register_deformable(v, v,
                                                  RegistrationParams{});
  CHECK(f.mean_magnitude() < 0.05);
}

TEST_CASE("deformable registration recovers a known smooth warp") {
  phantom::PhantomConfig pcfg;
  const auto subj = phantom::generate_subject(ClassLabel::Normal, 7, pcfg);
  const Volume3D &moving = subj.mri;
  const Dims3 d = moving.dims;

  // Gaussian displacement bump, peak 3 voxels, inside the head.
  auto truth = DisplacementField::zeros(d);
  const Eigen::Vector3d c0(26.0, 22.0, 24.0);
  const double sigma = 7.0;
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        const double r2 = (Eigen::Vector3d(i, j, k) - c0).squaredNorm();
        const double g = std::exp(-0.5 * r2 / (sigma * sigma));
        const auto idx = static_cast<Eigen::Index>(d.index(i, j, k));
        truth.dx[idx] = 3.0 * g;
        truth.dy[idx] = -1.5 * g;
        truth.dz[idx] = 1.0 * g;
      }
  const Volume3D fixed = warp(moving, truth);

  const DisplacementField rec = register_deformable(moving, fixed,
                                                    RegistrationParams{});
  double epe_sum = 0.0;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < subj.brain_mask.data.size(); ++i) {
    if (!subj.brain_mask.data[i])
      continue;
    const auto t = static_cast<Eigen::Index>(i);
    const double ex = rec.dx[t] - truth.dx[t];
    const double ey = rec.dy[t] - truth.dy[t];
    const double ez = rec.dz[t] - truth.dz[t];
    epe_sum += std::sqrt(ex * ex + ey * ey + ez * ez);
    ++n;
  }
  CHECK(epe_sum / n < 0.5);

  // The recovered field never fits worse than the input alignment.
  CHECK(ssd(warp(moving, rec), fixed) <= ssd(moving, fixed));
}

TEST_CASE("deformable stage never exceeds the affine-only SSD on phantom "
          "pairs") {
  const RegistrationParams params;
  for (uint64_t seed : {21u, 22u}) {
    const Volume3D fixed = phantom_mri(ClassLabel::Normal, seed);
    const Volume3D moving = phantom_mri(ClassLabel::SevereAD, seed + 100);
    const AffineTransform a = register_affine(moving, fixed, params);
    const Volume3D pre = warp_affine(moving, a, fixed.dims);
    const DisplacementField f = register_deformable(pre, fixed, params);
    CHECK(ssd(warp(pre, f), fixed) <= ssd(pre, fixed));
  }
}

TEST_CASE("deformable registration is deterministic") {
  const Volume3D fixed = phantom_mri(ClassLabel::Normal, 30, 24);
  const Volume3D moving = phantom_mri(ClassLabel::MCI, 31, 24);
  const DisplacementField a = register_deformable(moving, fixed,
                                                  RegistrationParams{});
  const DisplacementField b = register_deformable(moving, fixed,
                                                  RegistrationParams{});
  CHECK((a.dx - b.dx).abs().maxCoeff() == 0.0);
  CHECK((a.dy - b.dy).abs().maxCoeff() == 0.0);
  CHECK((a.dz - b.dz).abs().maxCoeff() == 0.0);
}

namespace {

RegistrationSubjectInput make_input(const std::string &id, ClassLabel label,
                                    uint64_t seed, bool with_mri,
                                    bool with_ct) {
  phantom::PhantomConfig cfg;
  cfg.dims = {32, 32, 32};
  const auto subj = phantom::generate_subject(label, seed, cfg);
  RegistrationSubjectInput in;
  in.id = id;
  in.label = label;
  if (with_mri)
    in.mri = subj.mri;
  if (with_ct) {
    in.ct = subj.ct;
    in.ct_mask = subj.brain_mask;
  }
  return in;
}

} // namespace

TEST_CASE("registration pipeline uses each subject's own MRI when present") {
  const Volume3D tmpl = phantom_mri(ClassLabel::Normal, 40, 32);
  std::vector<RegistrationSubjectInput> subjects{
      make_input("s000", ClassLabel::Normal, 41, true, true),
      make_input("s001", ClassLabel::Normal, 42, true, true),
  };
  const auto out = register_pipeline(subjects, tmpl, RegistrationParams{});
  REQUIRE(out.size() == 2);
  for (int i = 0; i < 2; ++i) {
    CHECK(out[i].mri_field.has_value());
    CHECK(out[i].ct_field.has_value());
    CHECK(out[i].ct_reference_id == subjects[i].id);
    CHECK(out[i].mri_field->dims == tmpl.dims);
  }
}

TEST_CASE("registration pipeline borrows a same-label donor MRI") {
  const Volume3D tmpl = phantom_mri(ClassLabel::Normal, 50, 32);
  std::vector<RegistrationSubjectInput> subjects{
      make_input("s000", ClassLabel::MCI, 51, true, true),
      make_input("s001", ClassLabel::MCI, 52, false, true), // missing MRI
      make_input("s002", ClassLabel::Normal, 53, true, true),
  };
  const auto out = register_pipeline(subjects, tmpl, RegistrationParams{});
  CHECK_FALSE(out[1].mri_field.has_value());
  CHECK(out[1].ct_field.has_value());
  CHECK(out[1].ct_reference_id == "s000"); // only same-label donor

  // No same-label donor at all: the MCI subject cannot register its CT.
  std::vector<RegistrationSubjectInput> orphan{
      make_input("s000", ClassLabel::Normal, 54, true, true),
      make_input("s001", ClassLabel::MCI, 55, false, true),
  };
  CHECK_THROWS_AS(register_pipeline(orphan, tmpl, RegistrationParams{}),
                  NoDonorAvailable);
}

TEST_CASE("displacement fields round-trip through 4D NIfTI") {
  const Dims3 d{10, 12, 14};
  auto f = DisplacementField::zeros(d);
  for (Eigen::Index i = 0; i < f.dx.size(); ++i) {
    f.dx[i] = std::sin(0.1 * i);
    f.dy[i] = 0.25 * i;
    f.dz[i] = -0.125 * i;
  }
  const auto dir = std::filesystem::temp_directory_path() / "jacfuse_ftest";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "field.nii").string();
  write_field(f, path);
  const DisplacementField back = read_field(path);
  CHECK(back.dims == d);
  CHECK((back.dx - f.dx).abs().maxCoeff() == 0.0);
  CHECK((back.dy - f.dy).abs().maxCoeff() == 0.0);
  CHECK((back.dz - f.dz).abs().maxCoeff() == 0.0);
  std::filesystem::remove_all(dir);
}
