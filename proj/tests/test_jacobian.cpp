#include "doctest.h"

#include <cmath>
#include <complex>

#include "jacfuse/errors.hpp"
#include "jacfuse/jacobian.hpp"
#include "jacfuse/phantom.hpp"
#include "jacfuse/registration.hpp"
#include "jacfuse/rng.hpp"

using namespace jacfuse;

TEST_CASE("zero field gives the identity Jacobian everywhere") {
  const Dims3 d{9, 8, 7};
  const auto f = DisplacementField::zeros(d);
  const auto mats = jacobian_matrix_field(f);
  for (const auto &m : mats)
    CHECK((m - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() == 0.0);
  const auto jmap = jacobian_determinant_map(f, "zero");
  CHECK((jmap.det.data - 1.0).abs().maxCoeff() == 0.0);
  CHECK(jmap.provenance == "zero");
}

TEST_CASE("linear fields give their closed-form Jacobian at interior voxels") {
  const Dims3 d{12, 12, 12};
  auto f = DisplacementField::zeros(d);
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i)
        f.dx[static_cast<Eigen::Index>(d.index(i, j, k))] = 0.1 * i;
  const auto mats = jacobian_matrix_field(f);
  const Eigen::Matrix3d expect =
      Eigen::Vector3d(1.1, 1.0, 1.0).asDiagonal();
  for (int k = 1; k < d.nz - 1; ++k)
    for (int j = 1; j < d.ny - 1; ++j)
      for (int i = 1; i < d.nx - 1; ++i)
        CHECK((mats[d.index(i, j, k)] - expect).cwiseAbs().maxCoeff() <
              1e-10);
}

TEST_CASE("uniform 10% expansion has determinant 1.331 inside") {
  const Dims3 d{10, 10, 10};
  auto f = DisplacementField::zeros(d);
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        const auto idx = static_cast<Eigen::Index>(d.index(i, j, k));
        f.dx[idx] = 0.1 * i;
        f.dy[idx] = 0.1 * j;
        f.dz[idx] = 0.1 * k;
      }
  const auto jmap = jacobian_determinant_map(f);
  for (int k = 1; k < d.nz - 1; ++k)
    for (int j = 1; j < d.ny - 1; ++j)
      for (int i = 1; i < d.nx - 1; ++i)
        CHECK(std::abs(jmap.det.data[d.index(i, j, k)] - 1.331) < 1e-9);
}

namespace {

// Analytic low-frequency field. Frequencies are kept small enough that the
// central-difference truncation error (~A k^3 / 6) stays under 1e-6, so the
// numeric Jacobian must agree with the exact derivative of the formula.
struct AnalyticField {
  double amp[3] = {0.5, 0.35, 0.4};
  double freq[3][3] = {{0.020, 0.013, 0.017},
                       {0.011, 0.019, 0.014},
                       {0.016, 0.012, 0.018}};
  double phase[3] = {0.3, 1.1, 2.0};

  template <typename T> T component(int r, T x, T y, T z) const {
    using std::sin;
    return amp[r] *
           sin(freq[r][0] * x + freq[r][1] * y + freq[r][2] * z + phase[r]);
  }

  // Exact partial via a complex step, immune to cancellation.
  double exact_partial(int r, int c, double x, double y, double z) const {
    const double h = 1e-20;
    std::complex<double> cx(x, c == 0 ? h : 0.0);
    std::complex<double> cy(y, c == 1 ? h : 0.0);
    std::complex<double> cz(z, c == 2 ? h : 0.0);
    return component(r, cx, cy, cz).imag() / h;
  }
};

} // namespace

TEST_CASE("sampled smooth field matches the complex-step derivative oracle") {
  const Dims3 d{24, 24, 24};
  AnalyticField af;
  auto f = DisplacementField::zeros(d);
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        const auto idx = static_cast<Eigen::Index>(d.index(i, j, k));
        f.dx[idx] = af.component(0, double(i), double(j), double(k));
        f.dy[idx] = af.component(1, double(i), double(j), double(k));
        f.dz[idx] = af.component(2, double(i), double(j), double(k));
      }
  const auto mats = jacobian_matrix_field(f);

  Rng rng = make_rng(17);
  for (int t = 0; t < 10; ++t) {
    const int i = 1 + static_cast<int>(uniform_index(rng, d.nx - 2));
    const int j = 1 + static_cast<int>(uniform_index(rng, d.ny - 2));
    const int k = 1 + static_cast<int>(uniform_index(rng, d.nz - 2));
    const Eigen::Matrix3d &m = mats[d.index(i, j, k)];
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        const double expect = (r == c ? 1.0 : 0.0) +
                              af.exact_partial(r, c, i, j, k);
        CHECK(std::abs(m(r, c) - expect) < 1e-6);
      }
  }
}

TEST_CASE("composed linear fields multiply determinants") {
  const Dims3 d{14, 14, 14};
  Eigen::Matrix3d A = Eigen::Matrix3d::Identity();
  A(0, 0) = 1.05;
  A(0, 1) = 0.02;
  A(2, 2) = 0.97;
  Eigen::Matrix3d B = Eigen::Matrix3d::Identity();
  B(1, 1) = 1.08;
  B(1, 0) = -0.03;
  B(2, 0) = 0.01;
  const Eigen::Matrix3d C = A * B; // nested warps compose linearly

  auto f = DisplacementField::zeros(d);
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        const auto idx = static_cast<Eigen::Index>(d.index(i, j, k));
        const Eigen::Vector3d disp =
            (C - Eigen::Matrix3d::Identity()) * Eigen::Vector3d(i, j, k);
        f.dx[idx] = disp[0];
        f.dy[idx] = disp[1];
        f.dz[idx] = disp[2];
      }
  const auto jmap = jacobian_determinant_map(f);
  const double expect = A.determinant() * B.determinant();
  for (int k = 1; k < d.nz - 1; ++k)
    for (int j = 1; j < d.ny - 1; ++j)
      for (int i = 1; i < d.nx - 1; ++i)
        CHECK(std::abs(jmap.det.data[d.index(i, j, k)] - expect) < 1e-6);
}

TEST_CASE("classification bands on eps around 1") {
  const Dims3 d{3, 2, 2};
  JacobianMap jmap;
  jmap.det.dims = d;
  jmap.det.data.resize(12);
  jmap.det.data.setConstant(1.0);
  jmap.det.data[0] = 0.9;
  jmap.det.data[1] = 1.331;
  jmap.det.data[2] = 1.0 + 5e-7;
  jmap.det.data[3] = -0.2; // folding counts as compression
  const auto labels = classify_deformation(jmap, 1e-6);
  CHECK(labels[0] == DeformationType::Compression);
  CHECK(labels[1] == DeformationType::Expansion);
  CHECK(labels[2] == DeformationType::NoChange);
  CHECK(labels[3] == DeformationType::Compression);
  for (std::size_t i = 4; i < labels.size(); ++i)
    CHECK(labels[i] == DeformationType::NoChange);
}

TEST_CASE("jacobian needs at least 2 voxels per axis") {
  const auto f = DisplacementField::zeros({1, 5, 5});
  CHECK_THROWS_AS(jacobian_matrix_field(f), DimensionMismatch);
}

TEST_CASE("registering an atrophied subject to a normal shape detects "
          "ventricle expansion") {
  // Same seed isolates the atrophy difference: identical jitter and noise
  // draws, ventricle scaled 1.5x.
  phantom::PhantomConfig cfg;
  const auto normal = phantom::generate_subject(ClassLabel::Normal, 71, cfg);
  const auto severe = phantom::generate_subject(ClassLabel::SevereAD, 71, cfg);

  const RegistrationParams params;
  const AffineTransform a =
      register_affine(severe.mri, normal.mri, params);
  const Volume3D pre = warp_affine(severe.mri, a, normal.mri.dims);
  const DisplacementField field = register_deformable(pre, normal.mri,
                                                      params);
  const auto jmap = jacobian_determinant_map(field, "severe->normal");

  double sum = 0.0;
  std::int64_t n = 0;
  for (std::size_t i = 0; i < normal.ventricle_mask.data.size(); ++i)
    if (normal.ventricle_mask.data[i]) {
      sum += jmap.det.data[static_cast<Eigen::Index>(i)];
      ++n;
    }
  REQUIRE(n > 0);
  CHECK(sum / n > 1.0);
}
