#include "jacfuse/features.hpp"

#include <cmath>

#include "jacfuse/errors.hpp"
#include "jacfuse/rng.hpp"

namespace jacfuse {

FeatureExtractor FeatureExtractor::create(std::uint64_t seed, int n_filters) {
  if (n_filters < 1)
    throw InvalidConfig("feature bank needs at least one filter");
  constexpr int kPatch = 27;
  Rng rng = make_rng(seed, hash_string("feature-bank"));
  Eigen::MatrixXd f(n_filters, kPatch);
  for (int r = 0; r < n_filters; ++r)
    for (int c = 0; c < kPatch; ++c)
      f(r, c) = normal(rng);
  // Gram-Schmidt within blocks of 27 rows; 27 is the patch rank, so each
  // block is mutually orthonormal and later blocks restart the process.
  for (int r = 0; r < n_filters; ++r) {
    const int block_start = (r / kPatch) * kPatch;
    for (int p = block_start; p < r; ++p)
      f.row(r) -= f.row(r).dot(f.row(p)) * f.row(p);
    double norm = f.row(r).norm();
    while (norm < 1e-8) { // vanishing residual, redraw this row
      for (int c = 0; c < kPatch; ++c)
        f(r, c) = normal(rng);
      for (int p = block_start; p < r; ++p)
        f.row(r) -= f.row(r).dot(f.row(p)) * f.row(p);
      norm = f.row(r).norm();
    }
    f.row(r) /= norm;
  }
  return FeatureExtractor{std::move(f)};
}

Eigen::VectorXd extract_features(const Volume3D &vol, const Mask3D &mask,
                                 const FeatureExtractor &fx) {
  const auto &d = vol.dims;
  if (mask.dims != d)
    throw ShapeMismatch("feature mask dims differ from volume dims");
  if (d.nx < 3 || d.ny < 3 || d.nz < 3)
    throw ShapeMismatch("volume too small for a 3x3x3 filter");

  const int vx = d.nx - 2, vy = d.ny - 2, vz = d.nz - 2;
  const std::size_t n_valid =
      static_cast<std::size_t>(vx) * vy * vz;

  // Gather masked patch columns once; all filters share them via one GEMM.
  std::vector<std::size_t> cols;
  cols.reserve(n_valid / 2);
  for (int k = 0; k < vz; ++k)
    for (int j = 0; j < vy; ++j)
      for (int i = 0; i < vx; ++i)
        if (mask.data[d.index(i + 1, j + 1, k + 1)])
          cols.push_back(d.index(i, j, k)); // anchor corner, offsets add +0..2
  if (cols.empty())
    throw EmptyMask("no masked voxels inside the valid convolution region");

  Eigen::MatrixXd patches(27, static_cast<Eigen::Index>(cols.size()));
  for (Eigen::Index c = 0; c < patches.cols(); ++c) {
    const std::size_t base = cols[static_cast<std::size_t>(c)];
    int row = 0;
    for (int dz = 0; dz < 3; ++dz)
      for (int dy = 0; dy < 3; ++dy)
        for (int dx = 0; dx < 3; ++dx)
          patches(row++, c) = vol.data[static_cast<Eigen::Index>(
              base + static_cast<std::size_t>(dx) +
              static_cast<std::size_t>(d.nx) *
                  (static_cast<std::size_t>(dy) +
                   static_cast<std::size_t>(d.ny) *
                       static_cast<std::size_t>(dz)))];
  }

  const Eigen::MatrixXd responses = fx.filters * patches;
  const double inv_n = 1.0 / static_cast<double>(responses.cols());
  Eigen::VectorXd out(fx.n_features());
  for (int r = 0; r < fx.n_filters(); ++r) {
    const auto row = responses.row(r);
    const double mean = row.sum() * inv_n;
    const double var = (row.array() - mean).square().sum() * inv_n;
    out[3 * r] = mean;
    out[3 * r + 1] = std::sqrt(std::max(var, 0.0));
    out[3 * r + 2] = row.maxCoeff();
  }
  return out;
}

} // namespace jacfuse
