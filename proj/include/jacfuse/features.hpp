// features.hpp - deterministic convolutional feature bank for the forest models.
#pragma once

#include <cstdint>

#include <Eigen/Dense>

#include "jacfuse/volume.hpp"

namespace jacfuse {

// Bank of fixed 3x3x3 filters drawn once from a seeded unit-variance
// distribution and orthonormalized in blocks of 27 (the patch dimension).
struct FeatureExtractor {
  Eigen::MatrixXd filters; // n_filters x 27, row-major patch order (z,y,x)

  int n_filters() const { return static_cast<int>(filters.rows()); }
  int n_features() const { return 3 * n_filters(); }

  static FeatureExtractor create(std::uint64_t seed, int n_filters = 32);
};

// Valid convolution with every filter, then (mean, std, max) of each response
// over the masked interior. Output is laid out filter-major:
// [mean_0, std_0, max_0, mean_1, ...], length 3 * n_filters.
Eigen::VectorXd extract_features(const Volume3D &vol, const Mask3D &mask,
                                 const FeatureExtractor &fx);

} // namespace jacfuse
