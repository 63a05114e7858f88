// fusion.hpp - depth concatenation of Jacobian maps and probability averaging.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "jacfuse/jacobian.hpp"
#include "jacfuse/volume.hpp"

namespace jacfuse {

struct EnsemblePrediction {
  std::string id;
  Eigen::Vector4d p_cnn = Eigen::Vector4d::Zero();
  Eigen::Vector4d p_rf_mri = Eigen::Vector4d::Zero();
  Eigen::Vector4d p_rf_ct = Eigen::Vector4d::Zero();
  Eigen::Vector4d p_aggr = Eigen::Vector4d::Zero();
  int predicted = 0;
  std::optional<std::string> donor_id; // set when a modality was imputed
};

// Concatenates the maps along the depth (z) axis in the given order; width
// and height must agree. Values pass through untouched.
Volume3D early_fuse(const std::vector<JacobianMap> &maps);

// Elementwise arithmetic mean and argmax with lowest-index tie break.
std::pair<Eigen::Vector4d, int>
late_fuse(const std::vector<Eigen::Vector4d> &probs);

} // namespace jacfuse
