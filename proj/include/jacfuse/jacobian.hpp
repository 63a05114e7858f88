// jacobian.hpp - Jacobian matrix field, determinant map, and deformation
// classification for displacement fields.
#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "jacfuse/registration.hpp"
#include "jacfuse/volume.hpp"

namespace jacfuse {

struct JacobianMap {
  Volume3D det;
  std::string provenance; // which field produced it
};

enum class DeformationType : int { Compression = 0, Expansion = 1, NoChange = 2 };

// J(x) = I + dD/dx, derivatives in voxel units: central differences at
// interior voxels, one-sided at the faces. Needs >= 2 voxels per axis.
std::vector<Eigen::Matrix3d>
jacobian_matrix_field(const DisplacementField &field);

JacobianMap jacobian_determinant_map(const DisplacementField &field,
                                     std::string provenance = "");

// det < 1-eps compression, det > 1+eps expansion, otherwise no change.
std::vector<DeformationType> classify_deformation(const JacobianMap &jmap,
                                                  double eps = 1e-6);

} // namespace jacfuse
