#include "jacfuse/jacobian.hpp"

#include <cmath>

#include "jacfuse/errors.hpp"

namespace jacfuse {

namespace {

// d a / d axis at (i,j,k), unit voxel spacing.
inline double partial(const Eigen::ArrayXd &a, const Dims3 &d, int i, int j,
                      int k, int axis) {
  const int n[3] = {d.nx, d.ny, d.nz};
  const long stride[3] = {1, d.nx, static_cast<long>(d.nx) * d.ny};
  const int pos[3] = {i, j, k};
  const long idx = static_cast<long>(d.index(i, j, k));
  const int p = pos[axis];
  if (p == 0)
    return a[idx + stride[axis]] - a[idx];
  if (p == n[axis] - 1)
    return a[idx] - a[idx - stride[axis]];
  return 0.5 * (a[idx + stride[axis]] - a[idx - stride[axis]]);
}

void check_dims(const Dims3 &d) {
  if (d.nx < 2 || d.ny < 2 || d.nz < 2)
    throw DimensionMismatch("jacobian: need >= 2 voxels per axis");
}

} // namespace

std::vector<Eigen::Matrix3d>
jacobian_matrix_field(const DisplacementField &field) {
  check_dims(field.dims);
  const auto &d = field.dims;
  const Eigen::ArrayXd *comp[3] = {&field.dx, &field.dy, &field.dz};
  std::vector<Eigen::Matrix3d> out(d.count());
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c)
            m(r, c) += partial(*comp[r], d, i, j, k, c);
        out[d.index(i, j, k)] = m;
      }
  return out;
}

JacobianMap jacobian_determinant_map(const DisplacementField &field,
                                     std::string provenance) {
  check_dims(field.dims);
  const auto &d = field.dims;
  JacobianMap map;
  map.provenance = std::move(provenance);
  map.det.dims = d;
  map.det.data.resize(static_cast<Eigen::Index>(d.count()));
  const Eigen::ArrayXd *comp[3] = {&field.dx, &field.dy, &field.dz};
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c)
            m(r, c) += partial(*comp[r], d, i, j, k, c);
        map.det.data[static_cast<Eigen::Index>(d.index(i, j, k))] =
            m.determinant();
      }
  return map;
}

std::vector<DeformationType> classify_deformation(const JacobianMap &jmap,
                                                  double eps) {
  std::vector<DeformationType> out(jmap.det.data.size());
  for (Eigen::Index i = 0; i < jmap.det.data.size(); ++i) {
    const double det = jmap.det.data[i];
    if (std::abs(det - 1.0) <= eps)
      out[i] = DeformationType::NoChange;
    else
      out[i] = det < 1.0 ? DeformationType::Compression
                         : DeformationType::Expansion;
  }
  return out;
}

} // namespace jacfuse
