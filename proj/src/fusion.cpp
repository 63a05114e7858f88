#include "jacfuse/fusion.hpp"

#include <cmath>

#include "jacfuse/errors.hpp"

namespace jacfuse {

Volume3D early_fuse(const std::vector<JacobianMap> &maps) {
  if (maps.empty())
    throw EmptyInput("nothing to fuse");
  const auto &first = maps.front().det;
  int total_nz = 0;
  for (const auto &m : maps) {
    if (m.det.dims.nx != first.dims.nx || m.det.dims.ny != first.dims.ny)
      throw ShapeMismatch("fused maps must share width and height");
    total_nz += m.det.dims.nz;
  }
  Volume3D out({first.dims.nx, first.dims.ny, total_nz});
  out.spacing = first.spacing;
  out.affine = first.affine;
  Eigen::Index at = 0;
  for (const auto &m : maps) {
    // z is the slowest axis, so depth concatenation is array concatenation.
    out.data.segment(at, m.det.data.size()) = m.det.data;
    at += m.det.data.size();
  }
  return out;
}

std::pair<Eigen::Vector4d, int>
late_fuse(const std::vector<Eigen::Vector4d> &probs) {
  if (probs.empty())
    throw EmptyInput("no probability vectors to fuse");
  Eigen::Vector4d mean = Eigen::Vector4d::Zero();
  for (const auto &p : probs) {
    if (std::abs(p.sum() - 1.0) > 1e-6 || p.minCoeff() < -1e-12)
      throw MalformedDistribution("probability vector does not sum to 1");
    mean += p;
  }
  mean /= static_cast<double>(probs.size());
  int arg = 0;
  for (int c = 1; c < 4; ++c)
    if (mean[c] > mean[arg])
      arg = c;
  return {mean, arg};
}

} // namespace jacfuse
