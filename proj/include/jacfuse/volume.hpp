// volume.hpp - dense 3D scalar grids, trilinear sampling, shape resampling.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "jacfuse/errors.hpp"

namespace jacfuse {

struct Dims3 {
  int nx = 0;
  int ny = 0;
  int nz = 0;

  std::int64_t count() const {
    return static_cast<std::int64_t>(nx) * ny * nz;
  }
  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(nx) *
               (static_cast<std::size_t>(j) +
                static_cast<std::size_t>(ny) * static_cast<std::size_t>(k));
  }
  bool operator==(const Dims3 &) const = default;
};

// Dense 3D scalar grid. Data is stored x-fastest (NIfTI order): linear index
// i + nx*(j + ny*k). Voxel values are 64-bit floats; file I/O converts at the
// edge. Treated as immutable once built: operations return new volumes.
struct Volume3D {
  Dims3 dims;
  Eigen::Vector3d spacing{1.0, 1.0, 1.0}; // mm per voxel, strictly positive
  Eigen::Matrix4d affine = Eigen::Matrix4d::Identity(); // voxel -> world
  Eigen::ArrayXd data;

  Volume3D() = default;
  Volume3D(Dims3 d, double fill = 0.0)
      : dims(d), data(Eigen::ArrayXd::Constant(d.count(), fill)) {
    affine(0, 0) = spacing.x();
    affine(1, 1) = spacing.y();
    affine(2, 2) = spacing.z();
  }

  std::int64_t index(int i, int j, int k) const {
    return i + static_cast<std::int64_t>(dims.nx) *
                   (j + static_cast<std::int64_t>(dims.ny) * k);
  }
  double at(int i, int j, int k) const { return data[index(i, j, k)]; }
  double &at(int i, int j, int k) { return data[index(i, j, k)]; }

  bool in_bounds(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims.nx && j < dims.ny &&
           k < dims.nz;
  }
};

// Boolean companion grid; dims must match the paired volume.
struct Mask3D {
  Dims3 dims;
  std::vector<std::uint8_t> data;

  Mask3D() = default;
  explicit Mask3D(Dims3 d, bool fill = false)
      : dims(d), data(static_cast<std::size_t>(d.count()), fill ? 1 : 0) {}

  std::int64_t index(int i, int j, int k) const {
    return i + static_cast<std::int64_t>(dims.nx) *
                   (j + static_cast<std::int64_t>(dims.ny) * k);
  }
  bool at(int i, int j, int k) const { return data[index(i, j, k)] != 0; }
  void set(int i, int j, int k, bool v) { data[index(i, j, k)] = v ? 1 : 0; }

  std::int64_t count() const {
    std::int64_t n = 0;
    for (auto v : data) n += (v != 0);
    return n;
  }
};

// Trilinear blend of the 8 lattice neighbours of p (continuous voxel
// coordinates). Neighbours outside the grid contribute 0, the pipeline-wide
// zero-padding boundary rule: samples fade linearly to 0 within one voxel of
// the outermost centres and are exactly 0 beyond.
inline double sample_trilinear(const Volume3D &vol, const Eigen::Vector3d &p) {
  const double fx = std::floor(p.x());
  const double fy = std::floor(p.y());
  const double fz = std::floor(p.z());
  const int i0 = static_cast<int>(fx);
  const int j0 = static_cast<int>(fy);
  const int k0 = static_cast<int>(fz);
  const double tx = p.x() - fx;
  const double ty = p.y() - fy;
  const double tz = p.z() - fz;

  // Entirely outside the padded halo: nothing to blend.
  if (i0 < -1 || j0 < -1 || k0 < -1 || i0 >= vol.dims.nx ||
      j0 >= vol.dims.ny || k0 >= vol.dims.nz) {
    return 0.0;
  }

  const double wx[2] = {1.0 - tx, tx};
  const double wy[2] = {1.0 - ty, ty};
  const double wz[2] = {1.0 - tz, tz};
  double acc = 0.0;
  for (int dk = 0; dk < 2; ++dk) {
    const int k = k0 + dk;
    if (k < 0 || k >= vol.dims.nz) continue;
    for (int dj = 0; dj < 2; ++dj) {
      const int j = j0 + dj;
      if (j < 0 || j >= vol.dims.ny) continue;
      const double wjk = wy[dj] * wz[dk];
      for (int di = 0; di < 2; ++di) {
        const int i = i0 + di;
        if (i < 0 || i >= vol.dims.nx) continue;
        acc += wx[di] * wjk * vol.at(i, j, k);
      }
    }
  }
  return acc;
}

// Trilinear resample onto new dims over the node-normalized domain: target
// node u in [0,1] maps to source coordinate u*(n-1). Spacing is rescaled so
// the physical extent n*s is preserved.
Volume3D resample_to_shape(const Volume3D &vol, Dims3 target);

// Elementwise helpers used throughout the pipeline.
double ssd(const Volume3D &a, const Volume3D &b);
Volume3D apply_mask(const Volume3D &vol, const Mask3D &mask);
double masked_mean(const Volume3D &vol, const Mask3D &mask);

// Linear-interpolated order statistic, p in [0,100].
double percentile(const Eigen::ArrayXd &values, double p);

// Block average over factor^3 cells; every axis must divide evenly.
Volume3D mean_pool(const Volume3D &vol, int factor);

} // namespace jacfuse
