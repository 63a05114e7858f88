#include "jacfuse/volume.hpp"

#include <algorithm>

namespace jacfuse {

Volume3D resample_to_shape(const Volume3D &vol, Dims3 target) {
  if (target.nx < 1 || target.ny < 1 || target.nz < 1) {
    throw Error("resample_to_shape: target dims must be >= 1");
  }
  Volume3D out(target);
  const auto src_coord = [](int idx, int m, int n) {
    if (m == 1) return 0.5 * (n - 1);
    return static_cast<double>(idx) * (n - 1) / static_cast<double>(m - 1);
  };
  for (int k = 0; k < target.nz; ++k) {
    const double z = src_coord(k, target.nz, vol.dims.nz);
    for (int j = 0; j < target.ny; ++j) {
      const double y = src_coord(j, target.ny, vol.dims.ny);
      for (int i = 0; i < target.nx; ++i) {
        const double x = src_coord(i, target.nx, vol.dims.nx);
        out.at(i, j, k) = sample_trilinear(vol, {x, y, z});
      }
    }
  }
  out.spacing = Eigen::Vector3d(
      vol.spacing.x() * vol.dims.nx / target.nx,
      vol.spacing.y() * vol.dims.ny / target.ny,
      vol.spacing.z() * vol.dims.nz / target.nz);
  out.affine = vol.affine;
  for (int a = 0; a < 3; ++a) {
    out.affine.col(0)(a) *= static_cast<double>(vol.dims.nx) / target.nx;
    out.affine.col(1)(a) *= static_cast<double>(vol.dims.ny) / target.ny;
    out.affine.col(2)(a) *= static_cast<double>(vol.dims.nz) / target.nz;
  }
  return out;
}

double ssd(const Volume3D &a, const Volume3D &b) {
  if (!(a.dims == b.dims)) {
    throw ShapeMismatch("ssd: volumes have different dims");
  }
  return (a.data - b.data).square().sum();
}

Volume3D apply_mask(const Volume3D &vol, const Mask3D &mask) {
  if (!(vol.dims == mask.dims)) {
    throw ShapeMismatch("apply_mask: mask dims differ from volume dims");
  }
  Volume3D out = vol;
  for (std::int64_t n = 0; n < vol.dims.count(); ++n) {
    if (!mask.data[static_cast<std::size_t>(n)]) out.data[n] = 0.0;
  }
  return out;
}

double masked_mean(const Volume3D &vol, const Mask3D &mask) {
  if (!(vol.dims == mask.dims)) {
    throw ShapeMismatch("masked_mean: mask dims differ from volume dims");
  }
  double sum = 0.0;
  std::int64_t n = 0;
  for (std::int64_t idx = 0; idx < vol.dims.count(); ++idx) {
    if (mask.data[static_cast<std::size_t>(idx)]) {
      sum += vol.data[idx];
      ++n;
    }
  }
  if (n == 0) throw EmptyMask("masked_mean: mask is empty");
  return sum / static_cast<double>(n);
}

Volume3D mean_pool(const Volume3D &vol, int factor) {
  if (factor < 1) throw Error("mean_pool: factor must be >= 1");
  if (vol.dims.nx % factor != 0 || vol.dims.ny % factor != 0 ||
      vol.dims.nz % factor != 0) {
    throw ShapeMismatch("mean_pool: dims must be divisible by factor");
  }
  Dims3 td{vol.dims.nx / factor, vol.dims.ny / factor, vol.dims.nz / factor};
  Volume3D out(td);
  const double inv = 1.0 / (static_cast<double>(factor) * factor * factor);
  for (int k = 0; k < td.nz; ++k) {
    for (int j = 0; j < td.ny; ++j) {
      for (int i = 0; i < td.nx; ++i) {
        double sum = 0.0;
        for (int dz = 0; dz < factor; ++dz) {
          for (int dy = 0; dy < factor; ++dy) {
            for (int dx = 0; dx < factor; ++dx) {
              sum += vol.at(i * factor + dx, j * factor + dy, k * factor + dz);
            }
          }
        }
        out.at(i, j, k) = sum * inv;
      }
    }
  }
  out.spacing = vol.spacing * static_cast<double>(factor);
  out.affine = vol.affine;
  for (int a = 0; a < 3; ++a) {
    out.affine.col(0)(a) *= factor;
    out.affine.col(1)(a) *= factor;
    out.affine.col(2)(a) *= factor;
  }
  return out;
}

double percentile(const Eigen::ArrayXd &values, double p) {
  if (values.size() == 0) throw Error("percentile: empty sample");
  std::vector<double> sorted(values.data(), values.data() + values.size());
  std::sort(sorted.begin(), sorted.end());
  const double pos = p / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = static_cast<std::size_t>(std::ceil(pos));
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

} // namespace jacfuse
