#include "jacfuse/preprocess.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <queue>
#include <vector>

#include "jacfuse/errors.hpp"

namespace jacfuse {

namespace {

// Monomial exponents (a,b,c) with a+b+c <= degree.
std::vector<std::array<int, 3>> monomials(int degree) {
  std::vector<std::array<int, 3>> out;
  for (int a = 0; a <= degree; ++a)
    for (int b = 0; a + b <= degree; ++b)
      for (int c = 0; a + b + c <= degree; ++c)
        out.push_back({a, b, c});
  return out;
}

inline double norm_coord(int i, int n) {
  return n > 1 ? 2.0 * i / (n - 1) - 1.0 : 0.0;
}

} // namespace

Volume3D bias_correct(const Volume3D &vol, const Mask3D &mask,
                      const PreprocessConfig &cfg) {
  if (!(vol.dims == mask.dims))
    throw ShapeMismatch("bias_correct: volume and mask dims differ");
  const auto exps = monomials(cfg.bias_poly_degree);
  const int nc = static_cast<int>(exps.size());
  if (static_cast<int>(mask.count()) < nc)
    throw DegenerateFit("bias_correct: fewer masked voxels than coefficients");

  const auto &d = vol.dims;
  Eigen::MatrixXd ata = Eigen::MatrixXd::Zero(nc, nc);
  Eigen::VectorXd atb = Eigen::VectorXd::Zero(nc);
  Eigen::VectorXd basis(nc);
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        if (!mask.at(i, j, k))
          continue;
        const double x = norm_coord(i, d.nx);
        const double y = norm_coord(j, d.ny);
        const double z = norm_coord(k, d.nz);
        for (int c = 0; c < nc; ++c)
          basis[c] = std::pow(x, exps[c][0]) * std::pow(y, exps[c][1]) *
                     std::pow(z, exps[c][2]);
        const double lv = std::log(vol.at(i, j, k) + 1e-6);
        ata.selfadjointView<Eigen::Lower>().rankUpdate(basis);
        atb += lv * basis;
      }
  ata = ata.selfadjointView<Eigen::Lower>();
  Eigen::LDLT<Eigen::MatrixXd> ldlt(ata);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
    throw DegenerateFit("bias_correct: singular normal equations");
  const Eigen::VectorXd coef = ldlt.solve(atb);

  Volume3D out = vol;
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        const double x = norm_coord(i, d.nx);
        const double y = norm_coord(j, d.ny);
        const double z = norm_coord(k, d.nz);
        double b = 0.0;
        for (int c = 0; c < nc; ++c)
          b += coef[c] * std::pow(x, exps[c][0]) * std::pow(y, exps[c][1]) *
               std::pow(z, exps[c][2]);
        out.at(i, j, k) = vol.at(i, j, k) / std::exp(b);
      }

  const double mean_in = masked_mean(vol, mask);
  const double mean_out = masked_mean(out, mask);
  if (mean_out > 0.0)
    out.data *= mean_in / mean_out;
  return out;
}

Volume3D contrast_stretch(const Volume3D &vol, const PreprocessConfig &cfg) {
  const double lo = percentile(vol.data, cfg.stretch_p_lo);
  const double hi = percentile(vol.data, cfg.stretch_p_hi);
  Volume3D out = vol;
  if (hi <= lo) {
    out.data.setZero();
    return out;
  }
  out.data = ((vol.data - lo) / (hi - lo)).cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

namespace {

std::vector<std::array<int, 3>> ball_offsets(int radius) {
  std::vector<std::array<int, 3>> out;
  const int r2 = radius * radius;
  for (int dz = -radius; dz <= radius; ++dz)
    for (int dy = -radius; dy <= radius; ++dy)
      for (int dx = -radius; dx <= radius; ++dx)
        if (dx * dx + dy * dy + dz * dz <= r2)
          out.push_back({dx, dy, dz});
  return out;
}

Mask3D morph(const Mask3D &mask, int radius, bool dilate_op) {
  const auto offs = ball_offsets(radius);
  const auto &d = mask.dims;
  Mask3D out(d);
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        bool hit = !dilate_op; // erode: assume kept until a miss
        for (const auto &o : offs) {
          const int x = i + o[0], y = j + o[1], z = k + o[2];
          const bool inside = x >= 0 && x < d.nx && y >= 0 && y < d.ny &&
                              z >= 0 && z < d.nz;
          const bool v = inside && mask.at(x, y, z);
          if (dilate_op && v) {
            hit = true;
            break;
          }
          if (!dilate_op && !v) { // outside counts as background
            hit = false;
            break;
          }
        }
        out.set(i, j, k, hit);
      }
  return out;
}

constexpr int kFaceNeighbors[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                                      {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};

// Flood-fills 6-connected components over voxels where pred holds. Returns
// per-voxel component id (-1 where pred fails) and the component sizes.
template <typename Pred>
std::pair<std::vector<int>, std::vector<std::size_t>>
label_components(const Dims3 &d, Pred pred) {
  std::vector<int> label(d.count(), -1);
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> stack;
  for (std::size_t seed = 0; seed < d.count(); ++seed) {
    if (label[seed] >= 0 || !pred(seed))
      continue;
    const int id = static_cast<int>(sizes.size());
    sizes.push_back(0);
    label[seed] = id;
    stack.push_back(seed);
    while (!stack.empty()) {
      const std::size_t cur = stack.back();
      stack.pop_back();
      ++sizes[id];
      const int i = static_cast<int>(cur % d.nx);
      const int j = static_cast<int>((cur / d.nx) % d.ny);
      const int k = static_cast<int>(cur / (d.nx * static_cast<std::size_t>(d.ny)));
      for (const auto &n : kFaceNeighbors) {
        const int x = i + n[0], y = j + n[1], z = k + n[2];
        if (x < 0 || x >= d.nx || y < 0 || y >= d.ny || z < 0 || z >= d.nz)
          continue;
        const std::size_t idx = d.index(x, y, z);
        if (label[idx] < 0 && pred(idx)) {
          label[idx] = id;
          stack.push_back(idx);
        }
      }
    }
  }
  return {std::move(label), std::move(sizes)};
}

} // namespace

Mask3D dilate(const Mask3D &mask, int radius) { return morph(mask, radius, true); }
Mask3D erode(const Mask3D &mask, int radius) { return morph(mask, radius, false); }

Mask3D largest_component(const Mask3D &mask) {
  auto [label, sizes] =
      label_components(mask.dims, [&](std::size_t i) { return mask.data[i] != 0; });
  Mask3D out(mask.dims);
  if (sizes.empty())
    return out;
  int best = 0;
  for (int id = 1; id < static_cast<int>(sizes.size()); ++id)
    if (sizes[id] > sizes[best])
      best = id; // ties keep the first-seen component, deterministic
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = label[i] == best ? 1 : 0;
  return out;
}

Mask3D fill_holes(const Mask3D &mask) {
  const auto &d = mask.dims;
  auto [label, sizes] =
      label_components(d, [&](std::size_t i) { return mask.data[i] == 0; });
  // Background components touching the volume boundary stay background;
  // everything else is an internal hole.
  std::vector<uint8_t> touches(sizes.size(), 0);
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        if (i != 0 && i != d.nx - 1 && j != 0 && j != d.ny - 1 && k != 0 &&
            k != d.nz - 1)
          continue;
        const int id = label[d.index(i, j, k)];
        if (id >= 0)
          touches[id] = 1;
      }
  Mask3D out = mask;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    if (label[i] >= 0 && !touches[label[i]])
      out.data[i] = 1;
  return out;
}

int count_components(const Mask3D &mask) {
  auto [label, sizes] =
      label_components(mask.dims, [&](std::size_t i) { return mask.data[i] != 0; });
  (void)label;
  return static_cast<int>(sizes.size());
}

std::pair<Volume3D, Mask3D> brain_extract(const Volume3D &vol,
                                          const PreprocessConfig &cfg) {
  const double robust_max = percentile(vol.data, 99.0);
  const double thr = cfg.bet_threshold_fraction * robust_max;
  Mask3D mask(vol.dims);
  for (std::size_t i = 0; i < mask.data.size(); ++i)
    mask.data[i] = vol.data[static_cast<Eigen::Index>(i)] > thr ? 1 : 0;
  if (mask.count() == 0)
    throw EmptyMask("brain_extract: nothing above threshold");
  mask = largest_component(mask);
  const int r = cfg.morphology_radius;
  mask = erode(dilate(mask, r), r); // closing
  mask = dilate(erode(mask, r), r); // opening
  if (mask.count() == 0)
    throw EmptyMask("brain_extract: mask vanished under morphology");
  mask = largest_component(mask); // opening can split, keep one piece
  mask = fill_holes(mask);
  return {apply_mask(vol, mask), mask};
}

} // namespace jacfuse
