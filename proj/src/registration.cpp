#include "jacfuse/registration.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "jacfuse/errors.hpp"
#include "jacfuse/nifti.hpp"
#include "jacfuse/parallel.hpp"

namespace jacfuse {

namespace {

void check_params(const RegistrationParams &p) {
  if (p.pyramid_levels < 1 || p.iterations_coarse < 1 ||
      p.iterations_fine < 1 || p.alpha <= 0.0 || p.step_size <= 0.0 ||
      p.convergence_tol <= 0.0)
    throw InvalidConfig("registration params must all be positive");
}

// Separable Gaussian with replicated borders, in place per component.
void gaussian_smooth_array(Eigen::ArrayXd &a, const Dims3 &d, double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int t = -radius; t <= radius; ++t) {
    kernel[t + radius] = std::exp(-0.5 * t * t / (sigma * sigma));
    sum += kernel[t + radius];
  }
  for (double &k : kernel)
    k /= sum;

  const int n[3] = {d.nx, d.ny, d.nz};
  const std::size_t stride[3] = {1, static_cast<std::size_t>(d.nx),
                                 static_cast<std::size_t>(d.nx) * d.ny};
  Eigen::ArrayXd tmp(a.size());
  for (int axis = 0; axis < 3; ++axis) {
    const int len = n[axis];
    const std::size_t s = stride[axis];
    const int na = n[(axis + 1) % 3];
    const int nb = n[(axis + 2) % 3];
    const std::size_t sa = stride[(axis + 1) % 3];
    const std::size_t sb = stride[(axis + 2) % 3];
    for (int b = 0; b < nb; ++b)
      for (int av = 0; av < na; ++av) {
        const std::size_t base = av * sa + b * sb;
        for (int i = 0; i < len; ++i) {
          double acc = 0.0;
          for (int t = -radius; t <= radius; ++t) {
            const int j = std::clamp(i + t, 0, len - 1);
            acc += kernel[t + radius] * a[base + j * s];
          }
          tmp[base + i * s] = acc;
        }
      }
    a.swap(tmp);
  }
}

Volume3D gaussian_smooth_volume(const Volume3D &v, double sigma) {
  Volume3D out = v;
  gaussian_smooth_array(out.data, out.dims, sigma);
  return out;
}

Volume3D downsample_half(const Volume3D &v) {
  const Dims3 nd{std::max(1, (v.dims.nx + 1) / 2),
                 std::max(1, (v.dims.ny + 1) / 2),
                 std::max(1, (v.dims.nz + 1) / 2)};
  return resample_to_shape(gaussian_smooth_volume(v, 1.0), nd);
}

// Coarse-to-fine list; levels capped so the coarsest min dimension stays
// at least 8 voxels.
std::vector<Volume3D> build_pyramid(const Volume3D &v, int levels) {
  const int min_dim = std::min({v.dims.nx, v.dims.ny, v.dims.nz});
  int allowed = 1;
  while (allowed < levels && (min_dim >> allowed) >= 8)
    ++allowed;
  std::vector<Volume3D> fine_to_coarse{v};
  for (int l = 1; l < allowed; ++l)
    fine_to_coarse.push_back(downsample_half(fine_to_coarse.back()));
  std::vector<Volume3D> out(fine_to_coarse.rbegin(), fine_to_coarse.rend());
  return out;
}

int level_iterations(const RegistrationParams &p, int level, int n_levels) {
  if (n_levels <= 1)
    return p.iterations_coarse;
  // level 0 = coarsest
  const double t = 1.0 - static_cast<double>(level) / (n_levels - 1);
  return static_cast<int>(std::lround(p.iterations_fine +
                                      t * (p.iterations_coarse -
                                           p.iterations_fine)));
}

// Shared-weight trilinear sampler; per-neighbor zero padding identical to
// sample_trilinear. idx < 0 marks an out-of-bounds corner.
struct TrilerpTaps {
  long idx[8];
  double w[8];
};

inline bool trilerp_prepare(const Dims3 &d, double x, double y, double z,
                            TrilerpTaps &taps) {
  if (x <= -1.0 || y <= -1.0 || z <= -1.0 || x >= d.nx || y >= d.ny ||
      z >= d.nz)
    return false;
  const double fx = std::floor(x), fy = std::floor(y), fz = std::floor(z);
  const int i0 = static_cast<int>(fx), j0 = static_cast<int>(fy),
            k0 = static_cast<int>(fz);
  const double tx = x - fx, ty = y - fy, tz = z - fz;
  const double wx[2] = {1.0 - tx, tx};
  const double wy[2] = {1.0 - ty, ty};
  const double wz[2] = {1.0 - tz, tz};
  int t = 0;
  for (int dk = 0; dk < 2; ++dk)
    for (int dj = 0; dj < 2; ++dj)
      for (int di = 0; di < 2; ++di, ++t) {
        const int i = i0 + di, j = j0 + dj, k = k0 + dk;
        taps.w[t] = wx[di] * wy[dj] * wz[dk];
        taps.idx[t] = (i >= 0 && i < d.nx && j >= 0 && j < d.ny && k >= 0 &&
                       k < d.nz)
                          ? static_cast<long>(d.index(i, j, k))
                          : -1;
      }
  return true;
}

inline double trilerp_apply(const Eigen::ArrayXd &a, const TrilerpTaps &taps) {
  double acc = 0.0;
  for (int t = 0; t < 8; ++t)
    if (taps.idx[t] >= 0)
      acc += taps.w[t] * a[taps.idx[t]];
  return acc;
}

// Central differences inside, one-sided at the faces.
void volume_gradient(const Eigen::ArrayXd &a, const Dims3 &d,
                     Eigen::ArrayXd g[3]) {
  for (int c = 0; c < 3; ++c)
    g[c].resize(a.size());
  const int n[3] = {d.nx, d.ny, d.nz};
  const long stride[3] = {1, d.nx, static_cast<long>(d.nx) * d.ny};
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        const long idx = static_cast<long>(d.index(i, j, k));
        const int pos[3] = {i, j, k};
        for (int c = 0; c < 3; ++c) {
          if (n[c] < 2) {
            g[c][idx] = 0.0;
            continue;
          }
          const int p = pos[c];
          if (p == 0)
            g[c][idx] = a[idx + stride[c]] - a[idx];
          else if (p == n[c] - 1)
            g[c][idx] = a[idx] - a[idx - stride[c]];
          else
            g[c][idx] = 0.5 * (a[idx + stride[c]] - a[idx - stride[c]]);
        }
      }
}

} // namespace

Volume3D warp(const Volume3D &moving, const DisplacementField &field) {
  Volume3D out;
  out.dims = field.dims;
  out.spacing = moving.spacing;
  out.affine = moving.affine;
  out.data.resize(static_cast<Eigen::Index>(field.dims.count()));
  const auto &d = field.dims;
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        const auto idx = static_cast<Eigen::Index>(d.index(i, j, k));
        const Eigen::Vector3d p(i + field.dx[idx], j + field.dy[idx],
                                k + field.dz[idx]);
        out.data[idx] = sample_trilinear(moving, p);
      }
  return out;
}

Volume3D warp_affine(const Volume3D &moving, const AffineTransform &a,
                     const Dims3 &out_dims) {
  const Eigen::Matrix3d lin = a.matrix.topLeftCorner<3, 3>();
  if (std::abs(lin.determinant()) <= 1e-12)
    throw SingularTransform("warp_affine: non-invertible linear part");
  Volume3D out;
  out.dims = out_dims;
  out.spacing = moving.spacing;
  out.affine = moving.affine;
  out.data.resize(static_cast<Eigen::Index>(out_dims.count()));
  const Eigen::Vector3d t = a.matrix.topRightCorner<3, 1>();
  for (int k = 0; k < out_dims.nz; ++k)
    for (int j = 0; j < out_dims.ny; ++j)
      for (int i = 0; i < out_dims.nx; ++i) {
        const Eigen::Vector3d p = lin * Eigen::Vector3d(i, j, k) + t;
        out.data[static_cast<Eigen::Index>(out_dims.index(i, j, k))] =
            sample_trilinear(moving, p);
      }
  return out;
}

namespace {

// 12-parameter state in centered, scale-normalized coordinates:
// u(x) = c_m + s (L xi + tau), xi = (x - c_f) / s.
struct AffineState {
  Eigen::Matrix3d lin = Eigen::Matrix3d::Identity();
  Eigen::Vector3d tau = Eigen::Vector3d::Zero();
};

struct AffineLevel {
  const Volume3D *fixed;
  const Volume3D *moving;
  Eigen::ArrayXd grad[3]; // of moving
  Eigen::Vector3d c_f, c_m;
  double s;
  int stride;
};

double affine_objective(const AffineLevel &lv, const AffineState &st,
                        Eigen::Matrix3d *g_lin, Eigen::Vector3d *g_tau) {
  if (g_lin) {
    g_lin->setZero();
    g_tau->setZero();
  }
  const Dims3 &df = lv.fixed->dims;
  const Dims3 &dm = lv.moving->dims;
  double obj = 0.0;
  long count = 0;
  TrilerpTaps taps;
  for (int k = 0; k < df.nz; k += lv.stride)
    for (int j = 0; j < df.ny; j += lv.stride)
      for (int i = 0; i < df.nx; i += lv.stride) {
        const Eigen::Vector3d xi =
            (Eigen::Vector3d(i, j, k) - lv.c_f) / lv.s;
        const Eigen::Vector3d u = lv.c_m + lv.s * (st.lin * xi + st.tau);
        double v = 0.0;
        const bool hit = trilerp_prepare(dm, u[0], u[1], u[2], taps);
        if (hit)
          v = trilerp_apply(lv.moving->data, taps);
        const double r =
            v - lv.fixed->data[static_cast<Eigen::Index>(df.index(i, j, k))];
        obj += r * r;
        ++count;
        if (g_lin && hit) {
          const Eigen::Vector3d gm(trilerp_apply(lv.grad[0], taps),
                                   trilerp_apply(lv.grad[1], taps),
                                   trilerp_apply(lv.grad[2], taps));
          const Eigen::Vector3d common = 2.0 * r * lv.s * gm;
          *g_lin += common * xi.transpose();
          *g_tau += common;
        }
      }
  if (g_lin) {
    *g_lin /= count;
    *g_tau /= count;
  }
  return obj / count;
}

} // namespace

AffineTransform register_affine(const Volume3D &moving, const Volume3D &fixed,
                                const RegistrationParams &params) {
  check_params(params);
  const auto pyr_f = build_pyramid(fixed, params.pyramid_levels);
  const auto pyr_m = build_pyramid(moving, params.pyramid_levels);
  const int n_levels = static_cast<int>(std::min(pyr_f.size(), pyr_m.size()));

  AffineState st; // carried across levels, coordinates are normalized
  bool tau_initialized = false;
  for (int l = 0; l < n_levels; ++l) {
    AffineLevel lv;
    lv.fixed = &pyr_f[l + (static_cast<int>(pyr_f.size()) - n_levels)];
    lv.moving = &pyr_m[l + (static_cast<int>(pyr_m.size()) - n_levels)];
    volume_gradient(lv.moving->data, lv.moving->dims, lv.grad);
    const Dims3 &df = lv.fixed->dims;
    const Dims3 &dm = lv.moving->dims;
    lv.c_f = 0.5 * Eigen::Vector3d(df.nx - 1, df.ny - 1, df.nz - 1);
    lv.c_m = 0.5 * Eigen::Vector3d(dm.nx - 1, dm.ny - 1, dm.nz - 1);
    lv.s = std::max({1.0, 0.5 * (df.nx - 1), 0.5 * (df.ny - 1),
                     0.5 * (df.nz - 1)});
    lv.stride = df.count() > 32768 ? 2 : 1;
    if (!tau_initialized) {
      st.tau = (lv.c_f - lv.c_m) / lv.s; // identity mapping in world voxels
      tau_initialized = true;
    }

    const int iters = level_iterations(params, l, n_levels);
    double eta = 0.05 * params.step_size;
    Eigen::Matrix3d g_lin;
    Eigen::Vector3d g_tau;
    double obj = affine_objective(lv, st, &g_lin, &g_tau);
    for (int it = 0; it < iters; ++it) {
      const double gnorm =
          std::sqrt(g_lin.squaredNorm() + g_tau.squaredNorm());
      if (gnorm < 1e-14)
        break;
      AffineState trial = st;
      trial.lin -= (eta / gnorm) * g_lin;
      trial.tau -= (eta / gnorm) * g_tau;
      const double trial_obj = affine_objective(lv, trial, nullptr, nullptr);
      if (trial_obj < obj) {
        const double rel = (obj - trial_obj) / std::max(obj, 1e-30);
        st = trial;
        obj = affine_objective(lv, st, &g_lin, &g_tau);
        eta *= 1.3;
        if (rel < params.convergence_tol)
          break;
      } else {
        eta *= 0.5;
        if (eta < 1e-7)
          break;
      }
    }
    // Normalized parameters transfer unchanged between pyramid levels.
  }

  // Unfold u(x) = L x + (c_m - L c_f + s tau) at the finest level geometry.
  const Dims3 &df = fixed.dims;
  const Dims3 &dm = moving.dims;
  const Eigen::Vector3d c_f =
      0.5 * Eigen::Vector3d(df.nx - 1, df.ny - 1, df.nz - 1);
  const Eigen::Vector3d c_m =
      0.5 * Eigen::Vector3d(dm.nx - 1, dm.ny - 1, dm.nz - 1);
  const double s = std::max(
      {1.0, 0.5 * (df.nx - 1), 0.5 * (df.ny - 1), 0.5 * (df.nz - 1)});
  AffineTransform out;
  out.matrix.topLeftCorner<3, 3>() = st.lin;
  out.matrix.topRightCorner<3, 1>() = c_m - st.lin * c_f + s * st.tau;
  return out;
}

namespace {

DisplacementField upsample_field(const DisplacementField &f, const Dims3 &nd) {
  auto up_component = [&](const Eigen::ArrayXd &a, double scale) {
    Volume3D v;
    v.dims = f.dims;
    v.data = a;
    return (resample_to_shape(v, nd).data * scale).eval();
  };
  auto axis_scale = [](int n_new, int n_old) {
    return n_old > 1 ? static_cast<double>(n_new - 1) / (n_old - 1) : 1.0;
  };
  DisplacementField out;
  out.dims = nd;
  out.dx = up_component(f.dx, axis_scale(nd.nx, f.dims.nx));
  out.dy = up_component(f.dy, axis_scale(nd.ny, f.dims.ny));
  out.dz = up_component(f.dz, axis_scale(nd.nz, f.dims.nz));
  return out;
}

} // namespace

DisplacementField register_deformable(const Volume3D &moving,
                                      const Volume3D &fixed,
                                      const RegistrationParams &params) {
  check_params(params);
  const auto pyr_f = build_pyramid(fixed, params.pyramid_levels);
  const auto pyr_m = build_pyramid(moving, params.pyramid_levels);
  const int n_levels = static_cast<int>(std::min(pyr_f.size(), pyr_m.size()));

  DisplacementField field; // starts empty; zero-initialized per level below
  for (int l = 0; l < n_levels; ++l) {
    const Volume3D &F = pyr_f[l + (static_cast<int>(pyr_f.size()) - n_levels)];
    const Volume3D &M = pyr_m[l + (static_cast<int>(pyr_m.size()) - n_levels)];
    if (l == 0)
      field = DisplacementField::zeros(F.dims);
    else
      field = upsample_field(field, F.dims);

    // The zero field (input alignment) always competes, which pins the
    // objective non-increase contract at every level.
    DisplacementField best = DisplacementField::zeros(F.dims);
    double best_ssd = ssd(warp(M, best), F);
    const int iters = level_iterations(params, l, n_levels);
    int stall = 0;
    for (int it = 0; it < iters; ++it) {
      Volume3D W = warp(M, field);
      const double cur = ssd(W, F);
      if (cur < best_ssd) {
        const double rel = (best_ssd - cur) / std::max(best_ssd, 1e-30);
        best_ssd = cur;
        best = field;
        stall = rel < params.convergence_tol ? stall + 1 : 0;
      } else {
        ++stall;
      }
      if (stall >= 3)
        break;

      Eigen::ArrayXd g[3];
      volume_gradient(W.data, F.dims, g);
      const Eigen::ArrayXd diff = F.data - W.data;
      const Eigen::ArrayXd denom =
          g[0].square() + g[1].square() + g[2].square() + diff.square() + 1e-9;
      field.dx += params.step_size * (diff * g[0] / denom);
      field.dy += params.step_size * (diff * g[1] / denom);
      field.dz += params.step_size * (diff * g[2] / denom);
      gaussian_smooth_array(field.dx, F.dims, params.alpha);
      gaussian_smooth_array(field.dy, F.dims, params.alpha);
      gaussian_smooth_array(field.dz, F.dims, params.alpha);
    }
    field = best;
  }
  return field;
}

std::vector<SubjectRegistration>
register_pipeline(const std::vector<RegistrationSubjectInput> &subjects,
                  const Volume3D &tmpl, const RegistrationParams &params,
                  int jobs) {
  std::vector<SubjectRegistration> out(subjects.size());

  parallel_for(subjects.size(), jobs, [&](std::size_t i) {
    const auto &s = subjects[i];
    out[i].id = s.id;
    if (!s.mri)
      return;
    AffineTransform a = register_affine(*s.mri, tmpl, params);
    Volume3D pre = warp_affine(*s.mri, a, tmpl.dims);
    DisplacementField d = register_deformable(pre, tmpl, params);
    out[i].mri_registered = warp(pre, d);
    out[i].mri_affine = std::move(a);
    out[i].mri_field = std::move(d);
  });

  // CT moment signatures for the donor rule, computed on demand.
  std::vector<std::optional<MomentSignature>> ct_sig(subjects.size());
  auto signature = [&](std::size_t i) -> const MomentSignature & {
    if (!ct_sig[i]) {
      if (!subjects[i].ct_mask)
        throw EmptyMask("register_pipeline: subject " + subjects[i].id +
                        " has a CT but no mask for moment matching");
      ct_sig[i] = compute_moments(*subjects[i].ct, *subjects[i].ct_mask);
    }
    return *ct_sig[i];
  };

  // Reference resolution stays serial: the donor rule reads every subject's
  // phase-one result. The registrations themselves then run per subject.
  std::vector<std::size_t> ref_idx(subjects.size(), subjects.size());
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const auto &s = subjects[i];
    if (!s.ct)
      continue;
    if (out[i].mri_registered) {
      ref_idx[i] = i;
      out[i].ct_reference_id = s.id;
    } else {
      // Donor: same label, has a registered MRI and a CT to compare moments.
      const MomentSignature &target = signature(i);
      std::size_t best = subjects.size();
      double best_d2 = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < subjects.size(); ++j) {
        if (j == i || subjects[j].label != s.label ||
            !out[j].mri_registered || !subjects[j].ct)
          continue;
        const MomentSignature &sig = signature(j);
        const double ds = sig.skewness - target.skewness;
        const double dk = sig.kurtosis - target.kurtosis;
        const double d2 = ds * ds + dk * dk;
        if (d2 < best_d2 ||
            (d2 == best_d2 && best < subjects.size() &&
             subjects[j].id < subjects[best].id)) {
          best = j;
          best_d2 = d2;
        }
      }
      if (best == subjects.size())
        throw NoDonorAvailable("register_pipeline: no same-label MRI donor "
                               "for subject " + s.id);
      ref_idx[i] = best;
      out[i].ct_reference_id = subjects[best].id;
    }
  }

  parallel_for(subjects.size(), jobs, [&](std::size_t i) {
    const auto &s = subjects[i];
    if (!s.ct)
      return;
    const Volume3D &ref = *out[ref_idx[i]].mri_registered;
    AffineTransform a = register_affine(*s.ct, ref, params);
    Volume3D pre = warp_affine(*s.ct, a, ref.dims);
    DisplacementField d = register_deformable(pre, ref, params);
    out[i].ct_registered = warp(pre, d);
    out[i].ct_affine = std::move(a);
    out[i].ct_field = std::move(d);
  });
  return out;
}

void write_field(const DisplacementField &field, const std::string &path) {
  auto component = [&](const Eigen::ArrayXd &a) {
    Volume3D v;
    v.dims = field.dims;
    v.data = a;
    return v;
  };
  write_nifti_4d({component(field.dx), component(field.dy),
                  component(field.dz)},
                 path);
}

DisplacementField read_field(const std::string &path) {
  auto [slabs, header] = read_nifti_4d(path);
  (void)header;
  if (slabs.size() != 3)
    throw HeaderInconsistent("displacement field needs 3 components, got " +
                             std::to_string(slabs.size()));
  DisplacementField f;
  f.dims = slabs[0].dims;
  f.dx = std::move(slabs[0].data);
  f.dy = std::move(slabs[1].data);
  f.dz = std::move(slabs[2].data);
  return f;
}

} // namespace jacfuse
