#include "jacfuse/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "jacfuse/errors.hpp"
#include "jacfuse/nifti.hpp"
#include "jacfuse/rng.hpp"

namespace jacfuse {
namespace phantom {

void validate_config(const PhantomConfig &cfg) {
  if (cfg.dims.nx % 4 || cfg.dims.ny % 4 || cfg.dims.nz % 4)
    throw InvalidConfig("phantom dims must be divisible by 4");
  if (cfg.dims.nx < 16 || cfg.dims.ny < 16 || cfg.dims.nz < 16)
    throw InvalidConfig("phantom dims must be at least 16 per axis");
  for (int c = 1; c < kNumClasses; ++c)
    if (cfg.ventricle_expansion[c] <= cfg.ventricle_expansion[c - 1])
      throw InvalidConfig(
          "ventricle expansion must strictly increase with severity");
  if (cfg.noise_sigma < 0 || cfg.bias_amplitude < 0 ||
      cfg.texture_amplitude < 0)
    throw InvalidConfig("phantom amplitudes must be non-negative");
  if (cfg.ct_intensity_remap.size() < 2)
    throw InvalidConfig("ct remap needs at least 2 nodes");
  for (std::size_t i = 1; i < cfg.ct_intensity_remap.size(); ++i)
    if (cfg.ct_intensity_remap[i].first <=
        cfg.ct_intensity_remap[i - 1].first)
      throw InvalidConfig("ct remap nodes must have increasing inputs");
}

namespace {

struct Ellipsoid {
  Eigen::Vector3d radii;
  double mean_radius() const { return radii.mean(); }
};

// Smooth membership: 1 well inside, 0 well outside, smoothstep over an edge
// of about `width` voxels around the surface.
inline double membership(const Eigen::Vector3d &p, const Eigen::Vector3d &c,
                         const Ellipsoid &e, double width) {
  const double rho = ((p - c).array() / e.radii.array()).matrix().norm();
  const double dist = (rho - 1.0) * e.mean_radius(); // approx signed distance
  double t = 0.5 - dist / width;
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

inline bool inside(const Eigen::Vector3d &p, const Eigen::Vector3d &c,
                   const Ellipsoid &e) {
  return ((p - c).array() / e.radii.array()).matrix().squaredNorm() <= 1.0;
}

struct Geometry {
  Eigen::Vector3d center;
  Ellipsoid skull_outer, skull_inner, brain, cortex_inner, ventricle;
  Eigen::Matrix3d rot;    // canonical -> subject rotation
  Eigen::Vector3d shift;  // translation, voxels
  double tex_freq[3];
  double tex_phase[3];
  double bias_coef[9];
};

Geometry make_geometry(ClassLabel label, uint64_t seed,
                       const PhantomConfig &cfg) {
  Geometry g;
  const double nx = cfg.dims.nx, ny = cfg.dims.ny, nz = cfg.dims.nz;
  g.center = 0.5 * Eigen::Vector3d(nx - 1, ny - 1, nz - 1);

  const double skull_thickness = 0.046 * nx;
  const double csf_gap = 0.042 * nx;
  const double cortex_thickness =
      0.062 * nx * cfg.cortical_thinning[static_cast<int>(label)];
  g.skull_outer.radii = Eigen::Vector3d(0.42 * nx, 0.44 * ny, 0.40 * nz);
  g.skull_inner.radii = g.skull_outer.radii.array() - skull_thickness;
  g.brain.radii = g.skull_inner.radii.array() - csf_gap;
  g.cortex_inner.radii = g.brain.radii.array() - cortex_thickness;
  g.ventricle.radii = Eigen::Vector3d(0.125 * nx, 0.100 * ny, 0.110 * nz) *
                      cfg.ventricle_expansion[static_cast<int>(label)];

  // Identical draw sequence for every class, so same-seed subjects differ
  // only by the class factors above.
  Rng rng = make_rng(seed, "phantom-geometry");
  const double max_rot = cfg.jitter_rotation_deg * 3.14159265358979323846 /
                         180.0;
  const double ax = uniform_real(rng, -max_rot, max_rot);
  const double ay = uniform_real(rng, -max_rot, max_rot);
  const double az = uniform_real(rng, -max_rot, max_rot);
  Eigen::Matrix3d rx, ry, rz;
  rx << 1, 0, 0, 0, std::cos(ax), -std::sin(ax), 0, std::sin(ax), std::cos(ax);
  ry << std::cos(ay), 0, std::sin(ay), 0, 1, 0, -std::sin(ay), 0, std::cos(ay);
  rz << std::cos(az), -std::sin(az), 0, std::sin(az), std::cos(az), 0, 0, 0, 1;
  g.rot = rz * ry * rx;
  for (int i = 0; i < 3; ++i)
    g.shift[i] = uniform_real(rng, -cfg.jitter_translation_vox,
                              cfg.jitter_translation_vox);
  for (int i = 0; i < 3; ++i) {
    g.tex_freq[i] = uniform_real(rng, 1.5, 3.5);
    g.tex_phase[i] = uniform_real(rng, 0.0, 2.0 * 3.14159265358979323846);
  }
  for (double &c : g.bias_coef)
    c = uniform_real(rng, -1.0, 1.0);
  return g;
}

// Ideal noise-free intensity at canonical point p, brainy layers composed
// inside-out from smooth memberships.
double ideal_intensity(const Geometry &g, const PhantomConfig &cfg,
                       const Eigen::Vector3d &p) {
  constexpr double kEdge = 1.2; // voxels
  const double m_head = membership(p, g.center, g.skull_outer, kEdge);
  if (m_head <= 0.0)
    return 0.0;
  const double m_skull_in = membership(p, g.center, g.skull_inner, kEdge);
  const double m_brain = membership(p, g.center, g.brain, kEdge);
  const double m_cortex_in = membership(p, g.center, g.cortex_inner, kEdge);
  const double m_vent = membership(p, g.center, g.ventricle, kEdge);

  const double u = p[0] / std::max(1.0, g.skull_outer.radii[0]);
  const double v = p[1] / std::max(1.0, g.skull_outer.radii[1]);
  const double w = p[2] / std::max(1.0, g.skull_outer.radii[2]);
  const double texture =
      1.0 + cfg.texture_amplitude *
                std::sin(g.tex_freq[0] * u + g.tex_phase[0]) *
                std::sin(g.tex_freq[1] * v + g.tex_phase[1]) *
                std::sin(g.tex_freq[2] * w + g.tex_phase[2]);

  double val = cfg.skull_intensity * (m_head - m_skull_in); // skull shell
  val += 0.05 * (m_skull_in - m_brain);                     // CSF gap
  val += 0.55 * (m_brain - m_cortex_in) * texture;          // cortex
  val += 0.75 * (m_cortex_in - m_vent) * texture;           // white matter
  val += 0.10 * m_vent;                                     // ventricle CSF
  return std::max(0.0, val);
}

double remap_intensity(const std::vector<std::pair<double, double>> &nodes,
                       double v) {
  if (v <= nodes.front().first)
    return nodes.front().second;
  if (v >= nodes.back().first)
    return nodes.back().second;
  for (std::size_t i = 1; i < nodes.size(); ++i)
    if (v <= nodes[i].first) {
      const double t =
          (v - nodes[i - 1].first) / (nodes[i].first - nodes[i - 1].first);
      return nodes[i - 1].second +
             t * (nodes[i].second - nodes[i - 1].second);
    }
  return nodes.back().second;
}

} // namespace

PhantomSubject generate_subject(ClassLabel label, uint64_t seed,
                                const PhantomConfig &cfg) {
  validate_config(cfg);
  const Geometry g = make_geometry(label, seed, cfg);
  const auto &d = cfg.dims;

  PhantomSubject out;
  out.truth.label = label;
  out.truth.ventricle_expansion =
      cfg.ventricle_expansion[static_cast<int>(label)];
  out.truth.cortical_thinning =
      cfg.cortical_thinning[static_cast<int>(label)];
  out.truth.jitter.setIdentity();
  out.truth.jitter.topLeftCorner<3, 3>() = g.rot;
  out.truth.jitter.topRightCorner<3, 1>() =
      g.center + g.shift - g.rot * g.center;

  out.mri.dims = d;
  out.mri.data.resize(static_cast<Eigen::Index>(d.count()));
  out.ct = out.mri;
  out.brain_mask = Mask3D(d);
  out.ventricle_mask = Mask3D(d);

  // Bias polynomial on [-1,1] coordinates, scaled to unit max magnitude.
  auto bias_poly = [&](double u, double v, double w) {
    const double *c = g.bias_coef;
    return c[0] * u + c[1] * v + c[2] * w + c[3] * u * v + c[4] * u * w +
           c[5] * v * w + c[6] * u * u + c[7] * v * v + c[8] * w * w;
  };
  double bias_max = 1e-12;
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        const double u = 2.0 * i / (d.nx - 1) - 1.0;
        const double v = 2.0 * j / (d.ny - 1) - 1.0;
        const double w = 2.0 * k / (d.nz - 1) - 1.0;
        bias_max = std::max(bias_max, std::abs(bias_poly(u, v, w)));
      }

  const Eigen::Matrix3d rot_inv = g.rot.transpose();
  for (int k = 0; k < d.nz; ++k)
    for (int j = 0; j < d.ny; ++j)
      for (int i = 0; i < d.nx; ++i) {
        const auto idx = static_cast<Eigen::Index>(d.index(i, j, k));
        const Eigen::Vector3d x(i, j, k);
        const Eigen::Vector3d p = rot_inv * (x - g.center - g.shift) +
                                  g.center;
        const double ideal = ideal_intensity(g, cfg, p);
        const double u = 2.0 * i / (d.nx - 1) - 1.0;
        const double v = 2.0 * j / (d.ny - 1) - 1.0;
        const double w = 2.0 * k / (d.nz - 1) - 1.0;
        const double bias =
            std::exp(cfg.bias_amplitude * bias_poly(u, v, w) / bias_max);
        out.mri.data[idx] = std::min(ideal * bias, 1.2);
        out.ct.data[idx] = remap_intensity(cfg.ct_intensity_remap, ideal);
        const bool in_brain = inside(p, g.center, g.brain);
        out.brain_mask.data[idx] = in_brain ? 1 : 0;
        if (inside(p, g.center, g.ventricle)) {
          out.ventricle_mask.data[idx] = 1;
          ++out.truth.ventricle_voxels;
        }
      }

  Rng noise_mri = make_rng(seed, "phantom-noise-mri");
  Rng noise_ct = make_rng(seed, "phantom-noise-ct");
  for (Eigen::Index idx = 0; idx < out.mri.data.size(); ++idx) {
    out.mri.data[idx] = std::clamp(
        out.mri.data[idx] + cfg.noise_sigma * normal(noise_mri), 0.0, 1.2);
    out.ct.data[idx] = std::clamp(
        out.ct.data[idx] + cfg.noise_sigma * normal(noise_ct), 0.0, 1.2);
  }
  return out;
}

DatasetManifest generate_dataset(int n_per_class, double missing_fraction,
                                 uint64_t seed, const PhantomConfig &cfg,
                                 const std::string &out_dir) {
  validate_config(cfg);
  if (n_per_class < 2)
    throw TooFewSubjects("generate_dataset: need >= 2 subjects per class");
  if (missing_fraction < 0.0 || missing_fraction >= 1.0)
    throw InvalidConfig("missing_fraction must be in [0, 1)");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec)
    throw IoError("cannot create " + out_dir + ": " + ec.message());

  const int total = n_per_class * kNumClasses;
  // Which subjects lose a modality, and which one they lose.
  std::vector<int> order(total);
  for (int i = 0; i < total; ++i)
    order[i] = i;
  Rng rng = make_rng(seed, "phantom-missing");
  shuffle_inplace(rng, order);
  const long n_missing = std::lround(missing_fraction * total);
  std::vector<int> drop(total, -1); // -1 none, else Modality value
  for (long t = 0; t < n_missing; ++t)
    drop[order[t]] = static_cast<int>(uniform_index(rng, 2));

  DatasetManifest manifest;
  manifest.seed = seed;
  char idbuf[16];
  for (int idx = 0; idx < total; ++idx) {
    const auto label = static_cast<ClassLabel>(idx % kNumClasses);
    const int within = idx / kNumClasses;
    std::snprintf(idbuf, sizeof idbuf, "sub-%03d", idx);
    const std::string id = idbuf;

    PhantomSubject subj =
        generate_subject(label, seed + static_cast<uint64_t>(idx) + 1, cfg);

    SubjectRecord rec;
    rec.id = id;
    switch (label) {
    case ClassLabel::Normal:
      rec.cdr = 0.0;
      break;
    case ClassLabel::MCI:
      rec.cdr = 0.5;
      break;
    case ClassLabel::MildAD:
      rec.cdr = within % 2 ? 2.0 : 1.0;
      break;
    case ClassLabel::SevereAD:
      rec.cdr = 3.0;
      break;
    }
    rec.class_label = label;

    const long long t_mri = 1000 + 10LL * idx;
    if (drop[idx] != static_cast<int>(Modality::MRI)) {
      const std::string p = id + "_mri.nii";
      write_nifti(subj.mri, out_dir + "/" + p);
      rec.sessions.push_back({Modality::MRI, t_mri, p});
    }
    if (drop[idx] != static_cast<int>(Modality::CT)) {
      const std::string p = id + "_ct.nii";
      write_nifti(subj.ct, out_dir + "/" + p);
      // Two bookings of the same scan at different timestamps exercise the
      // nearest-session selection.
      rec.sessions.push_back({Modality::CT, t_mri + 3, p});
      rec.sessions.push_back({Modality::CT, t_mri - 6, p});
    }
    manifest.subjects.push_back(std::move(rec));
  }
  save_manifest(manifest, out_dir + "/manifest.json");
  return manifest;
}

TemplateResult build_template(const std::vector<Volume3D> &normals,
                              const RegistrationParams &params,
                              int iterations) {
  if (normals.size() < 2)
    throw TooFewSubjects("build_template: need >= 2 volumes");
  for (const auto &v : normals)
    if (!(v.dims == normals.front().dims))
      throw ShapeMismatch("build_template: mixed volume dims");

  auto average = [](const std::vector<Volume3D> &vols) {
    Volume3D avg = vols.front();
    for (std::size_t i = 1; i < vols.size(); ++i)
      avg.data += vols[i].data;
    avg.data /= static_cast<double>(vols.size());
    return avg;
  };

  TemplateResult result;
  result.volume = average(normals);
  for (int it = 0; it < iterations; ++it) {
    std::vector<Volume3D> warped;
    warped.reserve(normals.size());
    double ssd_sum = 0.0;
    for (const auto &member : normals) {
      const AffineTransform a =
          register_affine(member, result.volume, params);
      const Volume3D pre = warp_affine(member, a, result.volume.dims);
      const DisplacementField f =
          register_deformable(pre, result.volume, params);
      warped.push_back(warp(pre, f));
      ssd_sum += ssd(warped.back(), result.volume);
    }
    result.member_ssd.push_back(ssd_sum / normals.size());
    result.volume = average(warped);
  }
  return result;
}

} // namespace phantom
} // namespace jacfuse
