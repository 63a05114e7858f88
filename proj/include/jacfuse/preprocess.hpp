// preprocess.hpp - intensity normalization and brain extraction.
//
// Bias removal is a log-domain polynomial fit, brain extraction is
// threshold + morphology; both are contract-level stand-ins for the usual
// external tools and are fully deterministic.
#pragma once

#include <utility>

#include "jacfuse/volume.hpp"

namespace jacfuse {

struct PreprocessConfig {
  int bias_poly_degree = 2;
  double stretch_p_lo = 1.0;
  double stretch_p_hi = 99.0;
  double bet_threshold_fraction = 0.35;
  int morphology_radius = 2;
};

// Fits a degree-d polynomial b(x) to log(vol + 1e-6) over masked voxels by
// least squares and returns vol / exp(b), rescaled so the masked mean is
// unchanged. Requires at least as many masked voxels as coefficients.
Volume3D bias_correct(const Volume3D &vol, const Mask3D &mask,
                      const PreprocessConfig &cfg);

// v' = clamp((v - q_lo) / (q_hi - q_lo), 0, 1) with q_* the configured
// percentiles. A degenerate range (q_hi == q_lo) maps everything to 0.
Volume3D contrast_stretch(const Volume3D &vol, const PreprocessConfig &cfg);

// Threshold at bet_threshold_fraction * 99th percentile, keep the largest
// 6-connected component, close then open with a ball of the configured
// radius, fill internal holes. Expects intensities already in [0,1].
// Returns the masked volume and the mask (always a single component).
std::pair<Volume3D, Mask3D> brain_extract(const Volume3D &vol,
                                          const PreprocessConfig &cfg);

// Morphology building blocks, exposed for reuse by the phantom checks.
Mask3D dilate(const Mask3D &mask, int radius);
Mask3D erode(const Mask3D &mask, int radius);
Mask3D largest_component(const Mask3D &mask); // 6-connectivity
Mask3D fill_holes(const Mask3D &mask);        // background 6-connectivity
int count_components(const Mask3D &mask);

} // namespace jacfuse
