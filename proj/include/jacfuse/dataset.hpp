// dataset.hpp - subject manifests, labeling, session selection, moments,
// hot-deck imputation, ADASYN oversampling, class weights, stratified splits.
#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "jacfuse/volume.hpp"

namespace jacfuse {

enum class ClassLabel : int { Normal = 0, MCI = 1, MildAD = 2, SevereAD = 3 };
inline constexpr int kNumClasses = 4;
const char *class_name(ClassLabel label);

enum class Modality : int { MRI = 0, CT = 1 };
const char *modality_name(Modality m);

struct Session {
  Modality modality;
  long long timestamp; // days since epoch
  std::string path;
};

struct SubjectRecord {
  std::string id;
  double cdr = 0.0;
  ClassLabel class_label = ClassLabel::Normal;
  std::vector<Session> sessions;
  std::optional<std::string> selected_mri;
  std::optional<std::string> selected_ct;
  bool mri_missing = false;
  bool ct_missing = false;
};

// Pearson (non-excess) moments over masked voxels, population divisor n.
struct MomentSignature {
  double skewness = 0.0;
  double kurtosis = 0.0;
};

struct DatasetManifest {
  std::vector<SubjectRecord> subjects;
  uint64_t seed = 0;
  std::array<int, kNumClasses> class_counts() const;
};

// 0 -> Normal, 0.5 -> MCI, 1 or 2 -> MildAD, 3 -> SevereAD.
ClassLabel map_cdr_to_class(double cdr);

DatasetManifest load_manifest(const std::string &path);
void save_manifest(const DatasetManifest &manifest, const std::string &path);

// Picks one MRI session uniformly at random and the CT session with the
// nearest timestamp (tie: earlier). Sets missing flags for absent modalities.
SubjectRecord select_sessions(const SubjectRecord &rec, uint64_t seed);

// Requires >= 4 masked voxels and nonzero variance.
MomentSignature compute_moments(const Volume3D &vol, const Mask3D &mask);

struct HdiDonor {
  std::string id;
  ClassLabel label;
  MomentSignature signature; // on the modality shared with the target
  std::string path;          // donor's volume for the missing modality
};
struct HdiResult {
  std::string donor_id;
  std::string path;
};

// Donor = argmin Euclidean distance in (skewness, kurtosis); ties break by
// lexicographic id. target_label restricts donors to the same class when
// present (training time); pass nullopt at inference where labels are hidden.
HdiResult impute_hdi(const MomentSignature &target,
                     std::optional<ClassLabel> target_label,
                     const std::vector<HdiDonor> &donors);

// Adaptive synthetic oversampling: minority points spawn synthetics in
// proportion to the majority density among their k neighbors. X is n x d,
// one row per sample. Synthetic rows are appended; original rows are
// untouched. Every non-majority class with count below the majority count
// needs >= k+1 members.
std::pair<Eigen::MatrixXd, std::vector<int>>
adasyn_oversample(const Eigen::MatrixXd &X, const std::vector<int> &y, int k,
                  double beta, uint64_t seed);

// Normalized inverse-frequency weights; every class in [0, n_classes) must
// occur at least once.
Eigen::VectorXd class_weights(const std::vector<int> &labels,
                              int n_classes = kNumClasses);

std::pair<DatasetManifest, DatasetManifest>
stratified_split(const DatasetManifest &manifest, double test_fraction,
                 uint64_t seed);

// Returns k index lists partitioning [0, labels.size()); per-class counts
// across folds differ by at most one.
std::vector<std::vector<int>>
stratified_kfold(const std::vector<ClassLabel> &labels, int k, uint64_t seed);

} // namespace jacfuse
