#include "jacfuse/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "jacfuse/errors.hpp"
#include "jacfuse/rng.hpp"

namespace jacfuse {

const char *class_name(ClassLabel label) {
  switch (label) {
  case ClassLabel::Normal:
    return "Normal";
  case ClassLabel::MCI:
    return "MCI";
  case ClassLabel::MildAD:
    return "MildAD";
  case ClassLabel::SevereAD:
    return "SevereAD";
  }
  return "?";
}

const char *modality_name(Modality m) {
  return m == Modality::MRI ? "MRI" : "CT";
}

std::array<int, kNumClasses> DatasetManifest::class_counts() const {
  std::array<int, kNumClasses> counts{};
  for (const auto &s : subjects)
    ++counts[static_cast<int>(s.class_label)];
  return counts;
}

ClassLabel map_cdr_to_class(double cdr) {
  if (cdr == 0.0)
    return ClassLabel::Normal;
  if (cdr == 0.5)
    return ClassLabel::MCI;
  if (cdr == 1.0 || cdr == 2.0)
    return ClassLabel::MildAD;
  if (cdr == 3.0)
    return ClassLabel::SevereAD;
  throw InvalidCdr("cdr must be one of {0, 0.5, 1, 2, 3}, got " +
                   std::to_string(cdr));
}

namespace {

Modality parse_modality(const std::string &s) {
  if (s == "MRI")
    return Modality::MRI;
  if (s == "CT")
    return Modality::CT;
  throw IoError("manifest: unknown modality \"" + s + "\"");
}

} // namespace

DatasetManifest load_manifest(const std::string &path) {
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot open manifest " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception &e) {
    throw IoError("manifest " + path + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.seed = doc.at("seed").get<uint64_t>();
    for (const auto &js : doc.at("subjects")) {
      SubjectRecord rec;
      rec.id = js.at("id").get<std::string>();
      rec.cdr = js.at("cdr").get<double>();
      rec.class_label = map_cdr_to_class(rec.cdr);
      for (const auto &jsess : js.at("sessions")) {
        Session s;
        s.modality = parse_modality(jsess.at("modality").get<std::string>());
        s.timestamp = jsess.at("timestamp").get<long long>();
        s.path = jsess.at("path").get<std::string>();
        rec.sessions.push_back(std::move(s));
      }
      m.subjects.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception &e) {
    throw IoError("manifest " + path + ": " + e.what());
  }
  for (std::size_t i = 0; i < m.subjects.size(); ++i)
    for (std::size_t j = i + 1; j < m.subjects.size(); ++j)
      if (m.subjects[i].id == m.subjects[j].id)
        throw IoError("manifest: duplicate subject id " + m.subjects[i].id);
  return m;
}

void save_manifest(const DatasetManifest &manifest, const std::string &path) {
  nlohmann::json doc;
  doc["seed"] = manifest.seed;
  doc["subjects"] = nlohmann::json::array();
  for (const auto &rec : manifest.subjects) {
    nlohmann::json js;
    js["id"] = rec.id;
    js["cdr"] = rec.cdr;
    js["sessions"] = nlohmann::json::array();
    for (const auto &s : rec.sessions)
      js["sessions"].push_back({{"modality", modality_name(s.modality)},
                                {"timestamp", s.timestamp},
                                {"path", s.path}});
    doc["subjects"].push_back(std::move(js));
  }
  std::ofstream out(path);
  if (!out)
    throw IoError("cannot write manifest " + path);
  out << doc.dump(2) << "\n";
  if (!out)
    throw IoError("short write on manifest " + path);
}

SubjectRecord select_sessions(const SubjectRecord &rec, uint64_t seed) {
  SubjectRecord out = rec;
  out.selected_mri.reset();
  out.selected_ct.reset();
  std::vector<const Session *> mris, cts;
  for (const auto &s : rec.sessions)
    (s.modality == Modality::MRI ? mris : cts).push_back(&s);

  Rng rng = make_rng(seed, hash_string(rec.id));
  const Session *mri = nullptr;
  if (!mris.empty()) {
    mri = mris[uniform_index(rng, mris.size())];
    out.selected_mri = mri->path;
  }
  const Session *ct = nullptr;
  if (!cts.empty()) {
    if (mri) {
      for (const Session *c : cts) {
        if (!ct) {
          ct = c;
          continue;
        }
        const long long dc = std::llabs(c->timestamp - mri->timestamp);
        const long long db = std::llabs(ct->timestamp - mri->timestamp);
        if (dc < db || (dc == db && c->timestamp < ct->timestamp))
          ct = c;
      }
    } else {
      ct = cts[uniform_index(rng, cts.size())];
    }
    out.selected_ct = ct->path;
  }
  out.mri_missing = !mri;
  out.ct_missing = !ct;
  return out;
}

MomentSignature compute_moments(const Volume3D &vol, const Mask3D &mask) {
  if (!(vol.dims == mask.dims))
    throw ShapeMismatch("compute_moments: volume and mask dims differ");
  std::vector<double> vals;
  vals.reserve(mask.count());
  for (std::size_t i = 0; i < mask.data.size(); ++i)
    if (mask.data[i])
      vals.push_back(vol.data[static_cast<Eigen::Index>(i)]);
  if (vals.size() < 4)
    throw TooFewSamples("compute_moments: need >= 4 masked voxels");
  const double n = static_cast<double>(vals.size());
  double mean = 0.0;
  for (double v : vals)
    mean += v;
  mean /= n;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double v : vals) {
    const double d = v - mean;
    const double d2 = d * d;
    m2 += d2;
    m3 += d2 * d;
    m4 += d2 * d2;
  }
  m2 /= n;
  m3 /= n;
  m4 /= n;
  if (m2 <= 1e-18 * std::max(1.0, mean * mean))
    throw ZeroVariance("compute_moments: constant region");
  MomentSignature sig;
  sig.skewness = m3 / std::pow(m2, 1.5);
  sig.kurtosis = m4 / (m2 * m2);
  return sig;
}

HdiResult impute_hdi(const MomentSignature &target,
                     std::optional<ClassLabel> target_label,
                     const std::vector<HdiDonor> &donors) {
  const HdiDonor *best = nullptr;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (const auto &d : donors) {
    if (target_label && d.label != *target_label)
      continue;
    const double ds = d.signature.skewness - target.skewness;
    const double dk = d.signature.kurtosis - target.kurtosis;
    const double d2 = ds * ds + dk * dk;
    if (d2 < best_d2 || (d2 == best_d2 && best && d.id < best->id)) {
      best = &d;
      best_d2 = d2;
    }
  }
  if (!best)
    throw NoDonorAvailable("impute_hdi: no eligible donor");
  return {best->id, best->path};
}

namespace {

// Indices of the k nearest rows to row i (Euclidean, self excluded), among
// rows satisfying pred. Distance ties break by row index.
template <typename Pred>
std::vector<int> k_nearest(const Eigen::MatrixXd &X, int i, int k, Pred pred) {
  std::vector<std::pair<double, int>> d;
  for (int j = 0; j < X.rows(); ++j) {
    if (j == i || !pred(j))
      continue;
    d.emplace_back((X.row(j) - X.row(i)).squaredNorm(), j);
  }
  const std::size_t kk = std::min<std::size_t>(k, d.size());
  std::partial_sort(d.begin(), d.begin() + kk, d.end());
  std::vector<int> out(kk);
  for (std::size_t t = 0; t < kk; ++t)
    out[t] = d[t].second;
  return out;
}

} // namespace

std::pair<Eigen::MatrixXd, std::vector<int>>
adasyn_oversample(const Eigen::MatrixXd &X, const std::vector<int> &y, int k,
                  double beta, uint64_t seed) {
  if (X.rows() != static_cast<Eigen::Index>(y.size()))
    throw LengthMismatch("adasyn: feature/label count mismatch");
  if (y.empty())
    throw EmptyInput("adasyn: no samples");
  const int n_classes = *std::max_element(y.begin(), y.end()) + 1;
  std::vector<int> counts(n_classes, 0);
  for (int c : y)
    ++counts[c];
  const int majority =
      static_cast<int>(std::max_element(counts.begin(), counts.end()) -
                       counts.begin());
  const int m_majority = counts[majority];

  Rng rng = make_rng(seed);
  std::vector<Eigen::VectorXd> synth;
  std::vector<int> synth_labels;
  for (int cls = 0; cls < n_classes; ++cls) {
    const int m_s = counts[cls];
    if (m_s == 0 || m_s >= m_majority)
      continue;
    if (m_s < k + 1)
      throw TooFewSamples("adasyn: class " + std::to_string(cls) + " has " +
                          std::to_string(m_s) + " samples, need >= k+1");
    const double G = (m_majority - m_s) * beta;
    std::vector<int> members;
    for (int i = 0; i < static_cast<int>(y.size()); ++i)
      if (y[i] == cls)
        members.push_back(i);
    std::vector<double> r(members.size());
    double r_sum = 0.0;
    for (std::size_t t = 0; t < members.size(); ++t) {
      const auto nn = k_nearest(X, members[t], k, [](int) { return true; });
      int maj = 0;
      for (int j : nn)
        if (y[j] == majority)
          ++maj;
      r[t] = nn.empty() ? 0.0 : static_cast<double>(maj) / nn.size();
      r_sum += r[t];
    }
    for (std::size_t t = 0; t < members.size(); ++t) {
      // All-zero densities degenerate to a uniform allocation.
      const double rhat = r_sum > 0.0 ? r[t] / r_sum : 1.0 / members.size();
      const long gi = std::lround(rhat * G);
      if (gi <= 0)
        continue;
      const int i = members[t];
      const auto same =
          k_nearest(X, i, k, [&](int j) { return y[j] == cls; });
      for (long s = 0; s < gi; ++s) {
        const int z = same[uniform_index(rng, same.size())];
        const double lambda = uniform_real(rng);
        synth.emplace_back(X.row(i).transpose() +
                           lambda * (X.row(z) - X.row(i)).transpose());
        synth_labels.push_back(cls);
      }
    }
  }

  Eigen::MatrixXd out(X.rows() + static_cast<Eigen::Index>(synth.size()),
                      X.cols());
  out.topRows(X.rows()) = X;
  for (std::size_t t = 0; t < synth.size(); ++t)
    out.row(X.rows() + static_cast<Eigen::Index>(t)) = synth[t].transpose();
  std::vector<int> labels = y;
  labels.insert(labels.end(), synth_labels.begin(), synth_labels.end());
  return {std::move(out), std::move(labels)};
}

Eigen::VectorXd class_weights(const std::vector<int> &labels, int n_classes) {
  Eigen::VectorXd freq = Eigen::VectorXd::Zero(n_classes);
  for (int c : labels) {
    if (c < 0 || c >= n_classes)
      throw MissingClass("class_weights: label out of range");
    freq[c] += 1.0;
  }
  for (int c = 0; c < n_classes; ++c)
    if (freq[c] == 0.0)
      throw MissingClass("class_weights: class " + std::to_string(c) +
                         " absent");
  Eigen::VectorXd w = freq.cwiseInverse();
  return w / w.sum();
}

std::pair<DatasetManifest, DatasetManifest>
stratified_split(const DatasetManifest &manifest, double test_fraction,
                 uint64_t seed) {
  std::array<std::vector<int>, kNumClasses> by_class;
  for (int i = 0; i < static_cast<int>(manifest.subjects.size()); ++i)
    by_class[static_cast<int>(manifest.subjects[i].class_label)].push_back(i);

  Rng rng = make_rng(seed, 0x73706c69u); // split stream
  std::vector<int> test_idx, train_idx;
  for (int c = 0; c < kNumClasses; ++c) {
    auto &idx = by_class[c];
    if (idx.size() < 2)
      throw ClassTooSmall("stratified_split: class " +
                          std::string(class_name(static_cast<ClassLabel>(c))) +
                          " has " + std::to_string(idx.size()) + " subjects");
    shuffle_inplace(rng, idx);
    const long n_test = std::lround(test_fraction * idx.size());
    for (std::size_t t = 0; t < idx.size(); ++t)
      (static_cast<long>(t) < n_test ? test_idx : train_idx).push_back(idx[t]);
  }
  auto build = [&](std::vector<int> &idx) {
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
      return manifest.subjects[a].id < manifest.subjects[b].id;
    });
    DatasetManifest m;
    m.seed = manifest.seed;
    for (int i : idx)
      m.subjects.push_back(manifest.subjects[i]);
    return m;
  };
  return {build(train_idx), build(test_idx)};
}

std::vector<std::vector<int>>
stratified_kfold(const std::vector<ClassLabel> &labels, int k, uint64_t seed) {
  if (k < 2)
    throw ClassTooSmall("stratified_kfold: k must be >= 2");
  std::array<std::vector<int>, kNumClasses> by_class;
  for (int i = 0; i < static_cast<int>(labels.size()); ++i)
    by_class[static_cast<int>(labels[i])].push_back(i);
  Rng rng = make_rng(seed, 0x666f6c64u); // fold stream
  std::vector<std::vector<int>> folds(k);
  // Rotating the round-robin start by the running total spreads per-class
  // remainders across different folds, keeping overall fold sizes balanced.
  std::size_t assigned = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    auto &idx = by_class[c];
    if (static_cast<int>(idx.size()) < k)
      throw ClassTooSmall("stratified_kfold: class " +
                          std::string(class_name(static_cast<ClassLabel>(c))) +
                          " has fewer members than folds");
    shuffle_inplace(rng, idx);
    for (std::size_t t = 0; t < idx.size(); ++t)
      folds[(assigned + t) % k].push_back(idx[t]);
    assigned += idx.size();
  }
  for (auto &f : folds)
    std::sort(f.begin(), f.end());
  return folds;
}

} // namespace jacfuse
