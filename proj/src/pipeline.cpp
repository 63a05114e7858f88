#include "jacfuse/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <utility>

#include <nlohmann/json.hpp>

#include "jacfuse/checkpoint.hpp"
#include "jacfuse/errors.hpp"
#include "jacfuse/evaluate.hpp"
#include "jacfuse/features.hpp"
#include "jacfuse/nifti.hpp"
#include "jacfuse/parallel.hpp"
#include "jacfuse/phantom.hpp"
#include "jacfuse/preprocess.hpp"
#include "jacfuse/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace jacfuse {

namespace {

std::string read_text(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string &path, const std::string &content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
  if (!out) throw IoError("cannot write " + path);
}

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

Volume3D mask_to_volume(const Mask3D &mask) {
  Volume3D v(mask.dims);
  for (std::int64_t n = 0; n < mask.dims.count(); ++n)
    v.data[n] = mask.data[static_cast<std::size_t>(n)] ? 1.0 : 0.0;
  return v;
}

Mask3D volume_to_mask(const Volume3D &vol) {
  Mask3D m(vol.dims);
  for (std::int64_t n = 0; n < vol.dims.count(); ++n)
    m.data[static_cast<std::size_t>(n)] = vol.data[n] > 0.5 ? 1 : 0;
  return m;
}

// Everything clearly above background, used to seed the MRI bias fit.
Mask3D head_mask(const Volume3D &vol) {
  const double cut = 0.1 * percentile(vol.data, 99.0);
  Mask3D m(vol.dims);
  for (std::int64_t n = 0; n < vol.dims.count(); ++n)
    m.data[static_cast<std::size_t>(n)] = vol.data[n] > cut ? 1 : 0;
  return m;
}

int argmax4(const Eigen::Vector4d &p) {
  int best = 0;
  for (int c = 1; c < 4; ++c)
    if (p[c] > p[best]) best = c;
  return best;
}

std::vector<SubjectRecord> load_selected(const std::string &data_dir,
                                         std::uint64_t seed) {
  DatasetManifest m = load_manifest(data_dir + "/manifest.json");
  std::vector<SubjectRecord> recs;
  recs.reserve(m.subjects.size());
  for (const auto &r : m.subjects) recs.push_back(select_sessions(r, seed));
  return recs;
}

Volume3D read_volume(const std::string &path) { return read_nifti(path).first; }

Volume3D fuse_pair(const Volume3D &mri_jd, const Volume3D &ct_jd, int ds) {
  std::vector<JacobianMap> maps;
  maps.push_back({mean_pool(mri_jd, ds), "mri"});
  maps.push_back({mean_pool(ct_jd, ds), "ct"});
  return early_fuse(maps);
}

// ADASYN with k clamped to what the smallest deficient class supports;
// returns the synthetic count per class for the log.
std::pair<Eigen::MatrixXd, std::vector<int>>
oversample_clamped(const Eigen::MatrixXd &X, const std::vector<int> &y, int k,
                   double beta, std::uint64_t seed) {
  std::array<int, kNumClasses> counts{};
  for (int label : y) ++counts[static_cast<std::size_t>(label)];
  const int majority = *std::max_element(counts.begin(), counts.end());
  int min_deficient = majority;
  for (int c : counts)
    if (c > 0 && c < majority) min_deficient = std::min(min_deficient, c);
  const int k_eff = std::min(k, min_deficient - 1);
  if (min_deficient == majority || k_eff < 1) return {X, y}; // nothing to do
  return adasyn_oversample(X, y, k_eff, beta, seed);
}

std::vector<CurvePoint> to_curve(const std::vector<EpochStats> &stats) {
  std::vector<CurvePoint> curve;
  curve.reserve(stats.size());
  for (std::size_t e = 0; e < stats.size(); ++e)
    curve.push_back({static_cast<int>(e) + 1, stats[e].loss, stats[e].accuracy});
  return curve;
}

json vec4_to_json(const Eigen::Vector4d &v) {
  return json::array({v[0], v[1], v[2], v[3]});
}

constexpr const char *kFeatureFilters = "features/filters";
constexpr const char *kFeatureMeta = "features/meta";

void features_to_checkpoint(const FeatureExtractor &fx, Checkpoint &ck) {
  Eigen::ArrayXd flat = Eigen::Map<const Eigen::ArrayXd>(
      fx.filters.data(), fx.filters.size());
  ck.put_doubles(kFeatureFilters, flat);
  ck.put_ints(kFeatureMeta, {fx.filters.rows(), fx.filters.cols()});
}

FeatureExtractor features_from_checkpoint(const Checkpoint &ck) {
  const auto meta = ck.ints(kFeatureMeta);
  if (meta.size() != 2) throw HeaderInconsistent("feature meta block");
  const Eigen::ArrayXd flat = ck.doubles(kFeatureFilters);
  const auto rows = static_cast<Eigen::Index>(meta[0]);
  const auto cols = static_cast<Eigen::Index>(meta[1]);
  if (flat.size() != rows * cols)
    throw HeaderInconsistent("feature filter block size");
  FeatureExtractor fx;
  fx.filters = Eigen::Map<const Eigen::MatrixXd>(flat.data(), rows, cols);
  return fx;
}

} // namespace

std::string file_digest(const std::string &path) {
  return hex64(hash_string(read_text(path)));
}

std::string files_digest(const std::vector<std::string> &paths) {
  std::string acc;
  for (const auto &p : paths)
    acc += fs::path(p).filename().string() + ":" + file_digest(p) + "\n";
  return hex64(hash_string(acc));
}

struct PipelineRunner::Assembled {
  std::string id;
  int label = 0;
  Volume3D mri_jd, ct_jd; // imputed where a modality is absent
  std::optional<std::string> donor_id;
};

PipelineRunner::PipelineRunner(PipelineOptions opts) : opts_(std::move(opts)) {
  validate_pipeline_config(opts_.cfg);
  out_ = opts_.out_dir.empty() ? opts_.cfg.out_dir : opts_.out_dir;
  // Presentation knobs must not invalidate stage markers.
  PipelineConfig canon = opts_.cfg;
  canon.verbosity = 0;
  canon.out_dir.clear();
  log_.config_digest = config_digest(canon);
  log_.seed = opts_.cfg.seed;
}

void PipelineRunner::say(const std::string &line) const {
  if (opts_.cfg.verbosity >= 1)
    std::fprintf(stderr, "[jacfuse] %s\n", line.c_str());
}

bool PipelineRunner::stage_fresh(
    const std::string &name, const std::vector<std::string> &inputs) const {
  if (opts_.force) return false;
  const std::string marker = out_ + "/.stage_" + name + ".done";
  if (!fs::exists(marker)) return false;
  try {
    const json j = json::parse(read_text(marker));
    if (j.value("config_digest", "") != log_.config_digest) return false;
    if (j.value("inputs_digest", "") != files_digest(inputs)) return false;
    for (const auto &rel : j.value("outputs", std::vector<std::string>{}))
      if (!fs::exists(out_ + "/" + rel)) return false;
    return true;
  } catch (...) {
    return false;
  }
}

void PipelineRunner::finish_stage(const std::string &name,
                                  const std::vector<std::string> &inputs,
                                  const std::vector<std::string> &outputs,
                                  double wall_ms, bool skipped) {
  StageRecord rec;
  rec.name = name;
  rec.skipped = skipped;
  rec.wall_ms = wall_ms;
  rec.input_digest = files_digest(inputs);
  rec.output_digest = files_digest(outputs);
  if (!skipped) {
    json marker;
    marker["config_digest"] = log_.config_digest;
    marker["inputs_digest"] = rec.input_digest;
    std::vector<std::string> rel;
    rel.reserve(outputs.size());
    const std::string prefix = out_ + "/";
    for (const auto &p : outputs)
      rel.push_back(p.rfind(prefix, 0) == 0 ? p.substr(prefix.size()) : p);
    marker["outputs"] = rel;
    write_text(out_ + "/.stage_" + name + ".done", marker.dump(2) + "\n");
  }
  log_.stages.push_back(std::move(rec));
}

void PipelineRunner::run_phantom() {
  const std::vector<std::string> inputs; // config-only stage
  fs::create_directories(data_dir());
  if (stage_fresh("phantom", inputs)) {
    say("phantom: up to date, skipping");
    finish_stage("phantom", inputs, {data_dir() + "/manifest.json"}, 0.0, true);
    return;
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto &cfg = opts_.cfg;
  DatasetManifest manifest = phantom::generate_dataset(
      cfg.n_per_class, cfg.missing_fraction, cfg.seed, cfg.phantom, data_dir());
  const double ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
  say("phantom: " + std::to_string(manifest.subjects.size()) + " subjects -> " +
      data_dir());
  finish_stage("phantom", inputs, {data_dir() + "/manifest.json"}, ms, false);
}

void PipelineRunner::run_preprocess() {
  const std::string d = data_dir();
  const auto recs = load_selected(d, opts_.cfg.seed);

  std::vector<std::string> inputs{d + "/manifest.json"};
  std::vector<std::string> outputs;
  for (const auto &rec : recs) {
    if (!rec.mri_missing) {
      inputs.push_back(d + "/" + *rec.selected_mri);
      outputs.push_back(d + "/" + rec.id + "_mri_pp.nii");
      outputs.push_back(d + "/" + rec.id + "_mri_pp_mask.nii");
    }
    if (!rec.ct_missing) {
      inputs.push_back(d + "/" + *rec.selected_ct);
      outputs.push_back(d + "/" + rec.id + "_ct_pp.nii");
      outputs.push_back(d + "/" + rec.id + "_ct_pp_mask.nii");
    }
  }
  if (stage_fresh("preprocess", inputs)) {
    say("preprocess: up to date, skipping");
    finish_stage("preprocess", inputs, outputs, 0.0, true);
    return;
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto &pcfg = opts_.cfg.preprocess;

  parallel_for(recs.size(), opts_.jobs, [&](std::size_t i) {
    const auto &rec = recs[i];
    try {
      if (!rec.mri_missing) {
        const Volume3D raw = read_volume(d + "/" + *rec.selected_mri);
        const Volume3D unbiased = bias_correct(raw, head_mask(raw), pcfg);
        auto [brain, mask] = brain_extract(contrast_stretch(unbiased, pcfg), pcfg);
        write_nifti(brain, d + "/" + rec.id + "_mri_pp.nii");
        write_nifti(mask_to_volume(mask), d + "/" + rec.id + "_mri_pp_mask.nii",
                    NiftiDatatype::Uint8);
      }
      if (!rec.ct_missing) {
        // CT carries no bias field, only the intensity chain.
        const Volume3D raw = read_volume(d + "/" + *rec.selected_ct);
        auto [brain, mask] = brain_extract(contrast_stretch(raw, pcfg), pcfg);
        write_nifti(brain, d + "/" + rec.id + "_ct_pp.nii");
        write_nifti(mask_to_volume(mask), d + "/" + rec.id + "_ct_pp_mask.nii",
                    NiftiDatatype::Uint8);
      }
    } catch (const std::exception &e) {
      throw Error("preprocess: subject " + rec.id + ": " + e.what());
    }
  });
  const double ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
  say("preprocess: " + std::to_string(recs.size()) + " subjects done");
  finish_stage("preprocess", inputs, outputs, ms, false);
}

void PipelineRunner::run_register() {
  const std::string d = data_dir();
  const auto &cfg = opts_.cfg;
  const auto recs = load_selected(d, cfg.seed);

  std::vector<std::string> inputs{d + "/manifest.json"};
  for (const auto &rec : recs) {
    if (!rec.mri_missing) inputs.push_back(d + "/" + rec.id + "_mri_pp.nii");
    if (!rec.ct_missing) {
      inputs.push_back(d + "/" + rec.id + "_ct_pp.nii");
      inputs.push_back(d + "/" + rec.id + "_ct_pp_mask.nii");
    }
  }
  std::vector<std::string> outputs{d + "/split.json", d + "/template.nii",
                                   d + "/template_mask.nii",
                                   d + "/registration.json"};
  for (const auto &rec : recs) {
    if (!rec.mri_missing) {
      outputs.push_back(d + "/" + rec.id + "_mri_reg.nii");
      outputs.push_back(d + "/" + rec.id + "_mri_field.nii");
    }
    if (!rec.ct_missing) {
      outputs.push_back(d + "/" + rec.id + "_ct_reg.nii");
      outputs.push_back(d + "/" + rec.id + "_ct_field.nii");
    }
  }
  if (stage_fresh("register", inputs)) {
    say("register: up to date, skipping");
    finish_stage("register", inputs, outputs, 0.0, true);
    return;
  }
  const auto t0 = std::chrono::steady_clock::now();

  const DatasetManifest manifest = load_manifest(d + "/manifest.json");
  auto [train_m, test_m] = stratified_split(manifest, cfg.test_fraction,
                                            cfg.seed);
  std::vector<std::string> train_ids, test_ids;
  for (const auto &s : train_m.subjects) train_ids.push_back(s.id);
  for (const auto &s : test_m.subjects) test_ids.push_back(s.id);
  std::sort(train_ids.begin(), train_ids.end());
  std::sort(test_ids.begin(), test_ids.end());
  json split;
  split["train"] = train_ids;
  split["test"] = test_ids;
  write_text(d + "/split.json", split.dump(2) + "\n");

  std::map<std::string, const SubjectRecord *> rec_of;
  for (const auto &rec : recs) rec_of[rec.id] = &rec;

  // Template from the training normals that kept their MRI.
  std::vector<Volume3D> normals;
  for (const auto &id : train_ids) {
    const SubjectRecord &rec = *rec_of.at(id);
    if (rec.class_label == ClassLabel::Normal && !rec.mri_missing)
      normals.push_back(read_volume(d + "/" + id + "_mri_pp.nii"));
  }
  say("register: building template from " + std::to_string(normals.size()) +
      " normals");
  const phantom::TemplateResult tmpl =
      phantom::build_template(normals, cfg.registration);
  write_nifti(tmpl.volume, d + "/template.nii");
  const Mask3D tmask = brain_extract(tmpl.volume, cfg.preprocess).second;
  write_nifti(mask_to_volume(tmask), d + "/template_mask.nii",
              NiftiDatatype::Uint8);

  std::vector<RegistrationSubjectInput> subjects;
  subjects.reserve(recs.size());
  for (const auto &rec : recs) {
    RegistrationSubjectInput in;
    in.id = rec.id;
    in.label = rec.class_label;
    if (!rec.mri_missing)
      in.mri = read_volume(d + "/" + rec.id + "_mri_pp.nii");
    if (!rec.ct_missing) {
      in.ct = read_volume(d + "/" + rec.id + "_ct_pp.nii");
      in.ct_mask =
          volume_to_mask(read_volume(d + "/" + rec.id + "_ct_pp_mask.nii"));
    }
    subjects.push_back(std::move(in));
  }
  say("register: aligning " + std::to_string(subjects.size()) + " subjects");
  const auto results =
      register_pipeline(subjects, tmpl.volume, cfg.registration, opts_.jobs);

  json refs;
  for (const auto &r : results) {
    if (r.mri_registered) {
      write_nifti(*r.mri_registered, d + "/" + r.id + "_mri_reg.nii");
      write_field(*r.mri_field, d + "/" + r.id + "_mri_field.nii");
    }
    if (r.ct_registered) {
      write_nifti(*r.ct_registered, d + "/" + r.id + "_ct_reg.nii");
      write_field(*r.ct_field, d + "/" + r.id + "_ct_field.nii");
      refs[r.id] = {{"ct_reference", r.ct_reference_id}};
    }
  }
  write_text(d + "/registration.json", refs.dump(2) + "\n");

  const double ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
  say("register: done");
  finish_stage("register", inputs, outputs, ms, false);
}

void PipelineRunner::run_jacobian() {
  const std::string d = data_dir();
  const auto recs = load_selected(d, opts_.cfg.seed);

  std::vector<std::string> inputs, outputs;
  for (const auto &rec : recs)
    for (const char *mod : {"mri", "ct"}) {
      const std::string field = d + "/" + rec.id + "_" + mod + "_field.nii";
      if (fs::exists(field)) {
        inputs.push_back(field);
        outputs.push_back(d + "/" + rec.id + "_" + mod + "_jd.nii");
      }
    }
  if (stage_fresh("jacobian", inputs)) {
    say("jacobian: up to date, skipping");
    finish_stage("jacobian", inputs, outputs, 0.0, true);
    return;
  }
  const auto t0 = std::chrono::steady_clock::now();
  parallel_for(inputs.size(), opts_.jobs, [&](std::size_t i) {
    try {
      const JacobianMap map = jacobian_determinant_map(read_field(inputs[i]));
      write_nifti(map.det, outputs[i]);
    } catch (const std::exception &e) {
      throw Error("jacobian: " + inputs[i] + ": " + e.what());
    }
  });
  const double ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
  say("jacobian: " + std::to_string(inputs.size()) + " maps done");
  finish_stage("jacobian", inputs, outputs, ms, false);
}

std::vector<PipelineRunner::Assembled>
PipelineRunner::assemble_inputs(const std::vector<std::string> &ids,
                                bool label_aware) const {
  const std::string d = data_dir();
  const DatasetManifest manifest = load_manifest(d + "/manifest.json");
  std::map<std::string, ClassLabel> label_of;
  for (const auto &s : manifest.subjects) label_of[s.id] = s.class_label;
  const Mask3D tmask = volume_to_mask(read_volume(d + "/template_mask.nii"));

  const json split = json::parse(read_text(d + "/split.json"));
  const auto train_ids = split.at("train").get<std::vector<std::string>>();

  // Donors are training subjects with both maps; the signature is computed
  // on the modality shared with the target, the payload is the other one.
  std::vector<HdiDonor> ct_donors, mri_donors; // named by what they provide
  for (const auto &id : train_ids) {
    const std::string mri_jd = d + "/" + id + "_mri_jd.nii";
    const std::string ct_jd = d + "/" + id + "_ct_jd.nii";
    if (!fs::exists(mri_jd) || !fs::exists(ct_jd)) continue;
    const MomentSignature on_mri =
        compute_moments(read_volume(mri_jd), tmask);
    const MomentSignature on_ct = compute_moments(read_volume(ct_jd), tmask);
    ct_donors.push_back({id, label_of.at(id), on_mri, ct_jd});
    mri_donors.push_back({id, label_of.at(id), on_ct, mri_jd});
  }

  std::vector<Assembled> out;
  out.reserve(ids.size());
  for (const auto &id : ids) {
    const std::string mri_jd = d + "/" + id + "_mri_jd.nii";
    const std::string ct_jd = d + "/" + id + "_ct_jd.nii";
    const bool has_mri = fs::exists(mri_jd);
    const bool has_ct = fs::exists(ct_jd);
    if (!has_mri && !has_ct)
      throw NoModalities("subject " + id + " has no usable modality");

    Assembled a;
    a.id = id;
    a.label = static_cast<int>(label_of.at(id));
    if (has_mri) a.mri_jd = read_volume(mri_jd);
    if (has_ct) a.ct_jd = read_volume(ct_jd);
    const std::optional<ClassLabel> hint =
        label_aware ? std::optional<ClassLabel>(label_of.at(id)) : std::nullopt;
    if (!has_ct) {
      const HdiResult r =
          impute_hdi(compute_moments(a.mri_jd, tmask), hint, ct_donors);
      a.ct_jd = read_volume(r.path);
      a.donor_id = r.donor_id;
    } else if (!has_mri) {
      const HdiResult r =
          impute_hdi(compute_moments(a.ct_jd, tmask), hint, mri_donors);
      a.mri_jd = read_volume(r.path);
      a.donor_id = r.donor_id;
    }
    out.push_back(std::move(a));
  }
  return out;
}

void PipelineRunner::run_train() {
  const std::string d = data_dir();
  const auto &cfg = opts_.cfg;

  std::vector<std::string> inputs{d + "/split.json", d + "/template_mask.nii"};
  {
    const auto recs = load_selected(d, cfg.seed);
    for (const auto &rec : recs)
      for (const char *mod : {"mri", "ct"})
        if (fs::exists(d + "/" + rec.id + "_" + mod + "_jd.nii"))
          inputs.push_back(d + "/" + rec.id + "_" + mod + "_jd.nii");
  }
  const int k = opts_.folds_override > 0 ? opts_.folds_override : cfg.cv_folds;
  const std::string ckpt_path = models_dir() + "/models.ckpt";
  std::vector<std::string> outputs{ckpt_path, models_dir() + "/summary.json"};
  for (int f = 0; f < k; ++f)
    outputs.push_back(models_dir() + "/curves/fold" + std::to_string(f) +
                      "_cnn.csv");
  outputs.push_back(models_dir() + "/curves/final_cnn.csv");

  if (stage_fresh("train", inputs)) {
    say("train: up to date, skipping");
    finish_stage("train", inputs, outputs, 0.0, true);
    return;
  }
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(models_dir() + "/curves");

  const json split = json::parse(read_text(d + "/split.json"));
  const auto train_ids = split.at("train").get<std::vector<std::string>>();
  const auto assembled = assemble_inputs(train_ids, true);
  const Mask3D tmask = volume_to_mask(read_volume(d + "/template_mask.nii"));
  const FeatureExtractor fx =
      FeatureExtractor::create(cfg.seed, cfg.feature_filters);

  const auto n = static_cast<Eigen::Index>(assembled.size());
  std::vector<int> labels(assembled.size());
  std::vector<Volume3D> fused(assembled.size());
  Eigen::MatrixXd Xmri(n, fx.n_features()), Xct(n, fx.n_features());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto &a = assembled[static_cast<std::size_t>(i)];
    labels[static_cast<std::size_t>(i)] = a.label;
    fused[static_cast<std::size_t>(i)] =
        fuse_pair(a.mri_jd, a.ct_jd, cfg.cnn_downsample);
    Xmri.row(i) = extract_features(a.mri_jd, tmask, fx).transpose();
    Xct.row(i) = extract_features(a.ct_jd, tmask, fx).transpose();
  }
  const Dims3 fused_dims = fused.front().dims;
  const auto n_fused = static_cast<Eigen::Index>(fused_dims.count());
  Eigen::MatrixXd Xcnn(n, n_fused);
  for (Eigen::Index i = 0; i < n; ++i)
    Xcnn.row(i) = fused[static_cast<std::size_t>(i)].data.matrix().transpose();

  std::vector<ClassLabel> fold_labels;
  fold_labels.reserve(labels.size());
  for (int label : labels) fold_labels.push_back(static_cast<ClassLabel>(label));
  const auto folds = stratified_kfold(fold_labels, k, cfg.seed);

  struct TrainedSet {
    Cnn3dModel cnn;
    ForestModel rf_mri, rf_ct;
    std::vector<EpochStats> curve;
    std::array<int, 3> synthetic{}; // cnn, rf_mri, rf_ct
  };
  auto subset = [](const Eigen::MatrixXd &X, const std::vector<int> &rows) {
    Eigen::MatrixXd S(static_cast<Eigen::Index>(rows.size()), X.cols());
    for (std::size_t r = 0; r < rows.size(); ++r)
      S.row(static_cast<Eigen::Index>(r)) = X.row(rows[r]);
    return S;
  };
  auto train_set = [&](const std::vector<int> &rows,
                       std::uint64_t salt) -> TrainedSet {
    std::vector<int> y;
    y.reserve(rows.size());
    for (int r : rows) y.push_back(labels[static_cast<std::size_t>(r)]);
    const Eigen::VectorXd weights = class_weights(y);

    auto [cnn_X, cnn_y] = oversample_clamped(subset(Xcnn, rows), y,
                                             cfg.adasyn_k, cfg.adasyn_beta,
                                             cfg.seed + salt);
    auto [mri_X, mri_y] = oversample_clamped(subset(Xmri, rows), y,
                                             cfg.adasyn_k, cfg.adasyn_beta,
                                             cfg.seed + salt + 1);
    auto [ct_X, ct_y] = oversample_clamped(subset(Xct, rows), y,
                                           cfg.adasyn_k, cfg.adasyn_beta,
                                           cfg.seed + salt + 2);

    std::vector<Volume3D> cnn_vols(static_cast<std::size_t>(cnn_X.rows()));
    for (Eigen::Index r = 0; r < cnn_X.rows(); ++r) {
      Volume3D v(fused_dims);
      v.data = cnn_X.row(r).transpose().array();
      cnn_vols[static_cast<std::size_t>(r)] = std::move(v);
    }

    TrainedSet ts;
    ts.synthetic = {static_cast<int>(cnn_X.rows() - static_cast<Eigen::Index>(rows.size())),
                    static_cast<int>(mri_X.rows() - static_cast<Eigen::Index>(rows.size())),
                    static_cast<int>(ct_X.rows() - static_cast<Eigen::Index>(rows.size()))};

    ts.cnn = Cnn3dModel(fused_dims, cfg.cnn, cfg.seed + salt);
    TrainConfig tc = cfg.train;
    tc.class_weights = weights;
    tc.seed = cfg.seed + salt;
    ts.curve = cnn_train(ts.cnn, cnn_vols, cnn_y, tc);

    ForestConfig fc = cfg.forest;
    fc.seed = cfg.seed + salt;
    ts.rf_mri = rf_train(mri_X, mri_y, fc, opts_.jobs);
    fc.seed = cfg.seed + salt + 500;
    ts.rf_ct = rf_train(ct_X, ct_y, fc, opts_.jobs);
    return ts;
  };
  auto accuracy_of = [](const std::vector<int> &pred,
                        const std::vector<int> &truth) {
    int hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
    return truth.empty() ? 0.0 : static_cast<double>(hit) / truth.size();
  };

  json fold_rows = json::array();
  std::array<double, 4> acc_sums{}; // cnn, rf_mri, rf_ct, elf
  for (int f = 0; f < k; ++f) {
    std::vector<int> val = folds[static_cast<std::size_t>(f)];
    std::vector<int> tr;
    for (int g = 0; g < k; ++g)
      if (g != f)
        tr.insert(tr.end(), folds[static_cast<std::size_t>(g)].begin(),
                  folds[static_cast<std::size_t>(g)].end());
    std::sort(tr.begin(), tr.end());
    std::sort(val.begin(), val.end());

    const TrainedSet ts =
        train_set(tr, 1000ull * (static_cast<std::uint64_t>(f) + 1));
    const std::string curve_path =
        models_dir() + "/curves/fold" + std::to_string(f) + "_cnn.csv";
    write_curve_csv(curve_path, to_curve(ts.curve));

    std::vector<Volume3D> val_vols;
    std::vector<int> val_y;
    for (int r : val) {
      val_vols.push_back(fused[static_cast<std::size_t>(r)]);
      val_y.push_back(labels[static_cast<std::size_t>(r)]);
    }
    const Eigen::MatrixXd p_cnn = ts.cnn.predict(val_vols);
    const Eigen::MatrixXd p_mri = rf_predict_proba(ts.rf_mri, subset(Xmri, val));
    const Eigen::MatrixXd p_ct = rf_predict_proba(ts.rf_ct, subset(Xct, val));
    std::vector<int> pred_cnn, pred_mri, pred_ct, pred_elf;
    for (Eigen::Index r = 0; r < p_cnn.rows(); ++r) {
      const Eigen::Vector4d c = p_cnn.row(r).transpose();
      const Eigen::Vector4d m = p_mri.row(r).transpose();
      const Eigen::Vector4d t = p_ct.row(r).transpose();
      pred_cnn.push_back(argmax4(c));
      pred_mri.push_back(argmax4(m));
      pred_ct.push_back(argmax4(t));
      pred_elf.push_back(late_fuse({c, m, t}).second);
    }
    const double a_cnn = accuracy_of(pred_cnn, val_y);
    const double a_mri = accuracy_of(pred_mri, val_y);
    const double a_ct = accuracy_of(pred_ct, val_y);
    const double a_elf = accuracy_of(pred_elf, val_y);
    acc_sums[0] += a_cnn;
    acc_sums[1] += a_mri;
    acc_sums[2] += a_ct;
    acc_sums[3] += a_elf;
    fold_rows.push_back({{"fold", f},
                         {"n_train", tr.size()},
                         {"n_val", val.size()},
                         {"val_accuracy",
                          {{"cnn", a_cnn},
                           {"rf_mri", a_mri},
                           {"rf_ct", a_ct},
                           {"elf", a_elf}}},
                         {"synthetic",
                          {{"cnn", ts.synthetic[0]},
                           {"rf_mri", ts.synthetic[1]},
                           {"rf_ct", ts.synthetic[2]}}},
                         {"curve_csv",
                          "curves/fold" + std::to_string(f) + "_cnn.csv"}});
    say("train: fold " + std::to_string(f) + " val acc cnn " +
        std::to_string(a_cnn) + " rf_mri " + std::to_string(a_mri) +
        " rf_ct " + std::to_string(a_ct) + " elf " + std::to_string(a_elf));
  }

  std::vector<int> all_rows(assembled.size());
  std::iota(all_rows.begin(), all_rows.end(), 0);
  const TrainedSet final_set = train_set(all_rows, 0);
  write_curve_csv(models_dir() + "/curves/final_cnn.csv",
                  to_curve(final_set.curve));

  Checkpoint ck;
  cnn_to_checkpoint(final_set.cnn, ck, "cnn");
  forest_to_checkpoint(final_set.rf_mri, ck, "rf_mri");
  forest_to_checkpoint(final_set.rf_ct, ck, "rf_ct");
  features_to_checkpoint(fx, ck);
  ck.save(ckpt_path);

  const Eigen::VectorXd weights = class_weights(labels);
  json imputations = json::array();
  for (const auto &a : assembled)
    if (a.donor_id)
      imputations.push_back({{"id", a.id}, {"donor", *a.donor_id}});
  json summary;
  summary["fusion_order"] = {"mri", "ct"};
  summary["fused_dims"] = {fused_dims.nx, fused_dims.ny, fused_dims.nz};
  summary["class_weights"] = {weights[0], weights[1], weights[2], weights[3]};
  summary["cv_folds"] = k;
  summary["folds"] = fold_rows;
  summary["fold_mean_val_accuracy"] = {{"cnn", acc_sums[0] / k},
                                       {"rf_mri", acc_sums[1] / k},
                                       {"rf_ct", acc_sums[2] / k},
                                       {"elf", acc_sums[3] / k}};
  summary["imputations"] = imputations;
  summary["final"] = {{"curve_csv", "curves/final_cnn.csv"},
                      {"n_train", assembled.size()},
                      {"synthetic",
                       {{"cnn", final_set.synthetic[0]},
                        {"rf_mri", final_set.synthetic[1]},
                        {"rf_ct", final_set.synthetic[2]}}}};
  write_text(models_dir() + "/summary.json", summary.dump(2) + "\n");

  const double ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
  say("train: checkpoints written");
  finish_stage("train", inputs, outputs, ms, false);
}

void PipelineRunner::run_evaluate() {
  const std::string d = data_dir();
  const std::string ckpt_path = models_dir() + "/models.ckpt";

  std::vector<std::string> inputs{d + "/manifest.json", d + "/split.json",
                                  d + "/template_mask.nii", ckpt_path};
  {
    const auto recs = load_selected(d, opts_.cfg.seed);
    for (const auto &rec : recs)
      for (const char *mod : {"mri", "ct"})
        if (fs::exists(d + "/" + rec.id + "_" + mod + "_jd.nii"))
          inputs.push_back(d + "/" + rec.id + "_" + mod + "_jd.nii");
  }
  const std::vector<std::string> outputs{
      reports_dir() + "/metrics.json", reports_dir() + "/ablation.txt",
      reports_dir() + "/predictions.jsonl", reports_dir() + "/per_class.csv"};
  if (stage_fresh("evaluate", inputs)) {
    say("evaluate: up to date, skipping");
    finish_stage("evaluate", inputs, outputs, 0.0, true);
    return;
  }
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(reports_dir());

  const Checkpoint ck = Checkpoint::load(ckpt_path);
  const Cnn3dModel cnn = cnn_from_checkpoint(ck, "cnn");
  const ForestModel rf_mri = forest_from_checkpoint(ck, "rf_mri");
  const ForestModel rf_ct = forest_from_checkpoint(ck, "rf_ct");
  const FeatureExtractor fx = features_from_checkpoint(ck);
  const Mask3D tmask = volume_to_mask(read_volume(d + "/template_mask.nii"));

  const json split = json::parse(read_text(d + "/split.json"));
  const auto test_ids = split.at("test").get<std::vector<std::string>>();
  const auto assembled = assemble_inputs(test_ids, false);

  std::vector<int> actual, pred_cnn, pred_mri, pred_ct, pred_elf;
  std::vector<EnsemblePrediction> predictions;
  for (const auto &a : assembled) {
    const Volume3D fv = fuse_pair(a.mri_jd, a.ct_jd, opts_.cfg.cnn_downsample);
    Eigen::MatrixXd fm(1, fx.n_features());
    fm.row(0) = extract_features(a.mri_jd, tmask, fx).transpose();
    Eigen::MatrixXd fc(1, fx.n_features());
    fc.row(0) = extract_features(a.ct_jd, tmask, fx).transpose();

    EnsemblePrediction p;
    p.id = a.id;
    p.p_cnn = cnn.predict({fv}).row(0).transpose();
    p.p_rf_mri = rf_predict_proba(rf_mri, fm).row(0).transpose();
    p.p_rf_ct = rf_predict_proba(rf_ct, fc).row(0).transpose();
    std::tie(p.p_aggr, p.predicted) =
        late_fuse({p.p_cnn, p.p_rf_mri, p.p_rf_ct});
    p.donor_id = a.donor_id;

    actual.push_back(a.label);
    pred_cnn.push_back(argmax4(p.p_cnn));
    pred_mri.push_back(argmax4(p.p_rf_mri));
    pred_ct.push_back(argmax4(p.p_rf_ct));
    pred_elf.push_back(p.predicted);
    predictions.push_back(std::move(p));
  }

  const MetricsReport report = build_report(actual, {{"CNN", pred_cnn},
                                                     {"RF-CT", pred_ct},
                                                     {"RF-MRI", pred_mri},
                                                     {"ELF", pred_elf}});
  write_text(reports_dir() + "/metrics.json", report_to_json(report));
  write_text(reports_dir() + "/ablation.txt", report_to_table(report));

  std::string jsonl;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto &p = predictions[i];
    json line;
    line["id"] = p.id;
    line["actual"] = actual[i];
    line["predicted"] = p.predicted;
    line["p_cnn"] = vec4_to_json(p.p_cnn);
    line["p_rf_mri"] = vec4_to_json(p.p_rf_mri);
    line["p_rf_ct"] = vec4_to_json(p.p_rf_ct);
    line["p_aggr"] = vec4_to_json(p.p_aggr);
    line["donor_id"] = p.donor_id ? json(*p.donor_id) : json(nullptr);
    jsonl += line.dump() + "\n";
  }
  write_text(reports_dir() + "/predictions.jsonl", jsonl);

  // Per-class rates of the fused row, one line per class for bar plots.
  const AblationRow &elf = report.rows.back();
  std::string csv = "class,label,sensitivity,specificity\n";
  for (int c = 0; c < 4; ++c) {
    const auto &r = elf.rates[static_cast<std::size_t>(c)];
    char buf[96];
    std::snprintf(buf, sizeof buf, "%d,%s,%s,%s\n", c,
                  class_name(static_cast<ClassLabel>(c)),
                  r.sensitivity ? std::to_string(*r.sensitivity).c_str() : "",
                  r.specificity ? std::to_string(*r.specificity).c_str() : "");
    csv += buf;
  }
  write_text(reports_dir() + "/per_class.csv", csv);

  const MacroMetrics macro = elf.macro;
  say("evaluate: elf accuracy " + std::to_string(macro.accuracy) +
      " macro sensitivity " + std::to_string(macro.sensitivity));

  const double ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
  finish_stage("evaluate", inputs, outputs, ms, false);
}

void PipelineRunner::run_all() {
  run_phantom();
  run_preprocess();
  run_register();
  run_jacobian();
  run_train();
  run_evaluate();
  write_log();
}

void PipelineRunner::write_log() const {
  json j;
  j["config_digest"] = log_.config_digest;
  j["seed"] = log_.seed;
  json stages = json::array();
  for (const auto &s : log_.stages)
    stages.push_back({{"name", s.name},
                      {"skipped", s.skipped},
                      {"wall_ms", s.wall_ms},
                      {"input_digest", s.input_digest},
                      {"output_digest", s.output_digest}});
  j["stages"] = stages;
  write_text(out_ + "/run_log.json", j.dump(2) + "\n");
}

} // namespace jacfuse
