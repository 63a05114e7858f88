#include "jacfuse/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "jacfuse/errors.hpp"
#include "jacfuse/rng.hpp"

namespace jacfuse {

namespace {

using nlohmann::json;

void reject_unknown(const json &doc, const std::set<std::string> &allowed,
                    const std::string &where) {
  if (!doc.is_object())
    throw InvalidConfig(where + " must be a JSON object");
  for (const auto &item : doc.items())
    if (!allowed.count(item.key()))
      throw InvalidConfig("unknown key \"" + item.key() + "\" in " + where);
}

template <class T>
void read(const json &doc, const char *key, T &out) {
  if (doc.contains(key))
    out = doc.at(key).get<T>();
}

void parse_preprocess(const json &doc, PreprocessConfig &cfg) {
  reject_unknown(doc,
                 {"bias_poly_degree", "stretch_p_lo", "stretch_p_hi",
                  "bet_threshold_fraction", "morphology_radius"},
                 "preprocess");
  read(doc, "bias_poly_degree", cfg.bias_poly_degree);
  read(doc, "stretch_p_lo", cfg.stretch_p_lo);
  read(doc, "stretch_p_hi", cfg.stretch_p_hi);
  read(doc, "bet_threshold_fraction", cfg.bet_threshold_fraction);
  read(doc, "morphology_radius", cfg.morphology_radius);
}

void parse_registration(const json &doc, RegistrationParams &cfg) {
  reject_unknown(doc,
                 {"pyramid_levels", "iterations_coarse", "iterations_fine",
                  "alpha", "step_size", "convergence_tol"},
                 "registration");
  read(doc, "pyramid_levels", cfg.pyramid_levels);
  read(doc, "iterations_coarse", cfg.iterations_coarse);
  read(doc, "iterations_fine", cfg.iterations_fine);
  read(doc, "alpha", cfg.alpha);
  read(doc, "step_size", cfg.step_size);
  read(doc, "convergence_tol", cfg.convergence_tol);
}

void parse_dataset(const json &doc, PipelineConfig &cfg) {
  reject_unknown(doc, {"test_fraction", "adasyn_k", "adasyn_beta", "cv_folds"},
                 "dataset");
  read(doc, "test_fraction", cfg.test_fraction);
  read(doc, "adasyn_k", cfg.adasyn_k);
  read(doc, "adasyn_beta", cfg.adasyn_beta);
  read(doc, "cv_folds", cfg.cv_folds);
}

void parse_models(const json &doc, PipelineConfig &cfg) {
  reject_unknown(doc,
                 {"conv1_channels", "conv2_channels", "dropout_rate",
                  "bn_momentum", "bn_epsilon", "learning_rate", "batch_size",
                  "epochs", "n_trees", "mtry", "bootstrap", "feature_filters",
                  "cnn_downsample"},
                 "models");
  read(doc, "conv1_channels", cfg.cnn.conv1_channels);
  read(doc, "conv2_channels", cfg.cnn.conv2_channels);
  read(doc, "dropout_rate", cfg.cnn.dropout_rate);
  read(doc, "bn_momentum", cfg.cnn.bn_momentum);
  read(doc, "bn_epsilon", cfg.cnn.bn_epsilon);
  read(doc, "learning_rate", cfg.train.learning_rate);
  read(doc, "batch_size", cfg.train.batch_size);
  read(doc, "epochs", cfg.train.epochs);
  read(doc, "n_trees", cfg.forest.n_trees);
  read(doc, "mtry", cfg.forest.mtry);
  read(doc, "bootstrap", cfg.forest.bootstrap);
  read(doc, "feature_filters", cfg.feature_filters);
  read(doc, "cnn_downsample", cfg.cnn_downsample);
}

void parse_phantom(const json &doc, PipelineConfig &cfg) {
  reject_unknown(doc,
                 {"dims", "ventricle_expansion", "cortical_thinning",
                  "noise_sigma", "bias_amplitude", "skull_intensity",
                  "ct_intensity_remap", "jitter_rotation_deg",
                  "jitter_translation_vox", "texture_amplitude", "n_per_class",
                  "missing_fraction"},
                 "phantom");
  if (doc.contains("dims")) {
    const int n = doc.at("dims").get<int>();
    cfg.phantom.dims = {n, n, n};
  }
  if (doc.contains("ventricle_expansion")) {
    const auto v = doc.at("ventricle_expansion").get<std::vector<double>>();
    if (v.size() != kNumClasses)
      throw InvalidConfig("ventricle_expansion needs 4 entries");
    std::copy(v.begin(), v.end(), cfg.phantom.ventricle_expansion.begin());
  }
  if (doc.contains("cortical_thinning")) {
    const auto v = doc.at("cortical_thinning").get<std::vector<double>>();
    if (v.size() != kNumClasses)
      throw InvalidConfig("cortical_thinning needs 4 entries");
    std::copy(v.begin(), v.end(), cfg.phantom.cortical_thinning.begin());
  }
  read(doc, "noise_sigma", cfg.phantom.noise_sigma);
  read(doc, "bias_amplitude", cfg.phantom.bias_amplitude);
  read(doc, "skull_intensity", cfg.phantom.skull_intensity);
  if (doc.contains("ct_intensity_remap")) {
    cfg.phantom.ct_intensity_remap.clear();
    for (const auto &node : doc.at("ct_intensity_remap")) {
      if (!node.is_array() || node.size() != 2)
        throw InvalidConfig("ct_intensity_remap nodes must be [in, out]");
      cfg.phantom.ct_intensity_remap.emplace_back(node[0].get<double>(),
                                                  node[1].get<double>());
    }
  }
  read(doc, "jitter_rotation_deg", cfg.phantom.jitter_rotation_deg);
  read(doc, "jitter_translation_vox", cfg.phantom.jitter_translation_vox);
  read(doc, "texture_amplitude", cfg.phantom.texture_amplitude);
  read(doc, "n_per_class", cfg.n_per_class);
  read(doc, "missing_fraction", cfg.missing_fraction);
}

} // namespace

void validate_pipeline_config(const PipelineConfig &cfg) {
  if (cfg.test_fraction <= 0.0 || cfg.test_fraction >= 1.0)
    throw InvalidConfig("test_fraction must lie in (0, 1)");
  if (cfg.adasyn_k < 1 || cfg.adasyn_beta < 0.0 || cfg.adasyn_beta > 1.0)
    throw InvalidConfig("bad oversampling parameters");
  if (cfg.cv_folds < 2)
    throw InvalidConfig("cv_folds must be at least 2");
  if (cfg.train.learning_rate <= 0.0 || cfg.train.batch_size < 1 ||
      cfg.train.epochs < 1)
    throw InvalidConfig("bad training parameters");
  if (cfg.cnn.dropout_rate < 0.0 || cfg.cnn.dropout_rate >= 1.0)
    throw InvalidConfig("dropout_rate must lie in [0, 1)");
  if (cfg.cnn.conv1_channels < 1 || cfg.cnn.conv2_channels < 1)
    throw InvalidConfig("conv channels must be positive");
  if (cfg.forest.n_trees < 1)
    throw InvalidConfig("n_trees must be positive");
  if (cfg.feature_filters < 1)
    throw InvalidConfig("feature_filters must be positive");
  if (cfg.cnn_downsample < 1)
    throw InvalidConfig("cnn_downsample must be positive");
  if (cfg.n_per_class < 2)
    throw InvalidConfig("n_per_class must be at least 2");
  if (cfg.missing_fraction < 0.0 || cfg.missing_fraction >= 1.0)
    throw InvalidConfig("missing_fraction must lie in [0, 1)");
  phantom::validate_config(cfg.phantom);
}

PipelineConfig parse_pipeline_config(const std::string &json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception &e) {
    throw InvalidConfig(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(doc,
                 {"config_version", "seed", "out_dir", "verbosity",
                  "preprocess", "registration", "jacobian", "dataset",
                  "models", "fusion", "evaluate", "phantom"},
                 "config");
  PipelineConfig cfg;
  if (doc.contains("config_version") &&
      doc.at("config_version").get<int>() != 1)
    throw InvalidConfig("unsupported config_version");
  read(doc, "seed", cfg.seed);
  read(doc, "out_dir", cfg.out_dir);
  read(doc, "verbosity", cfg.verbosity);
  if (doc.contains("preprocess"))
    parse_preprocess(doc.at("preprocess"), cfg.preprocess);
  if (doc.contains("registration"))
    parse_registration(doc.at("registration"), cfg.registration);
  if (doc.contains("jacobian")) {
    reject_unknown(doc.at("jacobian"), {"classify_eps"}, "jacobian");
    read(doc.at("jacobian"), "classify_eps", cfg.jacobian_classify_eps);
  }
  if (doc.contains("dataset"))
    parse_dataset(doc.at("dataset"), cfg);
  if (doc.contains("models"))
    parse_models(doc.at("models"), cfg);
  if (doc.contains("fusion"))
    reject_unknown(doc.at("fusion"), {}, "fusion");
  if (doc.contains("evaluate"))
    reject_unknown(doc.at("evaluate"), {}, "evaluate");
  if (doc.contains("phantom"))
    parse_phantom(doc.at("phantom"), cfg);
  validate_pipeline_config(cfg);
  return cfg;
}

PipelineConfig load_pipeline_config(const std::string &path) {
  std::ifstream f(path);
  if (!f)
    throw IoError("cannot open config " + path);
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_pipeline_config(buf.str());
}

std::string pipeline_config_to_json(const PipelineConfig &cfg) {
  json doc;
  doc["config_version"] = 1;
  doc["seed"] = cfg.seed;
  doc["out_dir"] = cfg.out_dir;
  doc["verbosity"] = cfg.verbosity;
  doc["preprocess"] = {
      {"bias_poly_degree", cfg.preprocess.bias_poly_degree},
      {"stretch_p_lo", cfg.preprocess.stretch_p_lo},
      {"stretch_p_hi", cfg.preprocess.stretch_p_hi},
      {"bet_threshold_fraction", cfg.preprocess.bet_threshold_fraction},
      {"morphology_radius", cfg.preprocess.morphology_radius}};
  doc["registration"] = {
      {"pyramid_levels", cfg.registration.pyramid_levels},
      {"iterations_coarse", cfg.registration.iterations_coarse},
      {"iterations_fine", cfg.registration.iterations_fine},
      {"alpha", cfg.registration.alpha},
      {"step_size", cfg.registration.step_size},
      {"convergence_tol", cfg.registration.convergence_tol}};
  doc["jacobian"] = {{"classify_eps", cfg.jacobian_classify_eps}};
  doc["dataset"] = {{"test_fraction", cfg.test_fraction},
                    {"adasyn_k", cfg.adasyn_k},
                    {"adasyn_beta", cfg.adasyn_beta},
                    {"cv_folds", cfg.cv_folds}};
  doc["models"] = {{"conv1_channels", cfg.cnn.conv1_channels},
                   {"conv2_channels", cfg.cnn.conv2_channels},
                   {"dropout_rate", cfg.cnn.dropout_rate},
                   {"bn_momentum", cfg.cnn.bn_momentum},
                   {"bn_epsilon", cfg.cnn.bn_epsilon},
                   {"learning_rate", cfg.train.learning_rate},
                   {"batch_size", cfg.train.batch_size},
                   {"epochs", cfg.train.epochs},
                   {"n_trees", cfg.forest.n_trees},
                   {"mtry", cfg.forest.mtry},
                   {"bootstrap", cfg.forest.bootstrap},
                   {"feature_filters", cfg.feature_filters},
                   {"cnn_downsample", cfg.cnn_downsample}};
  json remap = json::array();
  for (const auto &[in, out] : cfg.phantom.ct_intensity_remap)
    remap.push_back({in, out});
  doc["phantom"] = {
      {"dims", cfg.phantom.dims.nx},
      {"ventricle_expansion", cfg.phantom.ventricle_expansion},
      {"cortical_thinning", cfg.phantom.cortical_thinning},
      {"noise_sigma", cfg.phantom.noise_sigma},
      {"bias_amplitude", cfg.phantom.bias_amplitude},
      {"skull_intensity", cfg.phantom.skull_intensity},
      {"ct_intensity_remap", remap},
      {"jitter_rotation_deg", cfg.phantom.jitter_rotation_deg},
      {"jitter_translation_vox", cfg.phantom.jitter_translation_vox},
      {"texture_amplitude", cfg.phantom.texture_amplitude},
      {"n_per_class", cfg.n_per_class},
      {"missing_fraction", cfg.missing_fraction}};
  return doc.dump(2);
}

std::string config_digest(const PipelineConfig &cfg) {
  const std::uint64_t h = hash_string(pipeline_config_to_json(cfg));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

} // namespace jacfuse
