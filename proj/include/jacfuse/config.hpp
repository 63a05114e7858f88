// config.hpp - one strict JSON document configuring every pipeline stage.
#pragma once

#include <cstdint>
#include <string>

#include "jacfuse/cnn.hpp"
#include "jacfuse/forest.hpp"
#include "jacfuse/phantom.hpp"
#include "jacfuse/preprocess.hpp"
#include "jacfuse/registration.hpp"

namespace jacfuse {

// Defaults form the desk-scale benchmark profile; an empty document is valid.
// Unknown keys anywhere in the document are rejected.
struct PipelineConfig {
  std::uint64_t seed = 7;
  int verbosity = 1;
  std::string out_dir = "out";

  PreprocessConfig preprocess;
  RegistrationParams registration;
  double jacobian_classify_eps = 1e-6;

  double test_fraction = 0.2;
  int adasyn_k = 5;
  double adasyn_beta = 1.0;
  int cv_folds = 3;

  CnnConfig cnn;
  TrainConfig train;      // epochs trimmed for the desk profile, see ctor
  ForestConfig forest;
  int feature_filters = 32;
  int cnn_downsample = 3; // mean-pool factor applied to each map before fusion

  phantom::PhantomConfig phantom;
  int n_per_class = 10;
  double missing_fraction = 0.2;

  PipelineConfig() { train.epochs = 30; }
};

PipelineConfig parse_pipeline_config(const std::string &json_text);
PipelineConfig load_pipeline_config(const std::string &path);
std::string pipeline_config_to_json(const PipelineConfig &cfg);

// Range checks shared by the parser and programmatic construction.
void validate_pipeline_config(const PipelineConfig &cfg);

// Stable hex digest of the canonical JSON form, recorded in run logs.
std::string config_digest(const PipelineConfig &cfg);

} // namespace jacfuse
