#include "doctest.h"

#include <string>

#include <nlohmann/json.hpp>

#include "jacfuse/config.hpp"
#include "jacfuse/errors.hpp"

using namespace jacfuse;

TEST_CASE("empty document yields the default profile") {
  const PipelineConfig cfg = parse_pipeline_config("{}");
  const PipelineConfig def;
  CHECK(cfg.seed == def.seed);
  CHECK(cfg.cv_folds == def.cv_folds);
  CHECK(cfg.train.epochs == 30);
  CHECK(cfg.forest.n_trees == def.forest.n_trees);
  CHECK(cfg.cnn_downsample == def.cnn_downsample);
  CHECK(cfg.n_per_class == def.n_per_class);
  CHECK(config_digest(cfg) == config_digest(def));
}

TEST_CASE("sections override individual fields") {
  const char *doc = R"({
    "seed": 99,
    "dataset": {"test_fraction": 0.25, "cv_folds": 4},
    "models": {"n_trees": 17, "epochs": 5, "cnn_downsample": 4},
    "phantom": {"n_per_class": 6, "missing_fraction": 0.1}
  })";
  const PipelineConfig cfg = parse_pipeline_config(doc);
  CHECK(cfg.seed == 99);
  CHECK(cfg.test_fraction == 0.25);
  CHECK(cfg.cv_folds == 4);
  CHECK(cfg.forest.n_trees == 17);
  CHECK(cfg.train.epochs == 5);
  CHECK(cfg.cnn_downsample == 4);
  CHECK(cfg.n_per_class == 6);
  CHECK(cfg.missing_fraction == 0.1);
  // Untouched fields keep their defaults.
  CHECK(cfg.adasyn_k == PipelineConfig{}.adasyn_k);
}

TEST_CASE("unknown keys are rejected at any level") {
  CHECK_THROWS_AS(parse_pipeline_config(R"({"sede": 1})"), InvalidConfig);
  CHECK_THROWS_AS(parse_pipeline_config(R"({"dataset": {"folds": 3}})"),
                  InvalidConfig);
  CHECK_THROWS_AS(parse_pipeline_config(R"({"models": {"ntrees": 9}})"),
                  InvalidConfig);
  CHECK_THROWS_AS(
      parse_pipeline_config(R"({"dataset": {"n_per_class": 4}})"),
      InvalidConfig); // phantom sizing lives in the phantom section
  CHECK_THROWS_AS(parse_pipeline_config("[1,2]"), InvalidConfig);
  CHECK_THROWS_AS(parse_pipeline_config("{"), InvalidConfig);
}

TEST_CASE("future config versions are refused") {
  CHECK_THROWS_AS(parse_pipeline_config(R"({"config_version": 2})"),
                  InvalidConfig);
  CHECK_NOTHROW(parse_pipeline_config(R"({"config_version": 1})"));
}

TEST_CASE("out of range values are refused") {
  CHECK_THROWS_AS(parse_pipeline_config(R"({"dataset": {"test_fraction": 0.0}})"),
                  InvalidConfig);
  CHECK_THROWS_AS(parse_pipeline_config(R"({"dataset": {"test_fraction": 1.0}})"),
                  InvalidConfig);
  CHECK_THROWS_AS(parse_pipeline_config(R"({"dataset": {"cv_folds": 1}})"),
                  InvalidConfig);
  CHECK_THROWS_AS(parse_pipeline_config(R"({"models": {"n_trees": 0}})"),
                  InvalidConfig);
  CHECK_THROWS_AS(parse_pipeline_config(R"({"models": {"dropout_rate": 1.0}})"),
                  InvalidConfig);
  CHECK_THROWS_AS(
      parse_pipeline_config(R"({"phantom": {"missing_fraction": 1.0}})"),
      InvalidConfig);
  CHECK_THROWS_AS(parse_pipeline_config(R"({"phantom": {"n_per_class": 1}})"),
                  InvalidConfig);

  PipelineConfig bad;
  bad.cnn_downsample = 0;
  CHECK_THROWS_AS(validate_pipeline_config(bad), InvalidConfig);
}

TEST_CASE("serialized form parses back to an identical digest") {
  PipelineConfig cfg;
  cfg.seed = 123;
  cfg.cv_folds = 5;
  cfg.forest.n_trees = 21;
  cfg.train.learning_rate = 0.01;
  cfg.missing_fraction = 0.35;
  const std::string text = pipeline_config_to_json(cfg);
  const PipelineConfig back = parse_pipeline_config(text);
  CHECK(back.seed == 123);
  CHECK(back.cv_folds == 5);
  CHECK(back.forest.n_trees == 21);
  CHECK(back.train.learning_rate == 0.01);
  CHECK(back.missing_fraction == 0.35);
  CHECK(config_digest(back) == config_digest(cfg));

  // The canonical form is strict JSON with every section present.
  const auto doc = nlohmann::json::parse(text);
  CHECK(doc.contains("dataset"));
  CHECK(doc.contains("models"));
  CHECK(doc.contains("phantom"));
}

TEST_CASE("digest tracks content not formatting") {
  const PipelineConfig a = parse_pipeline_config("{}");
  const PipelineConfig b =
      parse_pipeline_config("  {\n  }  ");
  CHECK(config_digest(a) == config_digest(b));
  const PipelineConfig c = parse_pipeline_config(R"({"seed": 8})");
  CHECK(config_digest(a) != config_digest(c));
}
