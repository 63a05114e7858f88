// pipeline.hpp - stage orchestration over the on-disk layout.
//
// Every stage reads its inputs from files and writes its outputs back, so
// stages can run in separate invocations. A completed stage leaves a marker
// carrying the config digest; reruns skip when the marker is current unless
// forced. Layout under the output directory:
//   data/     volumes, manifest, stage outputs (_pp, _reg, _jd), template
//   models/   checkpoint, fold curves, training summary
//   reports/  metrics JSON, ablation table, per-subject predictions
//   run_log.json, .stage_<name>.done
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "jacfuse/config.hpp"
#include "jacfuse/fusion.hpp"

namespace jacfuse {

struct PipelineOptions {
  PipelineConfig cfg;
  std::string out_dir; // empty = cfg.out_dir
  int jobs = 1;
  bool force = false;
  int folds_override = 0; // 0 = cfg.cv_folds
};

struct StageRecord {
  std::string name;
  bool skipped = false;
  double wall_ms = 0.0;
  std::string input_digest;
  std::string output_digest;
};

struct RunLog {
  std::string config_digest;
  std::uint64_t seed = 0;
  std::vector<StageRecord> stages;
};

class PipelineRunner {
public:
  explicit PipelineRunner(PipelineOptions opts);

  void run_phantom();
  void run_preprocess();
  void run_register();
  void run_jacobian();
  void run_train();
  void run_evaluate();
  void run_all(); // all six stages plus the run log

  const RunLog &log() const { return log_; }
  void write_log() const;

  std::string out_dir() const { return out_; }
  std::string data_dir() const { return out_ + "/data"; }
  std::string models_dir() const { return out_ + "/models"; }
  std::string reports_dir() const { return out_ + "/reports"; }

private:
  struct Assembled; // per-subject model inputs after imputation

  bool stage_fresh(const std::string &name,
                   const std::vector<std::string> &inputs) const;
  void finish_stage(const std::string &name,
                    const std::vector<std::string> &inputs,
                    const std::vector<std::string> &outputs, double wall_ms,
                    bool skipped);
  std::vector<Assembled>
  assemble_inputs(const std::vector<std::string> &ids, bool label_aware) const;
  void say(const std::string &line) const;

  PipelineOptions opts_;
  std::string out_;
  RunLog log_;
};

// Digest helpers shared with the run log: FNV-1a over file bytes, combined
// over paths in the given order.
std::string file_digest(const std::string &path);
std::string files_digest(const std::vector<std::string> &paths);

} // namespace jacfuse
