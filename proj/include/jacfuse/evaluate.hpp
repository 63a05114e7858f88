// evaluate.hpp - confusion matrices, one-vs-rest rates, ablation reporting.
#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace jacfuse {

struct ConfusionMatrix {
  Eigen::Matrix4i counts = Eigen::Matrix4i::Zero(); // rows actual, cols predicted
  int total() const { return counts.sum(); }
};

ConfusionMatrix confusion_matrix(const std::vector<int> &actual,
                                 const std::vector<int> &predicted);

// Per-class sensitivity/specificity via one-vs-rest reduction. A rate with a
// zero denominator is left unset and excluded from macro averages.
struct ClassRates {
  std::optional<double> sensitivity;
  std::optional<double> specificity;
};

std::array<ClassRates, 4> per_class_rates(const ConfusionMatrix &cm);

struct MacroMetrics {
  double sensitivity = 0.0; // unweighted mean over defined classes
  double specificity = 0.0;
  double accuracy = 0.0;
};

MacroMetrics macro_metrics(const ConfusionMatrix &cm);

struct AblationRow {
  std::string model; // CNN, RF-CT, RF-MRI, ELF
  ConfusionMatrix cm;
  std::array<ClassRates, 4> rates;
  MacroMetrics macro;
};

struct MetricsReport {
  std::vector<AblationRow> rows;
};

// One row per named prediction vector, evaluated against the shared truth.
MetricsReport build_report(
    const std::vector<int> &actual,
    const std::vector<std::pair<std::string, std::vector<int>>> &predictions);

std::string report_to_json(const MetricsReport &report);
std::string report_to_table(const MetricsReport &report);

struct CurvePoint {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

void write_curve_csv(const std::string &path,
                     const std::vector<CurvePoint> &curve);

} // namespace jacfuse
