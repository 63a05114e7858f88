#include "jacfuse/evaluate.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "jacfuse/errors.hpp"

namespace jacfuse {

ConfusionMatrix confusion_matrix(const std::vector<int> &actual,
                                 const std::vector<int> &predicted) {
  if (actual.size() != predicted.size())
    throw LengthMismatch("actual and predicted label counts differ");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    if (actual[i] < 0 || actual[i] > 3 || predicted[i] < 0 || predicted[i] > 3)
      throw InvalidConfig("labels must lie in 0..3");
    cm.counts(actual[i], predicted[i]) += 1;
  }
  return cm;
}

std::array<ClassRates, 4> per_class_rates(const ConfusionMatrix &cm) {
  std::array<ClassRates, 4> rates;
  const int total = cm.total();
  for (int i = 0; i < 4; ++i) {
    const int tp = cm.counts(i, i);
    const int fn = cm.counts.row(i).sum() - tp;
    const int fp = cm.counts.col(i).sum() - tp;
    const int tn = total - tp - fn - fp;
    if (tp + fn > 0)
      rates[static_cast<std::size_t>(i)].sensitivity =
          static_cast<double>(tp) / (tp + fn);
    if (tn + fp > 0)
      rates[static_cast<std::size_t>(i)].specificity =
          static_cast<double>(tn) / (tn + fp);
  }
  return rates;
}

MacroMetrics macro_metrics(const ConfusionMatrix &cm) {
  const auto rates = per_class_rates(cm);
  double sens = 0.0, spec = 0.0;
  int n_sens = 0, n_spec = 0;
  for (const auto &r : rates) {
    if (r.sensitivity) {
      sens += *r.sensitivity;
      ++n_sens;
    }
    if (r.specificity) {
      spec += *r.specificity;
      ++n_spec;
    }
  }
  if (n_sens == 0 && n_spec == 0)
    throw AllUndefined("every class rate has a zero denominator");
  MacroMetrics m;
  m.sensitivity = n_sens ? sens / n_sens : 0.0;
  m.specificity = n_spec ? spec / n_spec : 0.0;
  m.accuracy = cm.total() > 0
                   ? static_cast<double>(cm.counts.trace()) / cm.total()
                   : 0.0;
  return m;
}

MetricsReport build_report(
    const std::vector<int> &actual,
    const std::vector<std::pair<std::string, std::vector<int>>> &predictions) {
  MetricsReport report;
  for (const auto &[name, pred] : predictions) {
    AblationRow row;
    row.model = name;
    row.cm = confusion_matrix(actual, pred);
    row.rates = per_class_rates(row.cm);
    row.macro = macro_metrics(row.cm);
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string report_to_json(const MetricsReport &report) {
  nlohmann::json doc;
  doc["rows"] = nlohmann::json::array();
  for (const auto &row : report.rows) {
    nlohmann::json r;
    r["model"] = row.model;
    r["accuracy"] = row.macro.accuracy;
    r["macro_sensitivity"] = row.macro.sensitivity;
    r["macro_specificity"] = row.macro.specificity;
    r["confusion"] = nlohmann::json::array();
    for (int i = 0; i < 4; ++i) {
      nlohmann::json line = nlohmann::json::array();
      for (int j = 0; j < 4; ++j)
        line.push_back(row.cm.counts(i, j));
      r["confusion"].push_back(line);
    }
    r["per_class"] = nlohmann::json::array();
    for (const auto &rate : row.rates) {
      nlohmann::json c;
      if (rate.sensitivity)
        c["sensitivity"] = *rate.sensitivity;
      else
        c["sensitivity"] = nullptr;
      if (rate.specificity)
        c["specificity"] = *rate.specificity;
      else
        c["specificity"] = nullptr;
      r["per_class"].push_back(c);
    }
    doc["rows"].push_back(r);
  }
  return doc.dump(2);
}

std::string report_to_table(const MetricsReport &report) {
  std::ostringstream out;
  char line[128];
  std::snprintf(line, sizeof(line), "%-8s %12s %12s %12s\n", "Model",
                "Sensitivity", "Specificity", "Accuracy");
  out << line;
  out << std::string(47, '-') << '\n';
  for (const auto &row : report.rows) {
    std::snprintf(line, sizeof(line), "%-8s %12.4f %12.4f %12.4f\n",
                  row.model.c_str(), row.macro.sensitivity,
                  row.macro.specificity, row.macro.accuracy);
    out << line;
  }
  return out.str();
}

void write_curve_csv(const std::string &path,
                     const std::vector<CurvePoint> &curve) {
  std::ofstream out(path);
  if (!out)
    throw IoError("cannot open " + path);
  out << "epoch,loss,accuracy\n";
  char line[96];
  for (const auto &p : curve) {
    std::snprintf(line, sizeof(line), "%d,%.9g,%.9g\n", p.epoch, p.loss,
                  p.accuracy);
    out << line;
  }
}

} // namespace jacfuse
