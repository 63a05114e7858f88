#include "doctest.h"

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "jacfuse/errors.hpp"
#include "jacfuse/evaluate.hpp"
#include "jacfuse/rng.hpp"

using namespace jacfuse;

namespace {

// One-vs-rest rates computed the long way, one binary reduction per class.
struct BinaryRates {
  bool sens_def = false, spec_def = false;
  double sens = 0.0, spec = 0.0;
};

BinaryRates binary_oracle(const std::vector<int> &actual,
                          const std::vector<int> &predicted, int cls) {
  int tp = 0, fn = 0, tn = 0, fp = 0;
  for (std::size_t i = 0; i < actual.size(); ++i) {
    const bool a = actual[i] == cls, p = predicted[i] == cls;
    tp += a && p;
    fn += a && !p;
    tn += !a && !p;
    fp += !a && p;
  }
  BinaryRates r;
  if (tp + fn > 0) {
    r.sens_def = true;
    r.sens = static_cast<double>(tp) / (tp + fn);
  }
  if (tn + fp > 0) {
    r.spec_def = true;
    r.spec = static_cast<double>(tn) / (tn + fp);
  }
  return r;
}

} // namespace

TEST_CASE("perfect predictions give unit rates") {
  const std::vector<int> actual = {0, 1, 2, 3, 0, 1, 2, 3};
  const ConfusionMatrix cm = confusion_matrix(actual, actual);
  CHECK(cm.counts.trace() == 8);
  CHECK(cm.total() == 8);
  const auto rates = per_class_rates(cm);
  for (const auto &r : rates) {
    REQUIRE(r.sensitivity.has_value());
    REQUIRE(r.specificity.has_value());
    CHECK(*r.sensitivity == 1.0);
    CHECK(*r.specificity == 1.0);
  }
  const MacroMetrics m = macro_metrics(cm);
  CHECK(m.sensitivity == 1.0);
  CHECK(m.specificity == 1.0);
  CHECK(m.accuracy == 1.0);
}

TEST_CASE("confusion matrix tallies actual rows against predicted columns") {
  const std::vector<int> actual = {0, 0, 1, 1, 2, 2, 3, 3};
  const std::vector<int> predicted = {0, 1, 1, 1, 2, 3, 3, 0};
  const ConfusionMatrix cm = confusion_matrix(actual, predicted);
  CHECK(cm.counts(0, 0) == 1);
  CHECK(cm.counts(0, 1) == 1);
  CHECK(cm.counts(1, 1) == 2);
  CHECK(cm.counts(2, 2) == 1);
  CHECK(cm.counts(2, 3) == 1);
  CHECK(cm.counts(3, 3) == 1);
  CHECK(cm.counts(3, 0) == 1);
  CHECK(cm.counts.sum() == 8);
  const MacroMetrics m = macro_metrics(cm);
  CHECK(std::abs(m.accuracy - 5.0 / 8.0) < 1e-15);
}

TEST_CASE("two populated classes leave the others undefined") {
  // Actual classes 0 and 1 only: counts [[3,1],[2,4]] in the top-left block.
  std::vector<int> actual, predicted;
  auto add = [&](int a, int p, int n) {
    for (int i = 0; i < n; ++i) {
      actual.push_back(a);
      predicted.push_back(p);
    }
  };
  add(0, 0, 3);
  add(0, 1, 1);
  add(1, 0, 2);
  add(1, 1, 4);
  const ConfusionMatrix cm = confusion_matrix(actual, predicted);
  const auto rates = per_class_rates(cm);
  REQUIRE(rates[0].sensitivity.has_value());
  REQUIRE(rates[1].sensitivity.has_value());
  CHECK(std::abs(*rates[0].sensitivity - 0.75) < 1e-15);
  CHECK(std::abs(*rates[1].sensitivity - 2.0 / 3.0) < 1e-15);
  CHECK(std::abs(*rates[0].specificity - 2.0 / 3.0) < 1e-15);
  CHECK(std::abs(*rates[1].specificity - 0.75) < 1e-15);
  // No actual 2s or 3s, so their sensitivities have empty denominators.
  CHECK(!rates[2].sensitivity.has_value());
  CHECK(!rates[3].sensitivity.has_value());
  CHECK(rates[2].specificity.has_value());
  CHECK(rates[3].specificity.has_value());
  CHECK(*rates[2].specificity == 1.0);
  CHECK(*rates[3].specificity == 1.0);

  // Macro averages run over defined classes only.
  const MacroMetrics m = macro_metrics(cm);
  CHECK(std::abs(m.sensitivity - 0.5 * (0.75 + 2.0 / 3.0)) < 1e-15);
  CHECK(std::abs(m.specificity - (2.0 / 3.0 + 0.75 + 1.0 + 1.0) / 4.0) <
        1e-15);
  CHECK(std::abs(m.accuracy - 0.7) < 1e-15);
}

TEST_CASE("rates agree with a one-vs-rest oracle on random matrices") {
  Rng rng = make_rng(17, "evaluate-test");
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 3 + static_cast<int>(uniform_index(rng, 40));
    std::vector<int> actual(static_cast<std::size_t>(n));
    std::vector<int> predicted(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      actual[static_cast<std::size_t>(i)] =
          static_cast<int>(uniform_index(rng, 4));
      predicted[static_cast<std::size_t>(i)] =
          static_cast<int>(uniform_index(rng, 4));
    }
    const ConfusionMatrix cm = confusion_matrix(actual, predicted);
    const auto rates = per_class_rates(cm);
    int correct = 0;
    for (int i = 0; i < n; ++i)
      correct += actual[static_cast<std::size_t>(i)] ==
                 predicted[static_cast<std::size_t>(i)];
    double sens_sum = 0.0, spec_sum = 0.0;
    int sens_n = 0, spec_n = 0;
    for (int c = 0; c < 4; ++c) {
      const auto sc = static_cast<std::size_t>(c);
      const BinaryRates want = binary_oracle(actual, predicted, c);
      CHECK(rates[sc].sensitivity.has_value() == want.sens_def);
      CHECK(rates[sc].specificity.has_value() == want.spec_def);
      if (want.sens_def) {
        CHECK(*rates[sc].sensitivity == want.sens);
        sens_sum += want.sens;
        ++sens_n;
      }
      if (want.spec_def) {
        CHECK(*rates[sc].specificity == want.spec);
        spec_sum += want.spec;
        ++spec_n;
      }
    }
    const MacroMetrics m = macro_metrics(cm);
    if (sens_n > 0)
      CHECK(std::abs(m.sensitivity - sens_sum / sens_n) < 1e-12);
    if (spec_n > 0)
      CHECK(std::abs(m.specificity - spec_sum / spec_n) < 1e-12);
    CHECK(std::abs(m.accuracy - static_cast<double>(correct) / n) < 1e-15);
  }
}

TEST_CASE("degenerate evaluations are rejected") {
  CHECK_THROWS_AS(confusion_matrix({0, 1}, {0}), LengthMismatch);
  CHECK_THROWS_AS(confusion_matrix({0, 4}, {0, 1}), InvalidConfig);
  CHECK_THROWS_AS(confusion_matrix({0, -1}, {0, 1}), InvalidConfig);
  CHECK_THROWS_AS(macro_metrics(ConfusionMatrix{}), AllUndefined);
}

TEST_CASE("report carries one row per model in the given order") {
  const std::vector<int> actual = {0, 1, 2, 3, 0, 1, 2, 3};
  const std::vector<int> good = actual;
  std::vector<int> off = actual;
  off[0] = 1;
  const MetricsReport rep = build_report(
      actual,
      {{"CNN", off}, {"RF-CT", good}, {"RF-MRI", off}, {"ELF", good}});
  REQUIRE(rep.rows.size() == 4);
  CHECK(rep.rows[0].model == "CNN");
  CHECK(rep.rows[1].model == "RF-CT");
  CHECK(rep.rows[2].model == "RF-MRI");
  CHECK(rep.rows[3].model == "ELF");
  CHECK(rep.rows[3].macro.accuracy == 1.0);
  CHECK(rep.rows[0].macro.accuracy < 1.0);

  const auto doc = nlohmann::json::parse(report_to_json(rep));
  REQUIRE(doc.contains("rows"));
  REQUIRE(doc["rows"].is_array());
  REQUIRE(doc["rows"].size() == 4);
  CHECK(doc["rows"][0]["model"] == "CNN");
  CHECK(doc["rows"][3]["model"] == "ELF");
  CHECK(doc["rows"][3]["accuracy"].get<double>() == 1.0);
  CHECK(doc["rows"][0]["confusion"].size() == 4);
  CHECK(doc["rows"][0]["per_class"][2]["sensitivity"].is_number());

  const std::string table = report_to_table(rep);
  CHECK(table.find("CNN") != std::string::npos);
  CHECK(table.find("ELF") != std::string::npos);
  CHECK(table.find("RF-MRI") != std::string::npos);
}
