// forest.hpp - random forest of CART trees with Gini splits.
#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace jacfuse {

struct ForestConfig {
  int n_trees = 50;
  int mtry = 0; // 0 = floor(sqrt(n_features))
  bool bootstrap = true;
  std::uint64_t seed = 0;
};

struct TreeNode {
  int feature = -1; // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  Eigen::Vector4d dist = Eigen::Vector4d::Zero(); // leaf class distribution
};

struct DecisionTree {
  std::vector<TreeNode> nodes; // node 0 is the root
};

struct ForestModel {
  ForestConfig cfg;
  int n_features = 0;
  std::vector<DecisionTree> trees;
};

// Fully grown trees (no depth cap, min leaf 1), each on its own bootstrap
// when enabled. Throws SingleClass if fewer than two classes are present.
// Trees carry per-index seeds, so the result is independent of jobs.
ForestModel rf_train(const Eigen::MatrixXd &X, const std::vector<int> &y,
                     const ForestConfig &cfg, int jobs = 1);

// Mean of per-tree leaf distributions; one row per sample, rows sum to 1.
Eigen::MatrixXd rf_predict_proba(const ForestModel &model,
                                 const Eigen::MatrixXd &X);

} // namespace jacfuse
