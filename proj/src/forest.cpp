#include "jacfuse/forest.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

#include "jacfuse/errors.hpp"
#include "jacfuse/parallel.hpp"
#include "jacfuse/rng.hpp"

namespace jacfuse {

namespace {

double gini(const std::array<double, 4> &counts, double n) {
  double g = 1.0;
  for (double c : counts)
    g -= (c / n) * (c / n);
  return g;
}

struct TreeBuilder {
  const Eigen::MatrixXd &X;
  const std::vector<int> &y;
  int mtry;
  Rng &rng;
  DecisionTree tree;

  int build(std::vector<int> samples) {
    const int node_id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();

    std::array<double, 4> counts{};
    for (int s : samples)
      counts[static_cast<std::size_t>(y[static_cast<std::size_t>(s)])] += 1.0;
    const double n = static_cast<double>(samples.size());

    auto make_leaf = [&] {
      TreeNode &node = tree.nodes[static_cast<std::size_t>(node_id)];
      for (int c = 0; c < 4; ++c)
        node.dist[c] = counts[static_cast<std::size_t>(c)] / n;
      return node_id;
    };

    int n_present = 0;
    for (double c : counts)
      n_present += c > 0.0;
    if (n_present <= 1)
      return make_leaf();

    // Feature subsample first; falls back to the remaining features when
    // every sampled one is constant on this node.
    std::vector<int> feats(static_cast<std::size_t>(X.cols()));
    std::iota(feats.begin(), feats.end(), 0);
    shuffle_inplace(rng, feats);

    int best_f = -1;
    double best_thr = 0.0, best_score = std::numeric_limits<double>::max();
    std::vector<std::pair<double, int>> vals(samples.size());
    for (std::size_t fi = 0; fi < feats.size(); ++fi) {
      if (static_cast<int>(fi) >= mtry && best_f >= 0)
        break;
      const int f = feats[fi];
      for (std::size_t s = 0; s < samples.size(); ++s)
        vals[s] = {X(samples[s], f), y[static_cast<std::size_t>(samples[s])]};
      std::sort(vals.begin(), vals.end());
      if (vals.front().first == vals.back().first)
        continue;
      std::array<double, 4> left{};
      std::array<double, 4> right = counts;
      double nl = 0.0;
      for (std::size_t s = 0; s + 1 < vals.size(); ++s) {
        left[static_cast<std::size_t>(vals[s].second)] += 1.0;
        right[static_cast<std::size_t>(vals[s].second)] -= 1.0;
        nl += 1.0;
        if (vals[s].first == vals[s + 1].first)
          continue;
        const double score =
            (nl * gini(left, nl) + (n - nl) * gini(right, n - nl)) / n;
        if (score < best_score) {
          best_score = score;
          best_f = f;
          best_thr = 0.5 * (vals[s].first + vals[s + 1].first);
        }
      }
    }
    if (best_f < 0)
      return make_leaf(); // every feature constant, duplicates with mixed labels

    std::vector<int> ls, rs;
    for (int s : samples)
      (X(s, best_f) <= best_thr ? ls : rs).push_back(s);
    samples.clear();
    samples.shrink_to_fit();

    const int li = build(std::move(ls));
    const int ri = build(std::move(rs));
    TreeNode &node = tree.nodes[static_cast<std::size_t>(node_id)];
    node.feature = best_f;
    node.threshold = best_thr;
    node.left = li;
    node.right = ri;
    return node_id;
  }
};

} // namespace

ForestModel rf_train(const Eigen::MatrixXd &X, const std::vector<int> &y,
                     const ForestConfig &cfg, int jobs) {
  if (static_cast<std::size_t>(X.rows()) != y.size() || y.empty())
    throw LengthMismatch("feature rows differ from label count");
  for (int label : y)
    if (label < 0 || label > 3)
      throw InvalidConfig("labels must lie in 0..3");
  std::array<int, 4> counts{};
  for (int label : y)
    ++counts[static_cast<std::size_t>(label)];
  int n_present = 0;
  for (int c : counts)
    n_present += c > 0;
  if (n_present < 2)
    throw SingleClass("training data holds a single class");
  if (cfg.n_trees < 1)
    throw InvalidConfig("forest needs at least one tree");

  ForestModel model;
  model.cfg = cfg;
  model.n_features = static_cast<int>(X.cols());
  const int mtry =
      cfg.mtry > 0
          ? std::min(cfg.mtry, model.n_features)
          : std::max(1, static_cast<int>(std::floor(
                            std::sqrt(static_cast<double>(X.cols())))));

  const int n = static_cast<int>(X.rows());
  model.trees.resize(static_cast<std::size_t>(cfg.n_trees));
  parallel_for(static_cast<std::size_t>(cfg.n_trees), jobs, [&](std::size_t t) {
    Rng rng = make_rng(cfg.seed + t, hash_string("forest-tree"));
    std::vector<int> samples(static_cast<std::size_t>(n));
    if (cfg.bootstrap) {
      for (auto &s : samples)
        s = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(n)));
    } else {
      std::iota(samples.begin(), samples.end(), 0);
    }
    TreeBuilder builder{X, y, mtry, rng, {}};
    builder.build(std::move(samples));
    model.trees[t] = std::move(builder.tree);
  });
  return model;
}

Eigen::MatrixXd rf_predict_proba(const ForestModel &model,
                                 const Eigen::MatrixXd &X) {
  if (static_cast<int>(X.cols()) != model.n_features)
    throw DimensionMismatch("feature length differs from training");
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(X.rows(), 4);
  for (const auto &tree : model.trees)
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      int cur = 0;
      while (tree.nodes[static_cast<std::size_t>(cur)].feature >= 0) {
        const auto &nd = tree.nodes[static_cast<std::size_t>(cur)];
        cur = X(r, nd.feature) <= nd.threshold ? nd.left : nd.right;
      }
      out.row(r) += tree.nodes[static_cast<std::size_t>(cur)].dist;
    }
  out /= static_cast<double>(model.trees.size());
  return out;
}

} // namespace jacfuse
