#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "jacfuse/errors.hpp"
#include "jacfuse/forest.hpp"
#include "jacfuse/rng.hpp"

using namespace jacfuse;

namespace {

// Independent single-tree CART: exhaustive Gini search over every feature
// and every midpoint between distinct neighbours, strict improvement only.
struct OracleTree {
  struct Node {
    int feature = -1;
    double thr = 0.0;
    int left = -1, right = -1;
    Eigen::Vector4d dist = Eigen::Vector4d::Zero();
  };
  std::vector<Node> nodes;
  int tie_count = 0; // distinct optima seen at any node

  static double gini(const std::array<double, 4> &c, double n) {
    double g = 1.0;
    for (double v : c) g -= (v / n) * (v / n);
    return g;
  }

  int build(const Eigen::MatrixXd &X, const std::vector<int> &y,
            std::vector<int> idx) {
    const int me = static_cast<int>(nodes.size());
    nodes.emplace_back();
    std::array<double, 4> counts{};
    for (int s : idx) counts[static_cast<std::size_t>(y[s])] += 1.0;
    const double n = static_cast<double>(idx.size());
    int present = 0;
    for (double c : counts) present += c > 0.0;
    if (present <= 1) {
      for (int c = 0; c < 4; ++c) nodes[me].dist[c] = counts[c] / n;
      return me;
    }
    double best = 1e300;
    int best_f = -1, optima = 0;
    double best_thr = 0.0;
    for (int f = 0; f < X.cols(); ++f) {
      std::vector<int> order = idx;
      std::sort(order.begin(), order.end(),
                [&](int a, int b) { return X(a, f) < X(b, f); });
      std::array<double, 4> left{};
      double nl = 0.0;
      for (std::size_t s = 0; s + 1 < order.size(); ++s) {
        left[static_cast<std::size_t>(y[order[s]])] += 1.0;
        nl += 1.0;
        if (X(order[s], f) == X(order[s + 1], f)) continue;
        std::array<double, 4> right{};
        for (int c = 0; c < 4; ++c) right[c] = counts[c] - left[c];
        const double score =
            (nl * gini(left, nl) + (n - nl) * gini(right, n - nl)) / n;
        if (score == best) ++optima;
        if (score < best) {
          best = score;
          optima = 1;
          best_f = f;
          best_thr = 0.5 * (X(order[s], f) + X(order[s + 1], f));
        }
      }
    }
    tie_count += optima > 1;
    if (best_f < 0) {
      for (int c = 0; c < 4; ++c) nodes[me].dist[c] = counts[c] / n;
      return me;
    }
    std::vector<int> li, ri;
    for (int s : idx) (X(s, best_f) <= best_thr ? li : ri).push_back(s);
    const int l = build(X, y, li);
    const int r = build(X, y, ri);
    nodes[me].feature = best_f;
    nodes[me].thr = best_thr;
    nodes[me].left = l;
    nodes[me].right = r;
    return me;
  }

  Eigen::Vector4d predict(const Eigen::RowVectorXd &x) const {
    int cur = 0;
    while (nodes[static_cast<std::size_t>(cur)].feature >= 0) {
      const auto &nd = nodes[static_cast<std::size_t>(cur)];
      cur = x[nd.feature] <= nd.thr ? nd.left : nd.right;
    }
    return nodes[static_cast<std::size_t>(cur)].dist;
  }
};

// Two well-separated 2D clusters per class with some spread.
std::pair<Eigen::MatrixXd, std::vector<int>>
blobs(int per_class, double spread, uint64_t seed) {
  Rng rng = make_rng(seed, "forest-test-blobs");
  const double cx[4] = {0.0, 4.0, 0.0, 4.0};
  const double cy[4] = {0.0, 0.0, 4.0, 4.0};
  Eigen::MatrixXd X(4 * per_class, 2);
  std::vector<int> y;
  for (int c = 0; c < 4; ++c)
    for (int s = 0; s < per_class; ++s) {
      const auto r = static_cast<Eigen::Index>(y.size());
      X(r, 0) = cx[c] + spread * normal(rng);
      X(r, 1) = cy[c] + spread * normal(rng);
      y.push_back(c);
    }
  return {X, y};
}

} // namespace

TEST_CASE("separable classes are memorized perfectly") {
  auto [X, y] = blobs(10, 0.3, 1);
  ForestConfig cfg;
  cfg.n_trees = 30;
  cfg.seed = 2;
  const ForestModel model = rf_train(X, y, cfg);
  const Eigen::MatrixXd p = rf_predict_proba(model, X);
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    Eigen::Index best;
    p.row(r).maxCoeff(&best);
    CHECK(static_cast<int>(best) == y[static_cast<std::size_t>(r)]);
  }
}

TEST_CASE("single tree matches an exhaustive CART oracle") {
  // One feature: the optimal threshold chain is unique, so any correct CART
  // grows the same tree and agrees even between training points.
  Rng rng = make_rng(3, "forest-test-oracle");
  Eigen::MatrixXd X(20, 1);
  std::vector<int> y(20);
  for (int s = 0; s < 20; ++s) {
    X(s, 0) = uniform_real(rng, -2.0, 2.0);
    y[static_cast<std::size_t>(s)] =
        X(s, 0) < -0.9 ? 0 : (X(s, 0) < 0.2 ? 1 : (X(s, 0) < 1.1 ? 2 : 3));
  }
  // A few deliberate label flips force internal impurity.
  y[3] = (y[3] + 1) % 4;
  y[11] = (y[11] + 2) % 4;

  OracleTree oracle;
  std::vector<int> all(20);
  std::iota(all.begin(), all.end(), 0);
  oracle.build(X, y, all);
  REQUIRE(oracle.tie_count == 0); // the oracle tree is the unique optimum

  ForestConfig cfg;
  cfg.n_trees = 1;
  cfg.bootstrap = false;
  cfg.seed = 9;
  const ForestModel model = rf_train(X, y, cfg);

  Eigen::MatrixXd probe(201, 1);
  for (int i = 0; i <= 200; ++i) probe(i, 0) = -2.5 + 0.025 * i;
  const Eigen::MatrixXd got = rf_predict_proba(model, probe);
  for (Eigen::Index r = 0; r < probe.rows(); ++r) {
    const Eigen::Vector4d want = oracle.predict(probe.row(r));
    CHECK((got.row(r).transpose() - want).cwiseAbs().maxCoeff() == 0.0);
  }
  const Eigen::MatrixXd on_train = rf_predict_proba(model, X);
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const Eigen::Vector4d want = oracle.predict(X.row(r));
    CHECK((on_train.row(r).transpose() - want).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("training points in a fully grown tree get probability one") {
  // Distinct values in general position: every leaf ends up pure.
  Rng rng = make_rng(5, "forest-test-pure");
  Eigen::MatrixXd X(24, 3);
  std::vector<int> y(24);
  for (int s = 0; s < 24; ++s) {
    for (int f = 0; f < 3; ++f) X(s, f) = uniform_real(rng);
    y[static_cast<std::size_t>(s)] = s % 4;
  }
  ForestConfig cfg;
  cfg.n_trees = 1;
  cfg.bootstrap = false;
  cfg.seed = 31;
  const ForestModel model = rf_train(X, y, cfg);
  const Eigen::MatrixXd p = rf_predict_proba(model, X);
  for (Eigen::Index r = 0; r < p.rows(); ++r)
    CHECK(p(r, y[static_cast<std::size_t>(r)]) == 1.0);
}

TEST_CASE("forest output is the exact mean of its trees") {
  auto [X, y] = blobs(6, 0.8, 7);
  ForestConfig pair_cfg;
  pair_cfg.n_trees = 2;
  pair_cfg.seed = 40;
  const ForestModel both = rf_train(X, y, pair_cfg);

  // Tree t derives its stream from seed + t, so single-tree forests with
  // seeds 40 and 41 rebuild exactly the two members.
  ForestConfig lone = pair_cfg;
  lone.n_trees = 1;
  const ForestModel first = rf_train(X, y, lone);
  lone.seed = 41;
  const ForestModel second = rf_train(X, y, lone);

  const Eigen::MatrixXd pb = rf_predict_proba(both, X);
  const Eigen::MatrixXd p1 = rf_predict_proba(first, X);
  const Eigen::MatrixXd p2 = rf_predict_proba(second, X);
  CHECK((pb - 0.5 * (p1 + p2)).cwiseAbs().maxCoeff() == 0.0);

  ForestModel swapped = both;
  std::swap(swapped.trees[0], swapped.trees[1]);
  CHECK((rf_predict_proba(swapped, X) - pb).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("probability rows are normalized") {
  auto [X, y] = blobs(8, 1.5, 11);
  ForestConfig cfg;
  cfg.n_trees = 15;
  cfg.seed = 3;
  const ForestModel model = rf_train(X, y, cfg);
  auto [Xq, yq] = blobs(5, 2.0, 12);
  (void)yq;
  const Eigen::MatrixXd p = rf_predict_proba(model, Xq);
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    CHECK(std::abs(p.row(r).sum() - 1.0) < 1e-12);
    CHECK(p.row(r).minCoeff() >= 0.0);
  }
}

TEST_CASE("training is deterministic in the seed and independent of jobs") {
  auto [X, y] = blobs(6, 1.0, 13);
  ForestConfig cfg;
  cfg.n_trees = 8;
  cfg.seed = 21;
  const ForestModel a = rf_train(X, y, cfg);
  const ForestModel b = rf_train(X, y, cfg);
  const ForestModel c = rf_train(X, y, cfg, 4);
  REQUIRE(a.trees.size() == b.trees.size());
  auto same = [](const ForestModel &u, const ForestModel &v) {
    if (u.trees.size() != v.trees.size()) return false;
    for (std::size_t t = 0; t < u.trees.size(); ++t) {
      const auto &x = u.trees[t].nodes;
      const auto &z = v.trees[t].nodes;
      if (x.size() != z.size()) return false;
      for (std::size_t n = 0; n < x.size(); ++n)
        if (x[n].feature != z[n].feature || x[n].threshold != z[n].threshold ||
            x[n].left != z[n].left || x[n].right != z[n].right ||
            (x[n].dist - z[n].dist).cwiseAbs().maxCoeff() != 0.0)
          return false;
    }
    return true;
  };
  CHECK(same(a, b));
  CHECK(same(a, c));

  ForestConfig other = cfg;
  other.seed = 22;
  CHECK(!same(a, rf_train(X, y, other)));
}

TEST_CASE("more trees do not hurt accuracy on noisy data, on average") {
  double acc1 = 0.0, acc50 = 0.0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    auto [X, y] = blobs(12, 1.6, seed);
    auto [Xt, yt] = blobs(12, 1.6, seed + 100);
    ForestConfig cfg;
    cfg.seed = seed;
    auto accuracy = [&](int n_trees) {
      ForestConfig c2 = cfg;
      c2.n_trees = n_trees;
      const ForestModel m = rf_train(X, y, c2);
      const Eigen::MatrixXd p = rf_predict_proba(m, Xt);
      int hit = 0;
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        Eigen::Index best;
        p.row(r).maxCoeff(&best);
        hit += static_cast<int>(best) == yt[static_cast<std::size_t>(r)];
      }
      return static_cast<double>(hit) / static_cast<double>(p.rows());
    };
    acc1 += accuracy(1);
    acc50 += accuracy(50);
  }
  CHECK(acc50 >= acc1);
}

TEST_CASE("degenerate inputs are rejected") {
  Eigen::MatrixXd X(4, 2);
  X << 0, 0, 1, 1, 2, 2, 3, 3;
  CHECK_THROWS_AS(rf_train(X, {0, 0, 0, 0}, ForestConfig{}), SingleClass);
  CHECK_THROWS_AS(rf_train(X, {0, 1}, ForestConfig{}), LengthMismatch);
  CHECK_THROWS_AS(rf_train(X, {0, 1, 2, 5}, ForestConfig{}), InvalidConfig);
  ForestConfig bad;
  bad.n_trees = 0;
  CHECK_THROWS_AS(rf_train(X, {0, 1, 2, 3}, bad), InvalidConfig);

  const ForestModel m = rf_train(X, {0, 1, 0, 1}, ForestConfig{});
  Eigen::MatrixXd wrong(1, 3);
  wrong << 0, 0, 0;
  CHECK_THROWS_AS(rf_predict_proba(m, wrong), DimensionMismatch);
}
