#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "jacfuse/checkpoint.hpp"
#include "jacfuse/errors.hpp"
#include "jacfuse/rng.hpp"

using namespace jacfuse;

namespace {

std::string temp_path(const std::string &stem) {
  return (std::filesystem::temp_directory_path() / stem).string();
}

struct FileGuard {
  std::string path;
  ~FileGuard() { std::remove(path.c_str()); }
};

std::vector<Volume3D> random_batch(Dims3 dims, int n, uint64_t seed) {
  Rng rng = make_rng(seed, "checkpoint-test");
  std::vector<Volume3D> out;
  for (int s = 0; s < n; ++s) {
    Volume3D v(dims);
    for (auto &x : v.data)
      x = uniform_real(rng, -1.0, 1.0);
    out.push_back(std::move(v));
  }
  return out;
}

} // namespace

TEST_CASE("cnn round trip preserves predictions bit for bit") {
  const Dims3 dims{8, 8, 8};
  Cnn3dModel model(dims, CnnConfig{}, 5);
  const auto batch = random_batch(dims, 3, 6);
  const Eigen::MatrixXd before = model.predict(batch);

  Checkpoint ck;
  cnn_to_checkpoint(model, ck, "cnn");
  const FileGuard guard{temp_path("jacfuse-ck-cnn.bin")};
  ck.save(guard.path);

  const Checkpoint loaded = Checkpoint::load(guard.path);
  const Cnn3dModel back = cnn_from_checkpoint(loaded, "cnn");
  CHECK(back.input_dims() == dims);
  CHECK(back.config().conv1_channels == model.config().conv1_channels);
  const Eigen::MatrixXd after = back.predict(batch);
  CHECK((after - before).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("forest round trip preserves predictions bit for bit") {
  Rng rng = make_rng(7, "checkpoint-test-forest");
  Eigen::MatrixXd X(40, 5);
  std::vector<int> y(40);
  for (int r = 0; r < 40; ++r) {
    for (int c = 0; c < 5; ++c)
      X(r, c) = normal(rng);
    y[static_cast<std::size_t>(r)] = r % 4;
  }
  ForestConfig fc;
  fc.n_trees = 12;
  fc.seed = 8;
  const ForestModel model = rf_train(X, y, fc);
  const Eigen::MatrixXd before = rf_predict_proba(model, X);

  Checkpoint ck;
  forest_to_checkpoint(model, ck, "rf");
  const FileGuard guard{temp_path("jacfuse-ck-rf.bin")};
  ck.save(guard.path);

  const ForestModel back = forest_from_checkpoint(Checkpoint::load(guard.path), "rf");
  REQUIRE(back.trees.size() == model.trees.size());
  CHECK(back.n_features == model.n_features);
  const Eigen::MatrixXd after = rf_predict_proba(back, X);
  CHECK((after - before).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("both model families share one container") {
  const Dims3 dims{8, 8, 8};
  Cnn3dModel cnn(dims, CnnConfig{}, 1);
  Eigen::MatrixXd X(12, 3);
  std::vector<int> y(12);
  Rng rng = make_rng(2, "checkpoint-test-mixed");
  for (int r = 0; r < 12; ++r) {
    for (int c = 0; c < 3; ++c)
      X(r, c) = normal(rng);
    y[static_cast<std::size_t>(r)] = r % 4;
  }
  ForestConfig fc;
  fc.n_trees = 3;
  fc.seed = 3;
  const ForestModel rf = rf_train(X, y, fc);

  Checkpoint ck;
  cnn_to_checkpoint(cnn, ck, "cnn");
  forest_to_checkpoint(rf, ck, "rf_mri");
  forest_to_checkpoint(rf, ck, "rf_ct");
  const FileGuard guard{temp_path("jacfuse-ck-mixed.bin")};
  ck.save(guard.path);

  const Checkpoint loaded = Checkpoint::load(guard.path);
  CHECK_NOTHROW(cnn_from_checkpoint(loaded, "cnn"));
  CHECK_NOTHROW(forest_from_checkpoint(loaded, "rf_mri"));
  CHECK_NOTHROW(forest_from_checkpoint(loaded, "rf_ct"));
  CHECK_THROWS_AS(forest_from_checkpoint(loaded, "absent"), IoError);
}

TEST_CASE("corrupt files are refused with precise errors") {
  const FileGuard guard{temp_path("jacfuse-ck-corrupt.bin")};

  Checkpoint ck;
  ck.put_doubles("values", Eigen::ArrayXd::LinSpaced(9, 0.0, 8.0));
  ck.save(guard.path);

  // Flip the magic.
  {
    std::fstream f(guard.path,
                   std::ios::binary | std::ios::in | std::ios::out);
    f.put('X');
  }
  CHECK_THROWS_AS(Checkpoint::load(guard.path), BadMagic);

  ck.save(guard.path);
  // Bump the format version field right after the 4-byte magic.
  {
    std::fstream f(guard.path,
                   std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(4);
    f.put(static_cast<char>(99));
  }
  CHECK_THROWS_AS(Checkpoint::load(guard.path), HeaderInconsistent);

  ck.save(guard.path);
  const auto full = std::filesystem::file_size(guard.path);
  std::filesystem::resize_file(guard.path, full - 5);
  CHECK_THROWS_AS(Checkpoint::load(guard.path), TruncatedFile);

  std::filesystem::resize_file(guard.path, 2);
  CHECK_THROWS_AS(Checkpoint::load(guard.path), BadMagic);
}

TEST_CASE("typed block accessors round trip") {
  Checkpoint ck;
  ck.put_doubles("d", Eigen::ArrayXd::LinSpaced(5, -2.0, 2.0));
  ck.put_ints("i", {-4, 0, 9, 1ll << 40});
  ck.put_bytes("b", {1, 2, 3});
  const FileGuard guard{temp_path("jacfuse-ck-typed.bin")};
  ck.save(guard.path);
  const Checkpoint back = Checkpoint::load(guard.path);
  CHECK(back.has("d"));
  CHECK(!back.has("nope"));
  CHECK((back.doubles("d") - Eigen::ArrayXd::LinSpaced(5, -2.0, 2.0))
            .cwiseAbs()
            .maxCoeff() == 0.0);
  CHECK(back.ints("i") == std::vector<std::int64_t>{-4, 0, 9, 1ll << 40});
  CHECK(back.bytes("b") == std::vector<std::uint8_t>{1, 2, 3});
}
