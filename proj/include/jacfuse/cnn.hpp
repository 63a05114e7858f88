// cnn.hpp - compact two-stage 3D convolutional classifier with a softmax head.
#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "jacfuse/volume.hpp"

namespace jacfuse {

struct CnnConfig {
  int conv1_channels = 8;
  int conv2_channels = 16;
  double dropout_rate = 0.2;
  double bn_momentum = 0.9;
  double bn_epsilon = 1e-5;
};

struct TrainConfig {
  double learning_rate = 0.001;
  int batch_size = 4;
  int epochs = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  Eigen::VectorXd class_weights; // empty = uniform; must sum to 1 otherwise
  std::uint64_t seed = 0;
};

struct EpochStats {
  double loss = 0.0;
  double accuracy = 0.0;
};

// conv(3x3x3) -> BN -> ReLU -> maxpool(2) -> dropout, twice, then a fully
// connected layer to 4 logits and softmax. Parameters live in one flat array
// so the optimizer, checkpoints, and the gradient check share a single view.
class Cnn3dModel {
public:
  Cnn3dModel() = default;
  Cnn3dModel(Dims3 input_dims, const CnnConfig &cfg, std::uint64_t seed);

  const Dims3 &input_dims() const { return input_dims_; }
  const CnnConfig &config() const { return cfg_; }

  Eigen::ArrayXd &params() { return theta_; }
  const Eigen::ArrayXd &params() const { return theta_; }
  Eigen::ArrayXd &running_stats() { return running_; }
  const Eigen::ArrayXd &running_stats() const { return running_; }

  // Eval mode: running BN statistics, no dropout. One row per sample,
  // rows sum to 1.
  Eigen::MatrixXd predict(const std::vector<Volume3D> &batch) const;

private:
  Dims3 input_dims_{};
  CnnConfig cfg_{};
  Eigen::ArrayXd theta_;   // W1,b1,g1,be1,W2,b2,g2,be2,Wfc,bfc
  Eigen::ArrayXd running_; // rm1,rv1,rm2,rv2
};

// Weighted cross-entropy, logs clamped at 1e-12. probs rows are samples.
double cnn_loss(const Eigen::MatrixXd &probs, const std::vector<int> &labels,
                const Eigen::VectorXd &class_weights);

// Adaptive-moment training with seeded shuffling and per-epoch curve
// (mean batch loss, eval-mode training accuracy).
std::vector<EpochStats> cnn_train(Cnn3dModel &model,
                                  const std::vector<Volume3D> &volumes,
                                  const std::vector<int> &labels,
                                  const TrainConfig &cfg);

// Central finite differences (h = 1e-5) against the analytic gradient on
// n_params randomly sampled parameters; dropout off, BN frozen on running
// statistics. Returns the max relative error.
double cnn_gradcheck(const Cnn3dModel &model,
                     const std::vector<Volume3D> &batch,
                     const std::vector<int> &labels,
                     const Eigen::VectorXd &class_weights, int n_params,
                     std::uint64_t seed);

// Same check through batch-statistics BN (the path used during training).
double cnn_gradcheck_train_mode(const Cnn3dModel &model,
                                const std::vector<Volume3D> &batch,
                                const std::vector<int> &labels,
                                const Eigen::VectorXd &class_weights,
                                int n_params, std::uint64_t seed);

} // namespace jacfuse
