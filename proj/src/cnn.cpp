#include "jacfuse/cnn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "jacfuse/errors.hpp"
#include "jacfuse/rng.hpp"

namespace jacfuse {

namespace {

enum class Mode { Train, Frozen }; // Frozen: running stats, no dropout

struct Layout {
  Dims3 d0, d1, d2;
  std::int64_t n0 = 0, n1 = 0, n2 = 0;
  int c1 = 0, c2 = 0;
  std::int64_t flat = 0;
  // theta offsets
  std::int64_t oW1, ob1, og1, obe1, oW2, ob2, og2, obe2, oWfc, obfc, total;
  // running-stat offsets
  std::int64_t orm1, orv1, orm2, orv2, rtotal;
};

Layout make_layout(const Dims3 &d, const CnnConfig &cfg) {
  Layout L;
  L.d0 = d;
  L.d1 = {d.nx / 2, d.ny / 2, d.nz / 2};
  L.d2 = {d.nx / 4, d.ny / 4, d.nz / 4};
  L.n0 = L.d0.count();
  L.n1 = L.d1.count();
  L.n2 = L.d2.count();
  L.c1 = cfg.conv1_channels;
  L.c2 = cfg.conv2_channels;
  L.flat = L.c2 * L.n2;
  L.oW1 = 0;
  L.ob1 = L.oW1 + L.c1 * 27;
  L.og1 = L.ob1 + L.c1;
  L.obe1 = L.og1 + L.c1;
  L.oW2 = L.obe1 + L.c1;
  L.ob2 = L.oW2 + static_cast<std::int64_t>(L.c2) * 27 * L.c1;
  L.og2 = L.ob2 + L.c2;
  L.obe2 = L.og2 + L.c2;
  L.oWfc = L.obe2 + L.c2;
  L.obfc = L.oWfc + 4 * L.flat;
  L.total = L.obfc + 4;
  L.orm1 = 0;
  L.orv1 = L.c1;
  L.orm2 = 2 * L.c1;
  L.orv2 = 2 * L.c1 + L.c2;
  L.rtotal = 2 * L.c1 + 2 * L.c2;
  return L;
}

using MatMap = Eigen::Map<Eigen::MatrixXd>;
using ConstMatMap = Eigen::Map<const Eigen::MatrixXd>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

// Gathers zero-padded 3x3x3 patches of sample block `src` (c_in rows,
// columns [b*n, (b+1)*n)) into P (27*c_in x n). Row order: channel-major,
// then z, y, x within the patch.
void im2col(const Eigen::MatrixXd &src, std::int64_t col0, const Dims3 &g,
            int c_in, Eigen::MatrixXd &P) {
  const std::int64_t n = g.count();
  P.resize(27 * c_in, n);
  for (int k = 0; k < g.nz; ++k)
    for (int j = 0; j < g.ny; ++j)
      for (int i = 0; i < g.nx; ++i) {
        const std::int64_t q = static_cast<std::int64_t>(g.index(i, j, k));
        for (int dz = 0; dz < 3; ++dz) {
          const int z = k + dz - 1;
          for (int dy = 0; dy < 3; ++dy) {
            const int y = j + dy - 1;
            for (int dx = 0; dx < 3; ++dx) {
              const int x = i + dx - 1;
              const int off = dz * 9 + dy * 3 + dx;
              if (x < 0 || x >= g.nx || y < 0 || y >= g.ny || z < 0 ||
                  z >= g.nz) {
                for (int c = 0; c < c_in; ++c)
                  P(c * 27 + off, q) = 0.0;
              } else {
                const std::int64_t s =
                    col0 + static_cast<std::int64_t>(g.index(x, y, z));
                for (int c = 0; c < c_in; ++c)
                  P(c * 27 + off, q) = src(c, s);
              }
            }
          }
        }
      }
}

// Transpose of im2col: scatter-adds patch gradients back to source columns.
void col2im_add(const Eigen::MatrixXd &dP, std::int64_t col0, const Dims3 &g,
                int c_in, Eigen::MatrixXd &dst) {
  for (int k = 0; k < g.nz; ++k)
    for (int j = 0; j < g.ny; ++j)
      for (int i = 0; i < g.nx; ++i) {
        const std::int64_t q = static_cast<std::int64_t>(g.index(i, j, k));
        for (int dz = 0; dz < 3; ++dz) {
          const int z = k + dz - 1;
          if (z < 0 || z >= g.nz)
            continue;
          for (int dy = 0; dy < 3; ++dy) {
            const int y = j + dy - 1;
            if (y < 0 || y >= g.ny)
              continue;
            for (int dx = 0; dx < 3; ++dx) {
              const int x = i + dx - 1;
              if (x < 0 || x >= g.nx)
                continue;
              const int off = dz * 9 + dy * 3 + dx;
              const std::int64_t s =
                  col0 + static_cast<std::int64_t>(g.index(x, y, z));
              for (int c = 0; c < c_in; ++c)
                dst(c, s) += dP(c * 27 + off, q);
            }
          }
        }
      }
}

struct Cache {
  std::vector<const Volume3D *> inputs;
  Eigen::MatrixXd Y1, A1, M1d; // pre-BN, post-ReLU, pooled+dropout
  Eigen::MatrixXd Y2, A2, M2d;
  Eigen::ArrayXd mu1, var1, invstd1, mu2, var2, invstd2;
  Eigen::MatrixXd D1, D2; // dropout scale masks (empty when unused)
  std::vector<std::int64_t> idx1, idx2; // pool argmax source columns
  Eigen::MatrixXd X;      // flat x B
  Eigen::MatrixXd logits, probs; // 4 x B
};

void batchnorm_forward(Eigen::MatrixXd &Y, const Layout &L,
                       ConstVecMap gamma, ConstVecMap beta,
                       Eigen::ArrayXd &mu, Eigen::ArrayXd &var,
                       Eigen::ArrayXd &invstd, Eigen::ArrayXd &running,
                       std::int64_t orm, std::int64_t orv, double momentum,
                       double eps, Mode mode) {
  const int rows = static_cast<int>(Y.rows());
  const double n = static_cast<double>(Y.cols());
  mu.resize(rows);
  var.resize(rows);
  invstd.resize(rows);
  for (int r = 0; r < rows; ++r) {
    if (mode == Mode::Train) {
      const double m = Y.row(r).mean();
      const double v = (Y.row(r).array() - m).square().sum() / n;
      mu[r] = m;
      var[r] = v;
      running[orm + r] = momentum * running[orm + r] + (1.0 - momentum) * m;
      running[orv + r] = momentum * running[orv + r] + (1.0 - momentum) * v;
    } else {
      mu[r] = running[orm + r];
      var[r] = running[orv + r];
    }
    invstd[r] = 1.0 / std::sqrt(var[r] + eps);
    Y.row(r) =
        ((gamma[r] * invstd[r]) * (Y.row(r).array() - mu[r]) + beta[r])
            .matrix();
  }
  (void)L;
}

void maxpool_forward(const Eigen::MatrixXd &A, const Dims3 &g, const Dims3 &h,
                     int channels, std::int64_t n_samples,
                     Eigen::MatrixXd &out, std::vector<std::int64_t> &argmax) {
  const std::int64_t n_in = g.count(), n_out = h.count();
  out.resize(channels, n_out * n_samples);
  argmax.assign(static_cast<std::size_t>(channels * n_out * n_samples), 0);
  for (std::int64_t b = 0; b < n_samples; ++b)
    for (int k = 0; k < h.nz; ++k)
      for (int j = 0; j < h.ny; ++j)
        for (int i = 0; i < h.nx; ++i) {
          const std::int64_t q =
              b * n_out + static_cast<std::int64_t>(h.index(i, j, k));
          for (int c = 0; c < channels; ++c) {
            double best = -std::numeric_limits<double>::infinity();
            std::int64_t best_col = 0;
            for (int dz = 0; dz < 2; ++dz)
              for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                  const std::int64_t s =
                      b * n_in + static_cast<std::int64_t>(g.index(
                                     2 * i + dx, 2 * j + dy, 2 * k + dz));
                  const double v = A(c, s);
                  if (v > best) {
                    best = v;
                    best_col = s;
                  }
                }
            out(c, q) = best;
            argmax[static_cast<std::size_t>(c + channels * q)] = best_col;
          }
        }
}

void dropout_forward(Eigen::MatrixXd &M, double rate, Rng &rng,
                     Eigen::MatrixXd &mask) {
  const double keep = 1.0 - rate;
  mask.resize(M.rows(), M.cols());
  for (Eigen::Index col = 0; col < M.cols(); ++col)
    for (Eigen::Index r = 0; r < M.rows(); ++r)
      mask(r, col) = uniform_real(rng) < rate ? 0.0 : 1.0 / keep;
  M = M.cwiseProduct(mask);
}

void forward(const Cnn3dModel &model, const Layout &L,
             const std::vector<const Volume3D *> &batch, Mode mode,
             Rng *drop_rng, Eigen::ArrayXd &running, Cache &cc) {
  const auto &theta = model.params();
  const std::int64_t B = static_cast<std::int64_t>(batch.size());
  ConstMatMap W1(theta.data() + L.oW1, L.c1, 27);
  ConstVecMap b1(theta.data() + L.ob1, L.c1);
  ConstVecMap g1(theta.data() + L.og1, L.c1);
  ConstVecMap be1(theta.data() + L.obe1, L.c1);
  ConstMatMap W2(theta.data() + L.oW2, L.c2, 27 * L.c1);
  ConstVecMap b2(theta.data() + L.ob2, L.c2);
  ConstVecMap g2(theta.data() + L.og2, L.c2);
  ConstVecMap be2(theta.data() + L.obe2, L.c2);
  ConstMatMap Wfc(theta.data() + L.oWfc, 4, L.flat);
  ConstVecMap bfc(theta.data() + L.obfc, 4);

  cc.inputs = batch;
  cc.Y1.resize(L.c1, L.n0 * B);
  Eigen::MatrixXd P;
  Eigen::MatrixXd in(1, L.n0);
  for (std::int64_t b = 0; b < B; ++b) {
    in.row(0) = batch[static_cast<std::size_t>(b)]->data.matrix().transpose();
    im2col(in, 0, L.d0, 1, P);
    cc.Y1.middleCols(b * L.n0, L.n0) = W1 * P;
  }
  cc.Y1.colwise() += b1;

  cc.A1 = cc.Y1;
  batchnorm_forward(cc.A1, L, g1, be1, cc.mu1, cc.var1, cc.invstd1, running,
                    L.orm1, L.orv1, model.config().bn_momentum,
                    model.config().bn_epsilon, mode);
  cc.A1 = cc.A1.cwiseMax(0.0);

  maxpool_forward(cc.A1, L.d0, L.d1, L.c1, B, cc.M1d, cc.idx1);
  if (mode == Mode::Train && model.config().dropout_rate > 0.0 && drop_rng)
    dropout_forward(cc.M1d, model.config().dropout_rate, *drop_rng, cc.D1);
  else
    cc.D1.resize(0, 0);

  cc.Y2.resize(L.c2, L.n1 * B);
  for (std::int64_t b = 0; b < B; ++b) {
    im2col(cc.M1d, b * L.n1, L.d1, L.c1, P);
    cc.Y2.middleCols(b * L.n1, L.n1) = W2 * P;
  }
  cc.Y2.colwise() += b2;

  cc.A2 = cc.Y2;
  batchnorm_forward(cc.A2, L, g2, be2, cc.mu2, cc.var2, cc.invstd2, running,
                    L.orm2, L.orv2, model.config().bn_momentum,
                    model.config().bn_epsilon, mode);
  cc.A2 = cc.A2.cwiseMax(0.0);

  maxpool_forward(cc.A2, L.d1, L.d2, L.c2, B, cc.M2d, cc.idx2);
  if (mode == Mode::Train && model.config().dropout_rate > 0.0 && drop_rng)
    dropout_forward(cc.M2d, model.config().dropout_rate, *drop_rng, cc.D2);
  else
    cc.D2.resize(0, 0);

  cc.X.resize(L.flat, B);
  for (std::int64_t b = 0; b < B; ++b)
    for (int c = 0; c < L.c2; ++c)
      for (std::int64_t p = 0; p < L.n2; ++p)
        cc.X(c * L.n2 + p, b) = cc.M2d(c, b * L.n2 + p);

  cc.logits = Wfc * cc.X;
  cc.logits.colwise() += bfc;
  cc.probs.resize(4, B);
  for (std::int64_t b = 0; b < B; ++b) {
    const Eigen::Vector4d z = cc.logits.col(b);
    const Eigen::Vector4d e = (z.array() - z.maxCoeff()).exp();
    cc.probs.col(b) = e / e.sum();
  }
}

void batchnorm_backward(const Eigen::MatrixXd &Ypre, Eigen::MatrixXd &dZ,
                        const Eigen::ArrayXd &mu, const Eigen::ArrayXd &var,
                        const Eigen::ArrayXd &invstd, ConstVecMap gamma,
                        VecMap dgamma, VecMap dbeta, Mode mode) {
  const double n = static_cast<double>(dZ.cols());
  for (int r = 0; r < static_cast<int>(dZ.rows()); ++r) {
    const Eigen::ArrayXXd x = Ypre.row(r).array();
    const Eigen::ArrayXXd xhat = (x - mu[r]) * invstd[r];
    const Eigen::ArrayXXd dz = dZ.row(r).array();
    dgamma[r] += (dz * xhat).sum();
    dbeta[r] += dz.sum();
    if (mode == Mode::Frozen) {
      dZ.row(r) = (dz * (gamma[r] * invstd[r])).matrix();
      continue;
    }
    const Eigen::ArrayXXd dxhat = dz * gamma[r];
    const double dvar =
        (dxhat * (x - mu[r])).sum() * (-0.5) * invstd[r] * invstd[r] *
        invstd[r];
    const double dmu = -invstd[r] * dxhat.sum() +
                       dvar * (-2.0 / n) * (x - mu[r]).sum();
    dZ.row(r) =
        (dxhat * invstd[r] + (2.0 / n) * dvar * (x - mu[r]) + dmu / n)
            .matrix();
  }
  (void)var;
}

void maxpool_backward(const Eigen::MatrixXd &dOut,
                      const std::vector<std::int64_t> &argmax, int channels,
                      Eigen::MatrixXd &dIn) {
  for (Eigen::Index q = 0; q < dOut.cols(); ++q)
    for (int c = 0; c < channels; ++c)
      dIn(c, argmax[static_cast<std::size_t>(c + channels * q)]) +=
          dOut(c, q);
}

// Gradient of the weighted cross-entropy wrt theta. Returns the batch loss.
double backward(const Cnn3dModel &model, const Layout &L, const Cache &cc,
                const std::vector<int> &labels,
                const Eigen::VectorXd &weights, Mode mode,
                Eigen::ArrayXd &grad) {
  const auto &theta = model.params();
  const std::int64_t B = static_cast<std::int64_t>(labels.size());
  ConstVecMap g1(theta.data() + L.og1, L.c1);
  ConstMatMap W2(theta.data() + L.oW2, L.c2, 27 * L.c1);
  ConstVecMap g2(theta.data() + L.og2, L.c2);
  ConstMatMap Wfc(theta.data() + L.oWfc, 4, L.flat);

  grad.setZero(L.total);
  MatMap dW1(grad.data() + L.oW1, L.c1, 27);
  VecMap db1(grad.data() + L.ob1, L.c1);
  VecMap dg1(grad.data() + L.og1, L.c1);
  VecMap dbe1(grad.data() + L.obe1, L.c1);
  MatMap dW2(grad.data() + L.oW2, L.c2, 27 * L.c1);
  VecMap db2(grad.data() + L.ob2, L.c2);
  VecMap dg2(grad.data() + L.og2, L.c2);
  VecMap dbe2(grad.data() + L.obe2, L.c2);
  MatMap dWfc(grad.data() + L.oWfc, 4, L.flat);
  VecMap dbfc(grad.data() + L.obfc, 4);

  double loss = 0.0;
  Eigen::MatrixXd dZ(4, B);
  for (std::int64_t b = 0; b < B; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    const double w = weights[y];
    const double p = cc.probs(y, b);
    loss -= w * std::log(std::max(p, 1e-12));
    if (p > 1e-12) {
      dZ.col(b) = (w / static_cast<double>(B)) * cc.probs.col(b);
      dZ(y, b) -= w / static_cast<double>(B);
    } else {
      dZ.col(b).setZero(); // clamped log has zero slope
    }
  }
  loss /= static_cast<double>(B);

  dWfc += dZ * cc.X.transpose();
  dbfc += dZ.rowwise().sum();
  const Eigen::MatrixXd dX = Wfc.transpose() * dZ;

  Eigen::MatrixXd dM2(L.c2, L.n2 * B);
  for (std::int64_t b = 0; b < B; ++b)
    for (int c = 0; c < L.c2; ++c)
      for (std::int64_t p = 0; p < L.n2; ++p)
        dM2(c, b * L.n2 + p) = dX(c * L.n2 + p, b);
  if (cc.D2.size() > 0)
    dM2 = dM2.cwiseProduct(cc.D2);

  Eigen::MatrixXd dA2 = Eigen::MatrixXd::Zero(L.c2, L.n1 * B);
  maxpool_backward(dM2, cc.idx2, L.c2, dA2);
  dA2 = dA2.cwiseProduct((cc.A2.array() > 0.0).cast<double>().matrix());
  batchnorm_backward(cc.Y2, dA2, cc.mu2, cc.var2, cc.invstd2, g2, dg2, dbe2,
                     mode);

  db2 += dA2.rowwise().sum();
  Eigen::MatrixXd dM1 = Eigen::MatrixXd::Zero(L.c1, L.n1 * B);
  Eigen::MatrixXd P;
  for (std::int64_t b = 0; b < B; ++b) {
    im2col(cc.M1d, b * L.n1, L.d1, L.c1, P);
    const auto dY2b = dA2.middleCols(b * L.n1, L.n1);
    dW2 += dY2b * P.transpose();
    const Eigen::MatrixXd dP = W2.transpose() * dY2b;
    col2im_add(dP, b * L.n1, L.d1, L.c1, dM1);
  }
  if (cc.D1.size() > 0)
    dM1 = dM1.cwiseProduct(cc.D1);

  Eigen::MatrixXd dA1 = Eigen::MatrixXd::Zero(L.c1, L.n0 * B);
  maxpool_backward(dM1, cc.idx1, L.c1, dA1);
  dA1 = dA1.cwiseProduct((cc.A1.array() > 0.0).cast<double>().matrix());
  batchnorm_backward(cc.Y1, dA1, cc.mu1, cc.var1, cc.invstd1, g1, dg1, dbe1,
                     mode);

  db1 += dA1.rowwise().sum();
  Eigen::MatrixXd in(1, L.n0);
  for (std::int64_t b = 0; b < B; ++b) {
    in.row(0) = cc.inputs[static_cast<std::size_t>(b)]->data.matrix().transpose();
    im2col(in, 0, L.d0, 1, P);
    dW1 += dA1.middleCols(b * L.n0, L.n0) * P.transpose();
  }
  return loss;
}

void check_batch(const Cnn3dModel &model,
                 const std::vector<const Volume3D *> &batch) {
  if (batch.empty())
    throw ShapeMismatch("empty batch");
  for (const auto *v : batch)
    if (v->dims != model.input_dims())
      throw ShapeMismatch("batch volume dims differ from model input dims");
}

Eigen::VectorXd resolve_weights(const Eigen::VectorXd &w) {
  if (w.size() == 0)
    return Eigen::VectorXd::Constant(4, 0.25);
  if (w.size() != 4)
    throw InvalidConfig("class weight vector must have 4 entries");
  if (std::abs(w.sum() - 1.0) > 1e-6)
    throw InvalidConfig("class weights must sum to 1");
  return w;
}

double gradcheck_impl(const Cnn3dModel &model,
                      const std::vector<Volume3D> &batch,
                      const std::vector<int> &labels,
                      const Eigen::VectorXd &class_weights, int n_params,
                      std::uint64_t seed, Mode mode) {
  Cnn3dModel m = model;
  const Layout L = make_layout(m.input_dims(), m.config());
  std::vector<const Volume3D *> ptrs;
  for (const auto &v : batch)
    ptrs.push_back(&v);
  check_batch(m, ptrs);
  const Eigen::VectorXd w = resolve_weights(class_weights);
  // Batch statistics must stay fixed across FD probes, so training-path
  // checks run with a scratch running array and momentum untouched.
  Eigen::ArrayXd running = m.running_stats();

  Cache cc;
  forward(m, L, ptrs, mode, nullptr, running, cc);
  Eigen::ArrayXd grad;
  backward(m, L, cc, labels, w, mode, grad);

  std::vector<std::int64_t> ids(static_cast<std::size_t>(L.total));
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng = make_rng(seed, hash_string("gradcheck"));
  shuffle_inplace(rng, ids);
  const int n = static_cast<int>(std::min<std::int64_t>(n_params, L.total));

  const double h = 1e-5;
  double max_rel = 0.0;
  for (int t = 0; t < n; ++t) {
    const std::int64_t i = ids[static_cast<std::size_t>(t)];
    const double save = m.params()[i];
    Eigen::ArrayXd scratch = m.running_stats();
    m.params()[i] = save + h;
    forward(m, L, ptrs, mode, nullptr, scratch, cc);
    double lp = 0.0;
    for (std::size_t b = 0; b < labels.size(); ++b)
      lp -= w[labels[b]] *
            std::log(std::max(cc.probs(labels[b],
                                       static_cast<Eigen::Index>(b)),
                              1e-12));
    lp /= static_cast<double>(labels.size());
    m.params()[i] = save - h;
    scratch = m.running_stats();
    forward(m, L, ptrs, mode, nullptr, scratch, cc);
    double lm = 0.0;
    for (std::size_t b = 0; b < labels.size(); ++b)
      lm -= w[labels[b]] *
            std::log(std::max(cc.probs(labels[b],
                                       static_cast<Eigen::Index>(b)),
                              1e-12));
    lm /= static_cast<double>(labels.size());
    m.params()[i] = save;
    const double numeric = (lp - lm) / (2.0 * h);
    const double analytic = grad[i];
    // Floor at 1e-6: below that the difference quotient is rounding noise
    // (ulp of the loss over 2h), e.g. exact-zero bias gradients under
    // batch-statistics normalization.
    const double rel = std::abs(analytic - numeric) /
                       std::max(std::abs(analytic) + std::abs(numeric), 1e-6);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

} // namespace

Cnn3dModel::Cnn3dModel(Dims3 input_dims, const CnnConfig &cfg,
                       std::uint64_t seed)
    : input_dims_(input_dims), cfg_(cfg) {
  if (input_dims.nx < 4 || input_dims.ny < 4 || input_dims.nz < 4 ||
      input_dims.nx % 4 || input_dims.ny % 4 || input_dims.nz % 4)
    throw ShapeMismatch("model input dims must be divisible by 4");
  if (cfg.conv1_channels < 1 || cfg.conv2_channels < 1 ||
      cfg.dropout_rate < 0.0 || cfg.dropout_rate >= 1.0)
    throw InvalidConfig("bad model configuration");
  const Layout L = make_layout(input_dims_, cfg_);
  theta_.setZero(L.total);
  running_.setZero(L.rtotal);
  running_.segment(L.orv1, L.c1).setOnes();
  running_.segment(L.orv2, L.c2).setOnes();

  Rng rng = make_rng(seed, hash_string("cnn-init"));
  auto he_fill = [&](std::int64_t off, std::int64_t count, double fan_in) {
    const double s = std::sqrt(2.0 / fan_in);
    for (std::int64_t i = 0; i < count; ++i)
      theta_[off + i] = s * normal(rng);
  };
  he_fill(L.oW1, L.c1 * 27, 27.0);
  he_fill(L.oW2, static_cast<std::int64_t>(L.c2) * 27 * L.c1, 27.0 * L.c1);
  he_fill(L.oWfc, 4 * L.flat, static_cast<double>(L.flat));
  theta_.segment(L.og1, L.c1).setOnes();
  theta_.segment(L.og2, L.c2).setOnes();
}

Eigen::MatrixXd Cnn3dModel::predict(const std::vector<Volume3D> &batch) const {
  const Layout L = make_layout(input_dims_, cfg_);
  std::vector<const Volume3D *> ptrs;
  for (const auto &v : batch)
    ptrs.push_back(&v);
  check_batch(*this, ptrs);
  Eigen::ArrayXd running = running_; // Frozen mode leaves stats untouched
  Cache cc;
  forward(*this, L, ptrs, Mode::Frozen, nullptr, running, cc);
  return cc.probs.transpose();
}

double cnn_loss(const Eigen::MatrixXd &probs, const std::vector<int> &labels,
                const Eigen::VectorXd &class_weights) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size())
    throw LengthMismatch("probability rows differ from label count");
  const Eigen::VectorXd w = resolve_weights(class_weights);
  double loss = 0.0;
  for (std::size_t b = 0; b < labels.size(); ++b)
    loss -= w[labels[b]] *
            std::log(std::max(
                probs(static_cast<Eigen::Index>(b), labels[b]), 1e-12));
  return loss / static_cast<double>(labels.size());
}

std::vector<EpochStats> cnn_train(Cnn3dModel &model,
                                  const std::vector<Volume3D> &volumes,
                                  const std::vector<int> &labels,
                                  const TrainConfig &cfg) {
  if (volumes.size() != labels.size() || volumes.empty())
    throw LengthMismatch("volumes and labels must align and be nonempty");
  for (int y : labels)
    if (y < 0 || y > 3)
      throw InvalidConfig("labels must lie in 0..3");
  if (cfg.learning_rate <= 0.0 || cfg.batch_size < 1 || cfg.epochs < 0)
    throw InvalidConfig("bad training configuration");
  const Eigen::VectorXd w = resolve_weights(cfg.class_weights);
  const Layout L = make_layout(model.input_dims(), model.config());

  Eigen::ArrayXd m = Eigen::ArrayXd::Zero(L.total);
  Eigen::ArrayXd v = Eigen::ArrayXd::Zero(L.total);
  std::int64_t t = 0;
  Rng shuffle_rng = make_rng(cfg.seed, hash_string("cnn-shuffle"));
  Rng drop_rng = make_rng(cfg.seed, hash_string("cnn-dropout"));

  std::vector<std::size_t> order(volumes.size());
  std::iota(order.begin(), order.end(), 0);

  std::vector<EpochStats> curve;
  Cache cc;
  Eigen::ArrayXd grad;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_inplace(shuffle_rng, order);
    double epoch_loss = 0.0;
    int n_batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const Volume3D *> batch;
      std::vector<int> by;
      for (std::size_t q = start; q < stop; ++q) {
        batch.push_back(&volumes[order[q]]);
        by.push_back(labels[order[q]]);
      }
      check_batch(model, batch);
      forward(model, L, batch, Mode::Train, &drop_rng, model.running_stats(),
              cc);
      epoch_loss += backward(model, L, cc, by, w, Mode::Train, grad);
      ++n_batches;

      ++t;
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.square();
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
      model.params() -=
          cfg.learning_rate * (m / bc1) / ((v / bc2).sqrt() + cfg.adam_epsilon);
    }

    // End-of-epoch training accuracy under inference semantics.
    int correct = 0;
    for (std::size_t start = 0; start < volumes.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(
          volumes.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Volume3D> batch(volumes.begin() +
                                      static_cast<std::ptrdiff_t>(start),
                                  volumes.begin() +
                                      static_cast<std::ptrdiff_t>(stop));
      const Eigen::MatrixXd p = model.predict(batch);
      for (Eigen::Index r = 0; r < p.rows(); ++r) {
        Eigen::Index arg = 0;
        for (Eigen::Index c = 1; c < 4; ++c)
          if (p(r, c) > p(r, arg))
            arg = c;
        if (arg == labels[start + static_cast<std::size_t>(r)])
          ++correct;
      }
    }
    curve.push_back({epoch_loss / std::max(1, n_batches),
                     static_cast<double>(correct) /
                         static_cast<double>(volumes.size())});
  }
  return curve;
}

double cnn_gradcheck(const Cnn3dModel &model,
                     const std::vector<Volume3D> &batch,
                     const std::vector<int> &labels,
                     const Eigen::VectorXd &class_weights, int n_params,
                     std::uint64_t seed) {
  return gradcheck_impl(model, batch, labels, class_weights, n_params, seed,
                        Mode::Frozen);
}

double cnn_gradcheck_train_mode(const Cnn3dModel &model,
                                const std::vector<Volume3D> &batch,
                                const std::vector<int> &labels,
                                const Eigen::VectorXd &class_weights,
                                int n_params, std::uint64_t seed) {
  return gradcheck_impl(model, batch, labels, class_weights, n_params, seed,
                        Mode::Train);
}

} // namespace jacfuse
