#include "jacfuse/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "jacfuse/errors.hpp"

namespace jacfuse {

namespace {

constexpr char kMagic[4] = {'E', 'L', 'F', '1'};
constexpr std::uint32_t kFormatVersion = 1;

void append_u32(std::vector<std::uint8_t> &out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void append_u64(std::vector<std::uint8_t> &out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t read_u32(const std::uint8_t *p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(const std::uint8_t *p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void append_f64(std::vector<std::uint8_t> &out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  append_u64(out, bits);
}

double read_f64(const std::uint8_t *p) {
  const std::uint64_t bits = read_u64(p);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

} // namespace

void Checkpoint::put_bytes(const std::string &name,
                           std::vector<std::uint8_t> payload) {
  for (auto &b : blocks)
    if (b.first == name) {
      b.second = std::move(payload);
      return;
    }
  blocks.emplace_back(name, std::move(payload));
}

void Checkpoint::put_doubles(const std::string &name,
                             const Eigen::ArrayXd &values) {
  std::vector<std::uint8_t> payload;
  payload.reserve(static_cast<std::size_t>(values.size()) * 8);
  for (Eigen::Index i = 0; i < values.size(); ++i)
    append_f64(payload, values[i]);
  put_bytes(name, std::move(payload));
}

void Checkpoint::put_ints(const std::string &name,
                          const std::vector<std::int64_t> &v) {
  std::vector<std::uint8_t> payload;
  payload.reserve(v.size() * 8);
  for (std::int64_t x : v)
    append_u64(payload, static_cast<std::uint64_t>(x));
  put_bytes(name, std::move(payload));
}

bool Checkpoint::has(const std::string &name) const {
  for (const auto &b : blocks)
    if (b.first == name)
      return true;
  return false;
}

const std::vector<std::uint8_t> &
Checkpoint::bytes(const std::string &name) const {
  for (const auto &b : blocks)
    if (b.first == name)
      return b.second;
  throw IoError("checkpoint block missing: " + name);
}

Eigen::ArrayXd Checkpoint::doubles(const std::string &name) const {
  const auto &raw = bytes(name);
  if (raw.size() % 8)
    throw HeaderInconsistent("checkpoint block " + name + " not 8-aligned");
  Eigen::ArrayXd out(static_cast<Eigen::Index>(raw.size() / 8));
  for (Eigen::Index i = 0; i < out.size(); ++i)
    out[i] = read_f64(raw.data() + 8 * i);
  return out;
}

std::vector<std::int64_t> Checkpoint::ints(const std::string &name) const {
  const auto &raw = bytes(name);
  if (raw.size() % 8)
    throw HeaderInconsistent("checkpoint block " + name + " not 8-aligned");
  std::vector<std::int64_t> out(raw.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::int64_t>(read_u64(raw.data() + 8 * i));
  return out;
}

void Checkpoint::save(const std::string &path) const {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  append_u32(out, kFormatVersion);
  append_u32(out, static_cast<std::uint32_t>(blocks.size()));
  for (const auto &[name, payload] : blocks) {
    append_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    append_u64(out, payload.size());
    out.insert(out.end(), payload.begin(), payload.end());
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f)
    throw IoError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char *>(out.data()),
          static_cast<std::streamsize>(out.size()));
  if (!f)
    throw IoError("short write to " + path);
}

Checkpoint Checkpoint::load(const std::string &path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw IoError("cannot open " + path);
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
  if (raw.size() < 12 || std::memcmp(raw.data(), kMagic, 4) != 0)
    throw BadMagic("not a model checkpoint: " + path);
  if (read_u32(raw.data() + 4) != kFormatVersion)
    throw HeaderInconsistent("unsupported checkpoint version in " + path);
  const std::uint32_t n = read_u32(raw.data() + 8);
  std::size_t at = 12;
  Checkpoint ck;
  for (std::uint32_t i = 0; i < n; ++i) {
    if (at + 4 > raw.size())
      throw TruncatedFile("checkpoint ends inside a block header");
    const std::uint32_t name_len = read_u32(raw.data() + at);
    at += 4;
    if (at + name_len + 8 > raw.size())
      throw TruncatedFile("checkpoint ends inside a block name");
    std::string name(reinterpret_cast<const char *>(raw.data() + at),
                     name_len);
    at += name_len;
    const std::uint64_t payload_len = read_u64(raw.data() + at);
    at += 8;
    if (at + payload_len > raw.size())
      throw TruncatedFile("checkpoint ends inside a block payload");
    ck.blocks.emplace_back(
        std::move(name),
        std::vector<std::uint8_t>(raw.begin() + static_cast<std::ptrdiff_t>(at),
                                  raw.begin() +
                                      static_cast<std::ptrdiff_t>(at +
                                                                  payload_len)));
    at += payload_len;
  }
  return ck;
}

void cnn_to_checkpoint(const Cnn3dModel &model, Checkpoint &ck,
                       const std::string &prefix) {
  const auto &d = model.input_dims();
  const auto &c = model.config();
  ck.put_ints(prefix + "/dims", {d.nx, d.ny, d.nz, c.conv1_channels,
                                 c.conv2_channels});
  Eigen::ArrayXd hyper(3);
  hyper << c.dropout_rate, c.bn_momentum, c.bn_epsilon;
  ck.put_doubles(prefix + "/hyper", hyper);
  ck.put_doubles(prefix + "/theta", model.params());
  ck.put_doubles(prefix + "/running", model.running_stats());
}

Cnn3dModel cnn_from_checkpoint(const Checkpoint &ck,
                               const std::string &prefix) {
  const auto dims = ck.ints(prefix + "/dims");
  if (dims.size() != 5)
    throw HeaderInconsistent("bad cnn dims block");
  const auto hyper = ck.doubles(prefix + "/hyper");
  if (hyper.size() != 3)
    throw HeaderInconsistent("bad cnn hyper block");
  CnnConfig cfg;
  cfg.conv1_channels = static_cast<int>(dims[3]);
  cfg.conv2_channels = static_cast<int>(dims[4]);
  cfg.dropout_rate = hyper[0];
  cfg.bn_momentum = hyper[1];
  cfg.bn_epsilon = hyper[2];
  Cnn3dModel model({static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                    static_cast<int>(dims[2])},
                   cfg, 0);
  const auto theta = ck.doubles(prefix + "/theta");
  const auto running = ck.doubles(prefix + "/running");
  if (theta.size() != model.params().size() ||
      running.size() != model.running_stats().size())
    throw HeaderInconsistent("cnn parameter block size mismatch");
  model.params() = theta;
  model.running_stats() = running;
  return model;
}

void forest_to_checkpoint(const ForestModel &model, Checkpoint &ck,
                          const std::string &prefix) {
  ck.put_ints(prefix + "/meta",
              {model.cfg.n_trees, model.cfg.mtry, model.cfg.bootstrap ? 1 : 0,
               static_cast<std::int64_t>(model.cfg.seed), model.n_features,
               static_cast<std::int64_t>(model.trees.size())});
  std::vector<std::uint8_t> payload;
  for (const auto &tree : model.trees) {
    append_u64(payload, tree.nodes.size());
    for (const auto &nd : tree.nodes) {
      append_u32(payload, static_cast<std::uint32_t>(nd.feature));
      append_f64(payload, nd.threshold);
      append_u32(payload, static_cast<std::uint32_t>(nd.left));
      append_u32(payload, static_cast<std::uint32_t>(nd.right));
      for (int c = 0; c < 4; ++c)
        append_f64(payload, nd.dist[c]);
    }
  }
  ck.put_bytes(prefix + "/trees", std::move(payload));
}

ForestModel forest_from_checkpoint(const Checkpoint &ck,
                                   const std::string &prefix) {
  const auto meta = ck.ints(prefix + "/meta");
  if (meta.size() != 6)
    throw HeaderInconsistent("bad forest meta block");
  ForestModel model;
  model.cfg.n_trees = static_cast<int>(meta[0]);
  model.cfg.mtry = static_cast<int>(meta[1]);
  model.cfg.bootstrap = meta[2] != 0;
  model.cfg.seed = static_cast<std::uint64_t>(meta[3]);
  model.n_features = static_cast<int>(meta[4]);
  const auto n_trees = static_cast<std::size_t>(meta[5]);

  const auto &raw = ck.bytes(prefix + "/trees");
  std::size_t at = 0;
  auto need = [&](std::size_t n) {
    if (at + n > raw.size())
      throw TruncatedFile("forest block ends early");
  };
  for (std::size_t t = 0; t < n_trees; ++t) {
    need(8);
    const std::uint64_t n_nodes = read_u64(raw.data() + at);
    at += 8;
    DecisionTree tree;
    tree.nodes.resize(n_nodes);
    for (auto &nd : tree.nodes) {
      need(4 + 8 + 4 + 4 + 32);
      nd.feature = static_cast<std::int32_t>(read_u32(raw.data() + at));
      at += 4;
      nd.threshold = read_f64(raw.data() + at);
      at += 8;
      nd.left = static_cast<std::int32_t>(read_u32(raw.data() + at));
      at += 4;
      nd.right = static_cast<std::int32_t>(read_u32(raw.data() + at));
      at += 4;
      for (int c = 0; c < 4; ++c) {
        nd.dist[c] = read_f64(raw.data() + at);
        at += 8;
      }
    }
    model.trees.push_back(std::move(tree));
  }
  return model;
}

} // namespace jacfuse
