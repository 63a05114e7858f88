// checkpoint.hpp - versioned little-endian container for trained models.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "jacfuse/cnn.hpp"
#include "jacfuse/forest.hpp"

namespace jacfuse {

// File layout: magic "ELF1", u32 format version, u32 block count, then per
// block a length-prefixed name and a length-prefixed payload.
struct Checkpoint {
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> blocks;

  void put_bytes(const std::string &name, std::vector<std::uint8_t> payload);
  void put_doubles(const std::string &name, const Eigen::ArrayXd &values);
  void put_ints(const std::string &name, const std::vector<std::int64_t> &v);

  bool has(const std::string &name) const;
  const std::vector<std::uint8_t> &bytes(const std::string &name) const;
  Eigen::ArrayXd doubles(const std::string &name) const;
  std::vector<std::int64_t> ints(const std::string &name) const;

  void save(const std::string &path) const;
  static Checkpoint load(const std::string &path);
};

void cnn_to_checkpoint(const Cnn3dModel &model, Checkpoint &ck,
                       const std::string &prefix);
Cnn3dModel cnn_from_checkpoint(const Checkpoint &ck,
                               const std::string &prefix);

void forest_to_checkpoint(const ForestModel &model, Checkpoint &ck,
                          const std::string &prefix);
ForestModel forest_from_checkpoint(const Checkpoint &ck,
                                   const std::string &prefix);

} // namespace jacfuse
