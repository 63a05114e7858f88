#include "doctest.h"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "jacfuse/nifti.hpp"
#include "jacfuse/rng.hpp"

using namespace jacfuse;

namespace {

std::string tmp_path(const std::string &name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

Volume3D random_volume(Dims3 d, std::uint64_t seed) {
  Volume3D v(d);
  Rng rng = make_rng(seed);
  for (std::int64_t n = 0; n < d.count(); ++n)
    v.data[n] = uniform_real(rng, -10.0, 10.0);
  return v;
}

// Independent header/payload assembler with explicit byte order, so the
// reader can be checked against files the library writer never produced.
struct ByteWriter {
  std::vector<unsigned char> bytes;
  bool big_endian = false;

  template <class T> void put(T v, std::size_t off) {
    if (bytes.size() < off + sizeof(T)) bytes.resize(off + sizeof(T), 0);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bytes[off + i] = big_endian ? raw[sizeof(T) - 1 - i] : raw[i];
    }
  }
};

std::string assemble_float32_file(const std::string &name, int n,
                                  const std::vector<float> &payload,
                                  bool big_endian) {
  ByteWriter w;
  w.bytes.resize(352, 0);
  w.big_endian = big_endian;
  w.put<std::int32_t>(348, 0);
  w.put<std::int16_t>(3, 40);
  w.put<std::int16_t>(static_cast<std::int16_t>(n), 42);
  w.put<std::int16_t>(static_cast<std::int16_t>(n), 44);
  w.put<std::int16_t>(static_cast<std::int16_t>(n), 46);
  for (int i = 4; i < 8; ++i) w.put<std::int16_t>(1, 40 + 2 * i);
  w.put<std::int16_t>(16, 70); // float32
  w.put<std::int16_t>(32, 72);
  for (int i = 0; i < 8; ++i) w.put<float>(1.0f, 76 + 4 * i);
  w.put<float>(352.0f, 108);
  w.put<float>(1.0f, 112);
  w.put<float>(0.0f, 116);
  w.put<std::int16_t>(1, 254);
  w.put<float>(1.0f, 280);
  w.put<float>(1.0f, 300);
  w.put<float>(1.0f, 320);
  // magic is byte data, never swapped
  w.bytes[344] = 'n';
  w.bytes[345] = '+';
  w.bytes[346] = '1';
  w.bytes[347] = 0;
  for (std::size_t i = 0; i < payload.size(); ++i) {
    w.put<float>(payload[i], 352 + 4 * i);
  }
  const std::string path = tmp_path(name);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(reinterpret_cast<const char *>(w.bytes.data()),
          static_cast<std::streamsize>(w.bytes.size()));
  return path;
}

} // namespace

TEST_CASE("float64 round-trip is bit-identical") {
  Volume3D v = random_volume({32, 32, 32}, 1234);
  v.spacing = Eigen::Vector3d(0.9, 1.1, 1.3);
  const std::string path = tmp_path("jacfuse_rt64.nii");
  write_nifti(v, path, NiftiDatatype::Float64);
  auto [back, hdr] = read_nifti(path);
  REQUIRE(back.dims == v.dims);
  for (std::int64_t n = 0; n < v.data.size(); ++n) {
    CHECK(back.data[n] == v.data[n]); // exact
  }
  CHECK(hdr.datatype == 64);
  std::remove(path.c_str());
}

TEST_CASE("float32 round-trip preserves float32-exact values") {
  Volume3D v({8, 8, 8});
  Rng rng = make_rng(5);
  for (std::int64_t n = 0; n < v.data.size(); ++n) {
    v.data[n] = static_cast<float>(uniform_real(rng, -5, 5));
  }
  const std::string path = tmp_path("jacfuse_rt32.nii");
  write_nifti(v, path, NiftiDatatype::Float32);
  auto [back, hdr] = read_nifti(path);
  for (std::int64_t n = 0; n < v.data.size(); ++n) {
    CHECK(back.data[n] == v.data[n]);
  }
  std::remove(path.c_str());
}

TEST_CASE("all-zero 8^3 float64 file is exactly 4448 bytes") {
  Volume3D v({8, 8, 8});
  const std::string path = tmp_path("jacfuse_sz.nii");
  write_nifti(v, path, NiftiDatatype::Float64);
  CHECK(std::filesystem::file_size(path) == 352 + 512 * 8);
  std::remove(path.c_str());
}

TEST_CASE("byte-swapped header parses to the little-endian twin") {
  std::vector<float> payload(27);
  Rng rng = make_rng(77);
  for (auto &p : payload) p = static_cast<float>(uniform_real(rng, -3, 3));

  const auto le = assemble_float32_file("jacfuse_le.nii", 3, payload, false);
  const auto be = assemble_float32_file("jacfuse_be.nii", 3, payload, true);

  auto [vle, hle] = read_nifti(le);
  auto [vbe, hbe] = read_nifti(be);
  CHECK_FALSE(hle.swapped);
  CHECK(hbe.swapped);
  REQUIRE(vle.dims == vbe.dims);
  for (std::int64_t n = 0; n < vle.data.size(); ++n) {
    CHECK(vle.data[n] == vbe.data[n]);
  }
  std::remove(le.c_str());
  std::remove(be.c_str());
}

TEST_CASE("detached-header magic is rejected with BadMagic") {
  std::vector<float> payload(8, 0.0f);
  const auto path = assemble_float32_file("jacfuse_ni1.nii", 2, payload, false);
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(344);
    f.write("ni1", 4);
  }
  CHECK_THROWS_AS((void)read_nifti(path), BadMagic);
  std::remove(path.c_str());
}

TEST_CASE("unsupported datatype is rejected") {
  std::vector<float> payload(8, 0.0f);
  const auto path = assemble_float32_file("jacfuse_dt.nii", 2, payload, false);
  {
    ByteWriter w;
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    const std::int16_t rgb = 128;
    f.seekp(70);
    f.write(reinterpret_cast<const char *>(&rgb), 2);
  }
  CHECK_THROWS_AS((void)read_nifti(path), UnsupportedDatatype);
  std::remove(path.c_str());
}

TEST_CASE("truncated payload is rejected") {
  Volume3D v({8, 8, 8});
  const std::string path = tmp_path("jacfuse_trunc.nii");
  write_nifti(v, path, NiftiDatatype::Float64);
  std::filesystem::resize_file(path, 352 + 100);
  CHECK_THROWS_AS((void)read_nifti(path), TruncatedFile);
  std::remove(path.c_str());
}

TEST_CASE("inconsistent bitpix is rejected") {
  std::vector<float> payload(8, 0.0f);
  const auto path = assemble_float32_file("jacfuse_bp.nii", 2, payload, false);
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    const std::int16_t wrong = 16;
    f.seekp(72);
    f.write(reinterpret_cast<const char *>(&wrong), 2);
  }
  CHECK_THROWS_AS((void)read_nifti(path), HeaderInconsistent);
  std::remove(path.c_str());
}

TEST_CASE("scl_slope/scl_inter scaling is applied on read") {
  std::vector<float> payload = {1.0f, 2.0f, 3.0f, 4.0f, 5, 6, 7, 8};
  const auto path = assemble_float32_file("jacfuse_scl.nii", 2, payload, false);
  {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    const float slope = 2.5f, inter = -1.0f;
    f.seekp(112);
    f.write(reinterpret_cast<const char *>(&slope), 4);
    f.write(reinterpret_cast<const char *>(&inter), 4);
  }
  auto [v, hdr] = read_nifti(path);
  CHECK(v.data[0] == doctest::Approx(1.5));
  CHECK(v.data[7] == doctest::Approx(19.0));
  std::remove(path.c_str());
}

TEST_CASE("1e40 to float32 target raises OverflowError") {
  Volume3D v({2, 2, 2});
  v.data[3] = 1e40;
  const std::string path = tmp_path("jacfuse_ovf.nii");
  CHECK_THROWS_AS(write_nifti(v, path, NiftiDatatype::Float32), OverflowError);
  std::remove(path.c_str());
}

TEST_CASE("integer targets round and clamp") {
  Volume3D v({2, 1, 1});
  v.data[0] = 300.7;
  v.data[1] = -5.2;
  const std::string path = tmp_path("jacfuse_u8.nii");
  write_nifti(v, path, NiftiDatatype::Uint8);
  auto [back, hdr] = read_nifti(path);
  CHECK(back.data[0] == 255.0);
  CHECK(back.data[1] == 0.0);
  std::remove(path.c_str());
}

TEST_CASE("4D field slabs round-trip") {
  std::vector<Volume3D> slabs;
  for (int t = 0; t < 3; ++t) slabs.push_back(random_volume({6, 5, 4}, 40 + t));
  const std::string path = tmp_path("jacfuse_4d.nii");
  write_nifti_4d(slabs, path, NiftiDatatype::Float64);
  auto [back, hdr] = read_nifti_4d(path);
  REQUIRE(back.size() == 3);
  CHECK(hdr.dim[0] == 4);
  CHECK(hdr.dim[4] == 3);
  for (int t = 0; t < 3; ++t) {
    for (std::int64_t n = 0; n < slabs[t].data.size(); ++n) {
      CHECK(back[t].data[n] == slabs[t].data[n]);
    }
  }
  std::remove(path.c_str());
}
