// nifti.hpp - single-file NIfTI-1 ("n+1") reading and writing.
//
// Only the subset the pipeline needs: datatypes uint8/int16/float32/float64,
// sform orientation, 3D volumes plus the 4D layout used for displacement
// fields (dim[0]=4, components along the 4th axis). Detached headers and
// NIfTI-2 are rejected.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "jacfuse/volume.hpp"

namespace jacfuse {

enum class NiftiDatatype : std::int16_t {
  Uint8 = 2,
  Int16 = 4,
  Float32 = 16,
  Float64 = 64,
};

// Parsed header, already byte-order normalized. Offsets follow the standard
// 348-byte layout; fields the pipeline never reads are kept only so writes
// can be bit-exact.
struct NiftiHeader {
  std::int32_t sizeof_hdr = 348;
  std::array<std::int16_t, 8> dim{};
  std::int16_t datatype = 0;
  std::int16_t bitpix = 0;
  std::array<float, 8> pixdim{};
  float vox_offset = 352.0f;
  float scl_slope = 1.0f;
  float scl_inter = 0.0f;
  std::int16_t sform_code = 1;
  std::array<float, 4> srow_x{};
  std::array<float, 4> srow_y{};
  std::array<float, 4> srow_z{};
  std::array<char, 4> magic{'n', '+', '1', '\0'};
  bool swapped = false; // source file was opposite-endian
};

int nifti_bitpix(NiftiDatatype dt);

// Reads a 3D volume (dim[0]==3, or dim[0]==4 with a single 4th-axis slab).
// Values are scaled raw*scl_slope + scl_inter when scl_slope != 0 and
// converted to float64.
std::pair<Volume3D, NiftiHeader> read_nifti(const std::string &path);

// Writes a single-file .nii with payload at offset 352 (348-byte header plus
// the 4-byte zero extension flag). Float targets store values as-is with
// scl_slope=1, scl_inter=0; integer targets round and clamp to the target
// range. Non-finite values and float32 overflow raise OverflowError.
void write_nifti(const Volume3D &vol, const std::string &path,
                 NiftiDatatype datatype = NiftiDatatype::Float64);

// 4D variants used for displacement fields: `slabs` all share dims/spacing
// and are laid out x-fastest with the slab index slowest.
void write_nifti_4d(const std::vector<Volume3D> &slabs,
                    const std::string &path,
                    NiftiDatatype datatype = NiftiDatatype::Float64);
std::pair<std::vector<Volume3D>, NiftiHeader>
read_nifti_4d(const std::string &path);

} // namespace jacfuse
