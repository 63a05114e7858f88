#include "jacfuse/nifti.hpp"

#include <cstring>
#include <fstream>
#include <limits>

namespace jacfuse {

namespace {

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kVoxOffset = 352;

template <class T> T byteswap_value(T v) {
  unsigned char *p = reinterpret_cast<unsigned char *>(&v);
  for (std::size_t i = 0, j = sizeof(T) - 1; i < j; ++i, --j) {
    std::swap(p[i], p[j]);
  }
  return v;
}

template <class T> T load_at(const std::vector<char> &buf, std::size_t off,
                             bool swap) {
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  return swap ? byteswap_value(v) : v;
}

template <class T>
void store_at(std::vector<char> &buf, std::size_t off, T v) {
  std::memcpy(buf.data() + off, &v, sizeof(T));
}

bool datatype_supported(std::int16_t code) {
  return code == 2 || code == 4 || code == 16 || code == 64;
}

} // namespace

int nifti_bitpix(NiftiDatatype dt) {
  switch (dt) {
  case NiftiDatatype::Uint8: return 8;
  case NiftiDatatype::Int16: return 16;
  case NiftiDatatype::Float32: return 32;
  case NiftiDatatype::Float64: return 64;
  }
  throw UnsupportedDatatype("unknown datatype code");
}

namespace {

NiftiHeader parse_header(const std::vector<char> &raw,
                         const std::string &path) {
  if (raw.size() < kHeaderSize) {
    throw TruncatedFile(path + ": file shorter than the 348-byte header");
  }
  std::int32_t hdr_native = load_at<std::int32_t>(raw, 0, false);
  bool swap = false;
  if (hdr_native != 348) {
    if (byteswap_value(hdr_native) == 348) {
      swap = true;
    } else {
      throw HeaderInconsistent(path + ": sizeof_hdr is not 348 under either "
                                      "byte order");
    }
  }

  NiftiHeader h;
  h.swapped = swap;
  h.sizeof_hdr = 348;
  std::memcpy(h.magic.data(), raw.data() + 344, 4);
  const bool magic_ok = h.magic[0] == 'n' && h.magic[1] == '+' &&
                        h.magic[2] == '1' && h.magic[3] == '\0';
  if (!magic_ok) {
    throw BadMagic(path + ": magic is not \"n+1\" (detached headers and "
                          "NIfTI-2 are not supported)");
  }
  for (int i = 0; i < 8; ++i) {
    h.dim[i] = load_at<std::int16_t>(raw, 40 + 2 * i, swap);
    h.pixdim[i] = load_at<float>(raw, 76 + 4 * i, swap);
  }
  h.datatype = load_at<std::int16_t>(raw, 70, swap);
  h.bitpix = load_at<std::int16_t>(raw, 72, swap);
  h.vox_offset = load_at<float>(raw, 108, swap);
  h.scl_slope = load_at<float>(raw, 112, swap);
  h.scl_inter = load_at<float>(raw, 116, swap);
  h.sform_code = load_at<std::int16_t>(raw, 254, swap);
  for (int i = 0; i < 4; ++i) {
    h.srow_x[i] = load_at<float>(raw, 280 + 4 * i, swap);
    h.srow_y[i] = load_at<float>(raw, 296 + 4 * i, swap);
    h.srow_z[i] = load_at<float>(raw, 312 + 4 * i, swap);
  }

  if (!datatype_supported(h.datatype)) {
    throw UnsupportedDatatype(path + ": datatype code " +
                              std::to_string(h.datatype) +
                              " not in {2,4,16,64}");
  }
  if (h.bitpix != nifti_bitpix(static_cast<NiftiDatatype>(h.datatype))) {
    throw HeaderInconsistent(path + ": bitpix inconsistent with datatype");
  }
  if (h.dim[0] < 3 || h.dim[0] > 4) {
    throw HeaderInconsistent(path + ": dim[0] must be 3 or 4");
  }
  for (int a = 1; a <= 3; ++a) {
    if (h.dim[a] < 1) {
      throw HeaderInconsistent(path + ": dim[" + std::to_string(a) +
                               "] must be >= 1");
    }
    if (!(h.pixdim[a] > 0.0f) || !std::isfinite(h.pixdim[a])) {
      throw HeaderInconsistent(path + ": pixdim must be positive and finite");
    }
  }
  if (h.vox_offset < kHeaderSize) {
    throw HeaderInconsistent(path + ": vox_offset precedes header end");
  }
  return h;
}

// Decodes `count` scalars starting at `off`, applying scl scaling.
Eigen::ArrayXd decode_payload(const std::vector<char> &raw, std::size_t off,
                              std::int64_t count, const NiftiHeader &h,
                              const std::string &path) {
  const auto dt = static_cast<NiftiDatatype>(h.datatype);
  const std::size_t bytes =
      static_cast<std::size_t>(count) * (nifti_bitpix(dt) / 8);
  if (raw.size() < off + bytes) {
    throw TruncatedFile(path + ": payload shorter than header promises");
  }
  Eigen::ArrayXd out(count);
  const bool swap = h.swapped;
  const double slope = h.scl_slope;
  const double inter = h.scl_inter;
  const bool scale = h.scl_slope != 0.0f;
  for (std::int64_t n = 0; n < count; ++n) {
    double v = 0.0;
    switch (dt) {
    case NiftiDatatype::Uint8: {
      std::uint8_t r;
      std::memcpy(&r, raw.data() + off + n, 1);
      v = r;
      break;
    }
    case NiftiDatatype::Int16:
      v = load_at<std::int16_t>(raw, off + 2 * n, swap);
      break;
    case NiftiDatatype::Float32:
      v = load_at<float>(raw, off + 4 * n, swap);
      break;
    case NiftiDatatype::Float64:
      v = load_at<double>(raw, off + 8 * n, swap);
      break;
    }
    out[n] = scale ? v * slope + inter : v;
  }
  return out;
}

std::vector<char> read_all(const std::string &path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(path + ": cannot open for reading");
  f.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(f.tellg());
  f.seekg(0);
  std::vector<char> raw(size);
  if (size > 0 && !f.read(raw.data(), static_cast<std::streamsize>(size))) {
    throw IoError(path + ": read failed");
  }
  return raw;
}

Volume3D header_geometry(const NiftiHeader &h) {
  Volume3D vol;
  vol.dims = {h.dim[1], h.dim[2], h.dim[3]};
  vol.spacing = Eigen::Vector3d(h.pixdim[1], h.pixdim[2], h.pixdim[3]);
  vol.affine = Eigen::Matrix4d::Identity();
  if (h.sform_code > 0) {
    for (int c = 0; c < 4; ++c) {
      vol.affine(0, c) = h.srow_x[c];
      vol.affine(1, c) = h.srow_y[c];
      vol.affine(2, c) = h.srow_z[c];
    }
  } else {
    vol.affine(0, 0) = vol.spacing.x();
    vol.affine(1, 1) = vol.spacing.y();
    vol.affine(2, 2) = vol.spacing.z();
  }
  return vol;
}

std::vector<char> build_file(const Volume3D &vol, NiftiDatatype datatype,
                             int nt) {
  NiftiHeader h;
  h.dim[0] = nt > 1 ? 4 : 3;
  h.dim[1] = static_cast<std::int16_t>(vol.dims.nx);
  h.dim[2] = static_cast<std::int16_t>(vol.dims.ny);
  h.dim[3] = static_cast<std::int16_t>(vol.dims.nz);
  h.dim[4] = static_cast<std::int16_t>(nt > 1 ? nt : 1);
  for (int i = 5; i < 8; ++i) h.dim[i] = 1;
  h.pixdim[0] = 1.0f;
  h.pixdim[1] = static_cast<float>(vol.spacing.x());
  h.pixdim[2] = static_cast<float>(vol.spacing.y());
  h.pixdim[3] = static_cast<float>(vol.spacing.z());
  for (int i = 4; i < 8; ++i) h.pixdim[i] = 1.0f;
  h.datatype = static_cast<std::int16_t>(datatype);
  h.bitpix = static_cast<std::int16_t>(nifti_bitpix(datatype));

  const std::int64_t count = vol.dims.count() * nt;
  const std::size_t payload =
      static_cast<std::size_t>(count) * (h.bitpix / 8);
  std::vector<char> buf(kVoxOffset + payload, 0);

  store_at<std::int32_t>(buf, 0, 348);
  for (int i = 0; i < 8; ++i) {
    store_at<std::int16_t>(buf, 40 + 2 * i, h.dim[i]);
    store_at<float>(buf, 76 + 4 * i, h.pixdim[i]);
  }
  store_at<std::int16_t>(buf, 70, h.datatype);
  store_at<std::int16_t>(buf, 72, h.bitpix);
  store_at<float>(buf, 108, static_cast<float>(kVoxOffset));
  store_at<float>(buf, 112, 1.0f); // scl_slope
  store_at<float>(buf, 116, 0.0f); // scl_inter
  store_at<std::int16_t>(buf, 252, 0); // qform_code
  store_at<std::int16_t>(buf, 254, 1); // sform_code
  for (int c = 0; c < 4; ++c) {
    store_at<float>(buf, 280 + 4 * c, static_cast<float>(vol.affine(0, c)));
    store_at<float>(buf, 296 + 4 * c, static_cast<float>(vol.affine(1, c)));
    store_at<float>(buf, 312 + 4 * c, static_cast<float>(vol.affine(2, c)));
  }
  buf[344] = 'n';
  buf[345] = '+';
  buf[346] = '1';
  buf[347] = '\0';
  // bytes 348..351 stay zero: no header extension.
  return buf;
}

void encode_values(std::vector<char> &buf, const Eigen::ArrayXd &values,
                   NiftiDatatype datatype, std::size_t off,
                   const std::string &path) {
  for (std::int64_t n = 0; n < values.size(); ++n) {
    const double v = values[n];
    if (!std::isfinite(v)) {
      throw OverflowError(path + ": non-finite voxel value cannot be written");
    }
    switch (datatype) {
    case NiftiDatatype::Uint8: {
      const double r = std::nearbyint(std::clamp(v, 0.0, 255.0));
      const auto u = static_cast<std::uint8_t>(r);
      std::memcpy(buf.data() + off + n, &u, 1);
      break;
    }
    case NiftiDatatype::Int16: {
      const double r = std::nearbyint(std::clamp(v, -32768.0, 32767.0));
      store_at<std::int16_t>(buf, off + 2 * n, static_cast<std::int16_t>(r));
      break;
    }
    case NiftiDatatype::Float32: {
      if (std::abs(v) > static_cast<double>(std::numeric_limits<float>::max())) {
        throw OverflowError(path + ": value " + std::to_string(v) +
                            " is not representable as float32");
      }
      store_at<float>(buf, off + 4 * n, static_cast<float>(v));
      break;
    }
    case NiftiDatatype::Float64:
      store_at<double>(buf, off + 8 * n, v);
      break;
    }
  }
}

void write_file(const std::vector<char> &buf, const std::string &path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(path + ": cannot open for writing");
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError(path + ": write failed");
}

} // namespace

std::pair<Volume3D, NiftiHeader> read_nifti(const std::string &path) {
  const auto raw = read_all(path);
  const NiftiHeader h = parse_header(raw, path);
  const int nt = h.dim[0] == 4 ? h.dim[4] : 1;
  if (nt != 1) {
    throw HeaderInconsistent(path + ": expected a scalar volume, found " +
                             std::to_string(nt) + " slabs (use the 4D reader)");
  }
  Volume3D vol = header_geometry(h);
  vol.data = decode_payload(raw, static_cast<std::size_t>(h.vox_offset),
                            vol.dims.count(), h, path);
  return {std::move(vol), h};
}

void write_nifti(const Volume3D &vol, const std::string &path,
                 NiftiDatatype datatype) {
  if (vol.data.size() != vol.dims.count()) {
    throw ShapeMismatch(path + ": data length does not match dims");
  }
  auto buf = build_file(vol, datatype, 1);
  encode_values(buf, vol.data, datatype, kVoxOffset, path);
  write_file(buf, path);
}

void write_nifti_4d(const std::vector<Volume3D> &slabs,
                    const std::string &path, NiftiDatatype datatype) {
  if (slabs.empty()) throw EmptyInput(path + ": no slabs to write");
  for (const auto &s : slabs) {
    if (!(s.dims == slabs.front().dims)) {
      throw ShapeMismatch(path + ": slabs have differing dims");
    }
  }
  auto buf = build_file(slabs.front(), datatype,
                        static_cast<int>(slabs.size()));
  const std::int64_t per = slabs.front().dims.count();
  const std::size_t stride =
      static_cast<std::size_t>(per) * (nifti_bitpix(datatype) / 8);
  for (std::size_t s = 0; s < slabs.size(); ++s) {
    encode_values(buf, slabs[s].data, datatype, kVoxOffset + s * stride, path);
  }
  write_file(buf, path);
}

std::pair<std::vector<Volume3D>, NiftiHeader>
read_nifti_4d(const std::string &path) {
  const auto raw = read_all(path);
  const NiftiHeader h = parse_header(raw, path);
  const int nt = h.dim[0] == 4 ? std::max<int>(1, h.dim[4]) : 1;
  const Volume3D geom = header_geometry(h);
  const std::int64_t per = geom.dims.count();
  const Eigen::ArrayXd all =
      decode_payload(raw, static_cast<std::size_t>(h.vox_offset),
                     per * nt, h, path);
  std::vector<Volume3D> slabs;
  slabs.reserve(static_cast<std::size_t>(nt));
  for (int t = 0; t < nt; ++t) {
    Volume3D v = geom;
    v.data = all.segment(t * per, per);
    slabs.push_back(std::move(v));
  }
  return {std::move(slabs), h};
}

} // namespace jacfuse
