#include "ctxseg/io.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>

namespace ctxseg {

namespace {

#pragma pack(push, 1)
struct NiftiHeader {
  int sizeof_hdr;
  char data_type[10];
  char db_name[18];
  int extents;
  short session_error;
  char regular;
  char dim_info;
  short dim[8];
  float intent_p1, intent_p2, intent_p3;
  short intent_code;
  short datatype;
  short bitpix;
  short slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  short slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  int glmax, glmin;
  char descrip[80];
  char aux_file[24];
  short qform_code;
  short sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)

static_assert(sizeof(NiftiHeader) == 348, "NIfTI-1 header must be 348 bytes");

constexpr short kDtUint8 = 2;
constexpr short kDtInt16 = 4;
constexpr short kDtInt32 = 8;
constexpr short kDtFloat32 = 16;
constexpr short kDtFloat64 = 64;
constexpr short kDtUint16 = 512;

bool has_suffix(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

std::vector<char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  require(in.good(), "io", "cannot open " + path);
  auto n = in.tellg();
  in.seekg(0);
  std::vector<char> buf(static_cast<size_t>(n));
  in.read(buf.data(), n);
  require(in.gcount() == n, "io", "short read from " + path);
  return buf;
}

std::vector<char> gunzip(const std::vector<char>& in) {
  z_stream zs{};
  require(inflateInit2(&zs, 15 + 16) == Z_OK, "io", "zlib init failed");
  std::vector<char> out;
  out.resize(in.size() * 4 + 1024);
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
  zs.avail_in = static_cast<uInt>(in.size());
  size_t written = 0;
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    if (written == out.size()) out.resize(out.size() * 2);
    zs.next_out = reinterpret_cast<Bytef*>(out.data() + written);
    zs.avail_out = static_cast<uInt>(out.size() - written);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      fail("io", "gzip inflate failed (rc=" + std::to_string(rc) + ")");
    }
    written = out.size() - zs.avail_out;
  }
  inflateEnd(&zs);
  out.resize(written);
  return out;
}

std::vector<char> gzip(const std::vector<char>& in) {
  z_stream zs{};
  require(deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8,
                       Z_DEFAULT_STRATEGY) == Z_OK,
          "io", "zlib init failed");
  std::vector<char> out(deflateBound(&zs, static_cast<uLong>(in.size())));
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = reinterpret_cast<Bytef*>(out.data());
  zs.avail_out = static_cast<uInt>(out.size());
  int rc = deflate(&zs, Z_FINISH);
  require(rc == Z_STREAM_END, "io", "gzip deflate failed");
  out.resize(out.size() - zs.avail_out);
  deflateEnd(&zs);
  return out;
}

// Dominant world axis of an affine column; errors on oblique affines.
void dominant_axis(const double col[3], int* world_axis, bool* negative, double* scale) {
  int best = 0;
  for (int i = 1; i < 3; ++i)
    if (std::abs(col[i]) > std::abs(col[best])) best = i;
  double major = std::abs(col[best]);
  require(major > 0, "io", "degenerate affine column");
  for (int i = 0; i < 3; ++i)
    if (i != best)
      require(std::abs(col[i]) <= 1e-3 * major, "io",
              "oblique NIfTI affine not supported; resample the file upstream");
  *world_axis = best;
  *negative = col[best] < 0;
  *scale = major;
}

}  // namespace

Volume load_nifti(const std::string& path) {
  std::vector<char> bytes = read_file_bytes(path);
  if (bytes.size() >= 2 && static_cast<unsigned char>(bytes[0]) == 0x1f &&
      static_cast<unsigned char>(bytes[1]) == 0x8b)
    bytes = gunzip(bytes);
  require(bytes.size() >= sizeof(NiftiHeader), "io", "file too small for NIfTI header: " + path);

  NiftiHeader hdr;
  std::memcpy(&hdr, bytes.data(), sizeof(hdr));
  require(hdr.sizeof_hdr == 348, "io", "not a little-endian NIfTI-1 file: " + path);
  require(std::strncmp(hdr.magic, "n+1", 3) == 0 || std::strncmp(hdr.magic, "ni1", 3) == 0, "io",
          "bad NIfTI magic in " + path);
  require(hdr.dim[0] >= 3, "io", "NIfTI with fewer than 3 dims: " + path);
  for (int d = 4; d <= hdr.dim[0]; ++d)
    require(hdr.dim[d] <= 1, "io", "multi-frame NIfTI not supported: " + path);

  const int nx = hdr.dim[1], ny = hdr.dim[2], nz = hdr.dim[3];
  Volume v;
  v.dims = {nz, ny, nx};  // stored (d,h,w) = (z,y,x); x varies fastest on disk

  // Voxel-to-world direction columns, from sform when present, else qform,
  // else an identity frame with pixdim spacing.
  double col[3][3];  // col[voxel_axis][world_axis]
  if (hdr.sform_code > 0) {
    for (int vx = 0; vx < 3; ++vx) {
      col[vx][0] = hdr.srow_x[vx];
      col[vx][1] = hdr.srow_y[vx];
      col[vx][2] = hdr.srow_z[vx];
    }
  } else if (hdr.qform_code > 0) {
    double b = hdr.quatern_b, c = hdr.quatern_c, d = hdr.quatern_d;
    double a2 = 1.0 - (b * b + c * c + d * d);
    double a = a2 > 0 ? std::sqrt(a2) : 0.0;
    double R[3][3] = {{a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c},
                      {2 * b * c + 2 * a * d, a * a + c * c - b * b - d * d, 2 * c * d - 2 * a * b},
                      {2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a + d * d - b * b - c * c}};
    double qfac = hdr.pixdim[0] < 0 ? -1.0 : 1.0;
    for (int vx = 0; vx < 3; ++vx)
      for (int w = 0; w < 3; ++w)
        col[vx][w] = R[w][vx] * hdr.pixdim[vx + 1] * (vx == 2 ? qfac : 1.0);
  } else {
    for (int vx = 0; vx < 3; ++vx)
      for (int w = 0; w < 3; ++w) col[vx][w] = (vx == w) ? hdr.pixdim[vx + 1] : 0.0;
  }

  // Stored axis s corresponds to voxel axis 2-s. Canonical stored order is
  // (+S,+A,+R) == world (z,y,x), matching the (d,h,w) layout.
  int world_of_stored[3];
  bool neg_of_stored[3];
  double scale_of_stored[3];
  for (int s = 0; s < 3; ++s) {
    int vx = 2 - s;
    dominant_axis(col[vx], &world_of_stored[s], &neg_of_stored[s], &scale_of_stored[s]);
    v.spacing_mm[s] = scale_of_stored[s];
  }
  bool claimed[3] = {false, false, false};
  for (int s = 0; s < 3; ++s) {
    require(!claimed[world_of_stored[s]], "io", "affine maps two axes to one direction: " + path);
    claimed[world_of_stored[s]] = true;
  }
  for (int a = 0; a < 3; ++a) {
    int want_world = 2 - a;  // canonical axis 0 -> world z(S), 1 -> y(A), 2 -> x(R)
    for (int s = 0; s < 3; ++s)
      if (world_of_stored[s] == want_world) {
        v.orientation.perm[static_cast<size_t>(a)] = s;
        v.orientation.flip[static_cast<size_t>(a)] = neg_of_stored[s];
      }
  }

  const size_t n = static_cast<size_t>(voxels_of(v.dims));
  const size_t offset = static_cast<size_t>(hdr.vox_offset);
  require(offset >= sizeof(NiftiHeader), "io", "bad vox_offset in " + path);
  v.values.resize(n);
  const char* src = bytes.data() + offset;

  auto need = [&](size_t elem) {
    require(bytes.size() >= offset + n * elem, "io", "truncated NIfTI data in " + path);
  };
  switch (hdr.datatype) {
    case kDtUint8: {
      need(1);
      for (size_t i = 0; i < n; ++i)
        v.values[i] = static_cast<float>(reinterpret_cast<const unsigned char*>(src)[i]);
      break;
    }
    case kDtInt16: {
      need(2);
      const std::int16_t* p = reinterpret_cast<const std::int16_t*>(src);
      for (size_t i = 0; i < n; ++i) v.values[i] = static_cast<float>(p[i]);
      break;
    }
    case kDtUint16: {
      need(2);
      const std::uint16_t* p = reinterpret_cast<const std::uint16_t*>(src);
      for (size_t i = 0; i < n; ++i) v.values[i] = static_cast<float>(p[i]);
      break;
    }
    case kDtInt32: {
      need(4);
      const std::int32_t* p = reinterpret_cast<const std::int32_t*>(src);
      for (size_t i = 0; i < n; ++i) v.values[i] = static_cast<float>(p[i]);
      break;
    }
    case kDtFloat32: {
      need(4);
      std::memcpy(v.values.data(), src, n * sizeof(float));
      break;
    }
    case kDtFloat64: {
      need(8);
      const double* p = reinterpret_cast<const double*>(src);
      for (size_t i = 0; i < n; ++i) v.values[i] = static_cast<float>(p[i]);
      break;
    }
    default:
      fail("io", "unsupported NIfTI datatype " + std::to_string(hdr.datatype) + " in " + path);
  }

  if (hdr.scl_slope != 0.f && (hdr.scl_slope != 1.f || hdr.scl_inter != 0.f))
    for (auto& x : v.values) x = hdr.scl_slope * x + hdr.scl_inter;
  return v;
}

void save_nifti(const Volume& v, const std::string& path) {
  require(v.orientation.is_canonical(), "io",
          "save_nifti expects a canonical-orientation volume; call reorient first");
  NiftiHeader hdr{};
  hdr.sizeof_hdr = 348;
  hdr.regular = 'r';
  hdr.dim[0] = 3;
  hdr.dim[1] = static_cast<short>(v.dims[2]);
  hdr.dim[2] = static_cast<short>(v.dims[1]);
  hdr.dim[3] = static_cast<short>(v.dims[0]);
  for (int d = 4; d < 8; ++d) hdr.dim[d] = 1;
  hdr.datatype = kDtFloat32;
  hdr.bitpix = 32;
  hdr.pixdim[0] = 1.f;
  hdr.pixdim[1] = static_cast<float>(v.spacing_mm[2]);
  hdr.pixdim[2] = static_cast<float>(v.spacing_mm[1]);
  hdr.pixdim[3] = static_cast<float>(v.spacing_mm[0]);
  hdr.vox_offset = 352.f;
  hdr.scl_slope = 1.f;
  hdr.sform_code = 1;
  hdr.qform_code = 0;
  hdr.srow_x[0] = static_cast<float>(v.spacing_mm[2]);
  hdr.srow_y[1] = static_cast<float>(v.spacing_mm[1]);
  hdr.srow_z[2] = static_cast<float>(v.spacing_mm[0]);
  std::memcpy(hdr.magic, "n+1", 4);

  std::vector<char> bytes(352 + v.values.size() * sizeof(float), 0);
  std::memcpy(bytes.data(), &hdr, sizeof(hdr));
  std::memcpy(bytes.data() + 352, v.values.data(), v.values.size() * sizeof(float));

  if (has_suffix(path, ".gz")) bytes = gzip(bytes);
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "io", "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), "io", "short write to " + path);
}

}  // namespace ctxseg
