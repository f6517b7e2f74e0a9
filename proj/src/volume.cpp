#include "vertseg/volume.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"
#include "vertseg/error.hpp"

namespace F = torch::nn::functional;
namespace fs = std::filesystem;

namespace vertseg {

std::string_view to_string(Plane plane) {
  switch (plane) {
    case Plane::Sagittal: return "sagittal";
    case Plane::Coronal: return "coronal";
    case Plane::Axial: return "axial";
  }
  return "?";
}

std::string_view display_name(Plane plane) {
  switch (plane) {
    case Plane::Sagittal: return "Sagittal";
    case Plane::Coronal: return "Coronal";
    case Plane::Axial: return "Axial";
  }
  return "?";
}

Plane parse_plane(std::string_view name) {
  std::string lower(name);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "sagittal") return Plane::Sagittal;
  if (lower == "coronal") return Plane::Coronal;
  if (lower == "axial") return Plane::Axial;
  throw ConfigError("unknown plane '" + std::string(name) + "' (expected sagittal, coronal or axial)");
}

int Volume::normal_axis(Plane plane) const {
  for (int a = 0; a < 3; ++a) {
    if (axes[a] == plane) return a;
  }
  throw FormatError("volume axes tag does not contain plane " + std::string(to_string(plane)));
}

void Volume::validate() const {
  if (!data.defined() || data.dim() != 3) throw ShapeError("volume data must be a rank-3 tensor");
  for (int a = 0; a < 3; ++a) {
    if (data.size(a) < 1) throw ShapeError("volume extents must be positive");
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a])) {
      throw FormatError("volume spacing must be positive (axis " + std::to_string(a) + " has " +
                        std::to_string(spacing[a]) + ")");
    }
  }
  if (axes[0] == axes[1] || axes[1] == axes[2] || axes[0] == axes[2]) {
    throw FormatError("volume axes tag is not a permutation");
  }
}

namespace {

constexpr int kNiftiHeaderSize = 348;
constexpr int kNiftiVoxOffset = 352;
constexpr char kRawMagic[8] = {'V', 'S', 'E', 'G', 'V', 'O', 'L', '1'};

// Offsets into the NIfTI-1 header.
namespace off {
constexpr int sizeof_hdr = 0, dim = 40, datatype = 70, bitpix = 72, pixdim = 76, vox_offset = 108,
              scl_slope = 112, scl_inter = 116, xyzt_units = 123, descrip = 148, qform_code = 252,
              sform_code = 254, quatern_b = 256, qoffset_x = 268, srow_x = 280, magic = 344;
}

bool has_suffix(const fs::path& p, std::string_view suffix) {
  const auto s = p.string();
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_nifti(const fs::path& p) { return has_suffix(p, ".nii") || has_suffix(p, ".nii.gz"); }

std::string read_all_maybe_gz(const fs::path& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open " + path.string());
  std::string out;
  char buf[1 << 16];
  int n = 0;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.append(buf, static_cast<size_t>(n));
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw FormatError("corrupt compressed stream in " + path.string());
  return out;
}

class HeaderReader {
 public:
  HeaderReader(const std::string& bytes, bool swap) : bytes_(bytes), swap_(swap) {}

  template <typename T>
  T get(int offset) const {
    T v;
    std::memcpy(&v, bytes_.data() + offset, sizeof(T));
    if (swap_ && sizeof(T) > 1) {
      auto* p = reinterpret_cast<unsigned char*>(&v);
      std::reverse(p, p + sizeof(T));
    }
    return v;
  }

 private:
  const std::string& bytes_;
  bool swap_;
};

template <typename T>
torch::Tensor decode_voxels(const char* src, int64_t count, bool swap) {
  auto out = torch::empty({count}, torch::kFloat32);
  auto* dst = out.data_ptr<float>();
  for (int64_t i = 0; i < count; ++i) {
    T v;
    std::memcpy(&v, src + i * sizeof(T), sizeof(T));
    if (swap && sizeof(T) > 1) {
      auto* p = reinterpret_cast<unsigned char*>(&v);
      std::reverse(p, p + sizeof(T));
    }
    dst[i] = static_cast<float>(v);
  }
  return out;
}

struct Orientation {
  std::array<double, 3> spacing;
  std::array<Plane, 3> axes;
  std::array<int, 3> sign;
  std::array<double, 3> origin;
};

// Reduces a 3x4 voxel-to-world affine to permutation + spacing + signs.
Orientation reduce_affine(const std::array<std::array<double, 4>, 3>& m, const fs::path& path) {
  Orientation o{};
  std::array<bool, 3> used{false, false, false};
  for (int j = 0; j < 3; ++j) {
    const double norm = std::sqrt(m[0][j] * m[0][j] + m[1][j] * m[1][j] + m[2][j] * m[2][j]);
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw FormatError(path.string() + ": spacing must be positive (axis " + std::to_string(j) + ")");
    }
    int dominant = 0;
    for (int r = 1; r < 3; ++r) {
      if (std::abs(m[r][j]) > std::abs(m[dominant][j])) dominant = r;
    }
    const double cosine = std::abs(m[dominant][j]) / norm;
    if (cosine < 1.0 - 1e-4 || used[dominant]) {
      std::ostringstream os;
      os << path.string() << ": oblique orientation not supported (array axis " << j << " direction ("
         << m[0][j] / norm << ", " << m[1][j] / norm << ", " << m[2][j] / norm
         << ") is not aligned with a world axis)";
      throw FormatError(os.str());
    }
    used[dominant] = true;
    o.spacing[j] = norm;
    o.axes[j] = static_cast<Plane>(dominant);
    o.sign[j] = m[dominant][j] < 0 ? -1 : 1;
  }
  for (int r = 0; r < 3; ++r) o.origin[r] = m[r][3];
  return o;
}

Volume read_nifti(const fs::path& path) {
  const std::string bytes = read_all_maybe_gz(path);
  if (bytes.size() < kNiftiHeaderSize) throw FormatError(path.string() + ": truncated NIfTI header");
  int32_t hdr_size;
  std::memcpy(&hdr_size, bytes.data(), 4);
  bool swap = false;
  if (hdr_size != kNiftiHeaderSize) {
    if (static_cast<int32_t>(__builtin_bswap32(static_cast<uint32_t>(hdr_size))) != kNiftiHeaderSize) throw FormatError(path.string() + ": not a NIfTI-1 file");
    swap = true;
  }
  HeaderReader h(bytes, swap);
  if (std::memcmp(bytes.data() + off::magic, "n+1", 3) != 0) {
    throw FormatError(path.string() + ": only single-file NIfTI-1 (magic n+1) is supported");
  }
  std::array<int16_t, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[i] = h.get<int16_t>(off::dim + 2 * i);
  if (dim[0] < 3 || dim[0] > 7) throw FormatError(path.string() + ": unsupported dimensionality");
  for (int i = 4; i <= dim[0]; ++i) {
    if (dim[i] > 1) throw FormatError(path.string() + ": only 3D volumes are supported");
  }
  const int64_t nx = dim[1], ny = dim[2], nz = dim[3];
  if (nx < 1 || ny < 1 || nz < 1) throw FormatError(path.string() + ": non-positive extent");
  std::array<float, 8> pixdim{};
  for (int i = 0; i < 8; ++i) pixdim[i] = h.get<float>(off::pixdim + 4 * i);

  const auto datatype = h.get<int16_t>(off::datatype);
  const auto vox_offset = static_cast<int64_t>(h.get<float>(off::vox_offset));
  const int64_t count = nx * ny * nz;
  int64_t elem = 0;
  switch (datatype) {
    case 2: case 256: elem = 1; break;
    case 4: case 512: elem = 2; break;
    case 8: case 768: case 16: elem = 4; break;
    case 64: elem = 8; break;
    default: throw FormatError(path.string() + ": unsupported NIfTI datatype " + std::to_string(datatype));
  }
  if (vox_offset < kNiftiHeaderSize || static_cast<int64_t>(bytes.size()) < vox_offset + count * elem) {
    throw FormatError(path.string() + ": truncated voxel data");
  }
  const char* src = bytes.data() + vox_offset;
  torch::Tensor flat;
  switch (datatype) {
    case 2: flat = decode_voxels<uint8_t>(src, count, swap); break;
    case 256: flat = decode_voxels<int8_t>(src, count, swap); break;
    case 4: flat = decode_voxels<int16_t>(src, count, swap); break;
    case 512: flat = decode_voxels<uint16_t>(src, count, swap); break;
    case 8: flat = decode_voxels<int32_t>(src, count, swap); break;
    case 768: flat = decode_voxels<uint32_t>(src, count, swap); break;
    case 16: flat = decode_voxels<float>(src, count, swap); break;
    case 64: flat = decode_voxels<double>(src, count, swap); break;
  }
  const float slope = h.get<float>(off::scl_slope);
  const float inter = h.get<float>(off::scl_inter);
  if (slope != 0.0f && std::isfinite(slope) && (slope != 1.0f || inter != 0.0f)) {
    flat = flat * slope + inter;
  }

  std::array<std::array<double, 4>, 3> m{};
  const auto sform = h.get<int16_t>(off::sform_code);
  const auto qform = h.get<int16_t>(off::qform_code);
  if (sform > 0) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 4; ++c) m[r][c] = h.get<float>(off::srow_x + 16 * r + 4 * c);
    }
  } else if (qform > 0) {
    const double b = h.get<float>(off::quatern_b), c = h.get<float>(off::quatern_b + 4),
                 d = h.get<float>(off::quatern_b + 8);
    const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
    const double R[3][3] = {{a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
                            {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
                            {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b}};
    const double qfac = pixdim[0] < 0 ? -1.0 : 1.0;
    const double scale[3] = {pixdim[1], pixdim[2], qfac * pixdim[3]};
    for (int r = 0; r < 3; ++r) {
      for (int col = 0; col < 3; ++col) m[r][col] = R[r][col] * scale[col];
      m[r][3] = h.get<float>(off::qoffset_x + 4 * r);
    }
  } else {
    for (int r = 0; r < 3; ++r) m[r][r] = pixdim[r + 1];
  }
  const auto o = reduce_affine(m, path);

  Volume v;
  v.data = flat.view({nz, ny, nx}).permute({2, 1, 0}).contiguous();
  v.spacing = o.spacing;
  v.axes = o.axes;
  v.direction_sign = o.sign;
  v.origin = o.origin;
  v.validate();
  return v;
}

void write_nifti(const Volume& v, const fs::path& path, VoxelType type) {
  std::string header(kNiftiVoxOffset, '\0');
  auto put = [&](int offset, auto value) { std::memcpy(header.data() + offset, &value, sizeof value); };
  put(off::sizeof_hdr, int32_t{kNiftiHeaderSize});
  const int16_t dims[8] = {3, static_cast<int16_t>(v.extent(0)), static_cast<int16_t>(v.extent(1)),
                           static_cast<int16_t>(v.extent(2)), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) put(off::dim + 2 * i, dims[i]);
  int16_t datatype = 16, bitpix = 32;
  if (type == VoxelType::UInt8) datatype = 2, bitpix = 8;
  if (type == VoxelType::Int16) datatype = 4, bitpix = 16;
  put(off::datatype, datatype);
  put(off::bitpix, bitpix);
  const float pixdim[8] = {1.0f, static_cast<float>(v.spacing[0]), static_cast<float>(v.spacing[1]),
                           static_cast<float>(v.spacing[2]), 1.0f, 1.0f, 1.0f, 1.0f};
  for (int i = 0; i < 8; ++i) put(off::pixdim + 4 * i, pixdim[i]);
  put(off::vox_offset, static_cast<float>(kNiftiVoxOffset));
  put(off::scl_slope, 1.0f);
  put(off::scl_inter, 0.0f);
  header[off::xyzt_units] = 2;  // millimetres
  std::memcpy(header.data() + off::descrip, "vertseg", 7);
  put(off::qform_code, int16_t{0});
  put(off::sform_code, int16_t{1});
  float srow[3][4] = {};
  for (int a = 0; a < 3; ++a) {
    const int r = static_cast<int>(v.axes[a]);
    srow[r][a] = static_cast<float>(v.direction_sign[a] * v.spacing[a]);
  }
  for (int r = 0; r < 3; ++r) srow[r][3] = static_cast<float>(v.origin[r]);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) put(off::srow_x + 16 * r + 4 * c, srow[r][c]);
  }
  std::memcpy(header.data() + off::magic, "n+1\0", 4);

  // NIfTI stores x fastest.
  auto fortran = v.data.permute({2, 1, 0}).contiguous();
  std::string payload;
  if (type == VoxelType::Float32) {
    auto t = fortran.to(torch::kFloat32).contiguous();
    payload.assign(static_cast<const char*>(t.data_ptr()), t.numel() * 4);
  } else if (type == VoxelType::Int16) {
    auto t = fortran.round().clamp(-32768, 32767).to(torch::kInt16).contiguous();
    payload.assign(static_cast<const char*>(t.data_ptr()), t.numel() * 2);
  } else {
    auto t = fortran.round().clamp(0, 255).to(torch::kUInt8).contiguous();
    payload.assign(static_cast<const char*>(t.data_ptr()), t.numel());
  }

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (has_suffix(path, ".gz")) {
    gzFile f = gzopen(path.c_str(), "wb6");
    if (!f) throw IoError("cannot write " + path.string());
    const bool ok = gzwrite(f, header.data(), static_cast<unsigned>(header.size())) == static_cast<int>(header.size()) &&
                    gzwrite(f, payload.data(), static_cast<unsigned>(payload.size())) == static_cast<int>(payload.size());
    gzclose(f);
    if (!ok) throw IoError("failed writing " + path.string());
  } else {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("failed writing " + path.string());
  }
}

void write_raw(const Volume& v, const fs::path& path) {
  nlohmann::json meta{{"shape", v.data.sizes().vec()},
                      {"spacing", v.spacing},
                      {"axes", {to_string(v.axes[0]), to_string(v.axes[1]), to_string(v.axes[2])}},
                      {"origin", v.origin},
                      {"direction_sign", v.direction_sign}};
  const std::string text = meta.dump();
  const uint64_t len = text.size();
  auto data = v.data.to(torch::kFloat32).contiguous();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kRawMagic, 8);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(len));
  out.write(static_cast<const char*>(data.data_ptr()), static_cast<std::streamsize>(data.numel() * 4));
  if (!out) throw IoError("failed writing " + path.string());
}

Volume read_raw(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[8];
  uint64_t len = 0;
  if (!in.read(magic, 8) || std::memcmp(magic, kRawMagic, 8) != 0 || !in.read(reinterpret_cast<char*>(&len), 8) ||
      len > (1u << 20)) {
    throw FormatError(path.string() + ": not a vertseg raw volume");
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  Volume v;
  try {
    auto meta = nlohmann::json::parse(text);
    auto shape = meta.at("shape").get<std::vector<int64_t>>();
    if (shape.size() != 3) throw FormatError(path.string() + ": raw volume must be 3D");
    meta.at("spacing").get_to(v.spacing);
    for (int a = 0; a < 3; ++a) v.axes[a] = parse_plane(meta.at("axes")[a].get<std::string>());
    meta.at("origin").get_to(v.origin);
    meta.at("direction_sign").get_to(v.direction_sign);
    v.data = torch::empty(shape, torch::kFloat32);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad raw header: " + e.what());
  }
  if (!in.read(static_cast<char*>(v.data.data_ptr()), static_cast<std::streamsize>(v.data.numel() * 4))) {
    throw FormatError(path.string() + ": truncated raw volume");
  }
  v.validate();
  return v;
}

}  // namespace

Volume load_volume(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("missing volume file: " + path.string());
  return is_nifti(path) ? read_nifti(path) : read_raw(path);
}

void save_volume(const Volume& volume, const fs::path& path, VoxelType type) {
  volume.validate();
  if (is_nifti(path)) {
    write_nifti(volume, path, type);
  } else {
    write_raw(volume, path);
  }
}

Volume resample_to_unit_spacing(const Volume& volume, Interpolation mode) {
  volume.validate();
  Volume out = volume;
  bool unit = true;
  for (double s : volume.spacing) unit = unit && std::abs(s - 1.0) <= 1e-6;
  if (unit) {
    out.data = volume.data.clone();
    out.spacing = {1.0, 1.0, 1.0};
    return out;
  }
  std::vector<int64_t> size(3);
  for (int a = 0; a < 3; ++a) {
    size[a] = std::max<int64_t>(1, std::llround(static_cast<double>(volume.extent(a)) * volume.spacing[a]));
  }
  auto opts = F::InterpolateFuncOptions().size(size);
  if (mode == Interpolation::Linear) {
    opts.mode(torch::kTrilinear).align_corners(false);
  } else {
    opts.mode(torch::kNearestExact).align_corners(false);
  }
  out.data = F::interpolate(volume.data.to(torch::kFloat32).unsqueeze(0).unsqueeze(0), opts).squeeze(0).squeeze(0).contiguous();
  for (int a = 0; a < 3; ++a) {
    const double ratio = static_cast<double>(volume.extent(a)) / static_cast<double>(size[a]);
    const int r = static_cast<int>(volume.axes[a]);
    out.origin[r] += volume.direction_sign[a] * volume.spacing[a] * (0.5 * ratio - 0.5);
  }
  out.spacing = {1.0, 1.0, 1.0};
  return out;
}

}  // namespace vertseg
