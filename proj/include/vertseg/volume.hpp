#pragma once

#include <torch/torch.h>

#include <array>
#include <filesystem>
#include <string_view>

namespace vertseg {

enum class Plane { Sagittal, Coronal, Axial };
inline constexpr std::array<Plane, 3> kAllPlanes{Plane::Sagittal, Plane::Coronal, Plane::Axial};

std::string_view to_string(Plane plane);
// "Sagittal" etc., as printed in report tables.
std::string_view display_name(Plane plane);
Plane parse_plane(std::string_view name);

enum class VoxelType { UInt8, Int16, Float32 };

/// A 3D scalar grid. `data` is float32 indexed [i, j, k] along array axes 0..2;
/// `axes[a]` names the plane whose normal array axis `a` runs along (so the
/// identity layout is {Sagittal, Coronal, Axial}: i runs left-right, j
/// posterior-anterior, k inferior-superior).
struct Volume {
  torch::Tensor data;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::array<Plane, 3> axes{Plane::Sagittal, Plane::Coronal, Plane::Axial};
  // World-space origin of voxel (0, 0, 0) and per-axis direction signs, kept
  // so that written volumes align with the grid they came from.
  std::array<double, 3> origin{0.0, 0.0, 0.0};
  std::array<int, 3> direction_sign{1, 1, 1};

  int64_t extent(int axis) const { return data.size(axis); }
  int normal_axis(Plane plane) const;
  // Throws on bad rank, non-positive spacing or a non-permutation axes tag.
  void validate() const;
};

enum class Interpolation { Linear, Nearest };

/// Reads a NIfTI-1 file (.nii or .nii.gz) or the toolkit's `.vraw` format.
/// The affine is reduced to an axis permutation plus spacing; oblique
/// orientations are rejected.
Volume load_volume(const std::filesystem::path& path);

/// Writes NIfTI-1 when the extension is .nii/.nii.gz, `.vraw` otherwise.
void save_volume(const Volume& volume, const std::filesystem::path& path,
                 VoxelType type = VoxelType::Float32);

/// Resamples onto a 1 mm isotropic grid. The new extent along each axis is
/// round(extent * spacing), at least 1. Images use trilinear interpolation,
/// masks nearest-neighbour.
Volume resample_to_unit_spacing(const Volume& volume, Interpolation mode = Interpolation::Linear);

}  // namespace vertseg
