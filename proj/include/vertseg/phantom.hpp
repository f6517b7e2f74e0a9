#pragma once

#include <string>
#include <vector>

#include "vertseg/volume.hpp"

namespace vertseg {

struct PhantomOptions {
  // Extent ranges in voxels along (left-right, posterior-anterior, inferior-superior).
  int64_t min_lateral = 40, max_lateral = 56;
  int64_t min_axial = 56, max_axial = 72;
  int min_vertebrae = 5, max_vertebrae = 7;
};

struct PhantomCase {
  std::string id;
  Volume image;  // Hounsfield-like units in [-1024, 3072]
  Volume mask;   // {0, 1}
};

/// Spine phantoms: an elliptical soft-tissue body in air with a vertical stack
/// of bright ellipsoidal vertebral bodies, noise, and the exact vertebra mask.
/// Spacing is anisotropic. Deterministic per seed.
std::vector<PhantomCase> make_synthetic_dataset(int n_volumes, uint64_t seed, const PhantomOptions& options = {});

}  // namespace vertseg
