#pragma once

#include <algorithm>
#include <vector>

#include "vertseg/phantom.hpp"
#include "vertseg/slices.hpp"

namespace vertseg::testing {

// Resampled phantom slices of one plane, most-foreground first.
inline std::vector<SliceSample> phantom_slices(int n_volumes, uint64_t seed, Plane plane, int64_t size,
                                               Phase phase = Phase::Train) {
  std::vector<SliceSample> out;
  for (const auto& c : make_synthetic_dataset(n_volumes, seed)) {
    auto img = resample_to_unit_spacing(c.image, Interpolation::Linear);
    auto msk = resample_to_unit_spacing(c.mask, Interpolation::Nearest);
    auto s = extract_slices(img, msk, plane, {size, false}, c.id, phase);
    out.insert(out.end(), s.begin(), s.end());
  }
  std::stable_sort(out.begin(), out.end(), [](const SliceSample& a, const SliceSample& b) {
    return a.mask.sum().item<float>() > b.mask.sum().item<float>();
  });
  return out;
}

}  // namespace vertseg::testing
