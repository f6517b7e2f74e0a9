#include "vertseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "vertseg/error.hpp"
#include "vertseg/rng.hpp"

namespace vertseg {

namespace {

struct Ellipsoid {
  double cx, cy, cz, rx, ry, rz;
  double value(double x, double y, double z) const {
    const double dx = (x - cx) / rx, dy = (y - cy) / ry, dz = (z - cz) / rz;
    return dx * dx + dy * dy + dz * dz;
  }
};

PhantomCase make_one(int index, uint64_t seed, const PhantomOptions& o) {
  Rng rng(derive_seed(seed, "phantom", index, 0));
  auto pick = [&](int64_t lo, int64_t hi) { return lo + static_cast<int64_t>(uniform_index(rng, hi - lo + 1)); };
  const int64_t nx = pick(o.min_lateral, o.max_lateral);
  const int64_t ny = pick(o.min_lateral, o.max_lateral);
  const int64_t nz = pick(o.min_axial, o.max_axial);
  const double sx = uniform(rng, 0.85, 1.1), sy = sx, sz = uniform(rng, 1.0, 1.6);
  const double ex = nx * sx, ey = ny * sy, ez = nz * sz;  // physical extent, mm

  const double body_rx = uniform(rng, 0.40, 0.47) * ex, body_ry = uniform(rng, 0.34, 0.44) * ey;
  // Patients lie off-centre by a few percent of the field of view.
  const double body_cx = ex * uniform(rng, 0.44, 0.56), body_cy = ey * uniform(rng, 0.44, 0.56);
  const double tissue = uniform(rng, 20.0, 60.0);

  const int k = static_cast<int>(pick(o.min_vertebrae, o.max_vertebrae));
  const double pitch = ez / k;
  const double spine_cy = body_cy + uniform(rng, 0.10, 0.22) * body_ry;
  const double curve = uniform(rng, -0.12, 0.12) * ex;
  const double lean = uniform(rng, -0.12, 0.12) * ex;  // lateral drift from bottom to top
  const double size = uniform(rng, 0.8, 1.2);
  std::vector<Ellipsoid> vertebrae;
  std::vector<double> cancellous;
  for (int j = 0; j < k; ++j) {
    const double t = (j + 0.5) / k;
    Ellipsoid e;
    e.cx = body_cx + curve * std::sin(std::numbers::pi * t) + lean * (t - 0.5) + uniform(rng, -0.5, 0.5);
    e.cy = spine_cy + uniform(rng, -0.5, 0.5);
    e.cz = (j + 0.5) * pitch + uniform(rng, -0.05, 0.05) * pitch;
    e.rx = size * uniform(rng, 0.16, 0.22) * ex;
    e.ry = size * uniform(rng, 0.12, 0.17) * ey;
    e.rz = uniform(rng, 0.32, 0.42) * pitch;
    vertebrae.push_back(e);
    cancellous.push_back(uniform(rng, 220.0, 420.0));
  }
  // A contrast-filled vessel in front of the spine; bright but not bone.
  const double vessel_cx = body_cx + uniform(rng, -0.12, 0.12) * ex;
  const double vessel_cy = spine_cy - uniform(rng, 0.25, 0.35) * body_ry - vertebrae[0].ry;
  const double vessel_r = uniform(rng, 0.05, 0.08) * ex;
  const double vessel_hu = uniform(rng, 150.0, 300.0);

  auto image = torch::empty({nx, ny, nz}, torch::kFloat32);
  auto mask = torch::zeros({nx, ny, nz}, torch::kFloat32);
  auto* img = image.data_ptr<float>();
  auto* msk = mask.data_ptr<float>();
  int64_t fg = 0;
  for (int64_t i = 0; i < nx; ++i) {
    const double x = (i + 0.5) * sx;
    for (int64_t j = 0; j < ny; ++j) {
      const double y = (j + 0.5) * sy;
      const double bx = (x - body_cx) / body_rx, by = (y - body_cy) / body_ry;
      const bool in_body = bx * bx + by * by <= 1.0;
      const double vdx = x - vessel_cx, vdy = y - vessel_cy;
      const bool in_vessel = in_body && vdx * vdx + vdy * vdy <= vessel_r * vessel_r;
      for (int64_t l = 0; l < nz; ++l) {
        const double z = (l + 0.5) * sz;
        double hu = in_body ? tissue + 25.0 * normal(rng) : -1000.0 + 8.0 * normal(rng);
        if (in_vessel) hu = vessel_hu + 20.0 * normal(rng);
        bool bone = false;
        for (size_t v = 0; v < vertebrae.size(); ++v) {
          const double q = vertebrae[v].value(x, y, z);
          if (q <= 1.0) {
            bone = true;
            // Cortical shell brighter than the cancellous core.
            const double shell = std::clamp((std::sqrt(q) - 0.75) / 0.25, 0.0, 1.0);
            hu = cancellous[v] + shell * 900.0 + 60.0 * normal(rng);
            break;
          }
        }
        const int64_t idx = (i * ny + j) * nz + l;
        img[idx] = static_cast<float>(std::clamp(hu, -1024.0, 3072.0));
        if (bone) {
          msk[idx] = 1.0f;
          ++fg;
        }
      }
    }
  }

  char id[32];
  std::snprintf(id, sizeof id, "phantom_%03d", index);
  PhantomCase c;
  c.id = id;
  c.image.data = image;
  c.image.spacing = {sx, sy, sz};
  c.mask = c.image;
  c.mask.data = mask;
  const double fraction = static_cast<double>(fg) / static_cast<double>(nx * ny * nz);
  if (!(fraction > 0.01 && fraction < 0.30)) {
    throw Error("phantom generator produced foreground fraction " + std::to_string(fraction));
  }
  return c;
}

}  // namespace

std::vector<PhantomCase> make_synthetic_dataset(int n_volumes, uint64_t seed, const PhantomOptions& options) {
  if (n_volumes < 1) throw ConfigError("need at least one phantom volume");
  if (options.min_lateral < 16 || options.min_lateral > options.max_lateral || options.min_axial < 16 ||
      options.min_axial > options.max_axial || options.min_vertebrae < 1 ||
      options.min_vertebrae > options.max_vertebrae) {
    throw ConfigError("invalid phantom options");
  }
  std::vector<PhantomCase> out;
  out.reserve(static_cast<size_t>(n_volumes));
  for (int i = 0; i < n_volumes; ++i) out.push_back(make_one(i, seed, options));
  return out;
}

}  // namespace vertseg
