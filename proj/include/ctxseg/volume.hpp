#pragma once

#include "ctxseg/common.hpp"

#include <string>
#include <vector>

namespace ctxseg {

enum class VolumeKind { image, label };

// Axis permutation + flips relative to the canonical frame.
// Canonical axis a reads from stored axis perm[a], reversed when flip[a] is set.
struct Orientation {
  std::array<int, 3> perm{0, 1, 2};
  std::array<bool, 3> flip{false, false, false};

  static Orientation canonical() { return {}; }

  bool is_canonical() const {
    return perm == std::array<int, 3>{0, 1, 2} && !flip[0] && !flip[1] && !flip[2];
  }

  bool valid() const {
    std::array<bool, 3> seen{false, false, false};
    for (int a : perm) {
      if (a < 0 || a > 2 || seen[a]) return false;
      seen[a] = true;
    }
    return true;
  }
};

// Dense 3D scalar grid plus geometry metadata. Label volumes keep integer
// values (exact in float for the label ranges used here).
struct Volume {
  Shape3 dims{0, 0, 0};
  std::vector<float> values;
  Vector3d spacing_mm{1.0, 1.0, 1.0};
  Orientation orientation;
  VolumeKind kind = VolumeKind::image;

  Volume() = default;
  Volume(Shape3 d, VolumeKind k, float fill = 0.f)
      : dims(d), values(static_cast<size_t>(voxels_of(d)), fill), kind(k) {}

  std::int64_t size() const { return voxels_of(dims); }

  float& at(int i, int j, int k) { return values[static_cast<size_t>(grid_index(dims, i, j, k))]; }
  float at(int i, int j, int k) const {
    return values[static_cast<size_t>(grid_index(dims, i, j, k))];
  }

  bool same_grid(const Volume& o) const { return dims == o.dims; }
};

}  // namespace ctxseg
