#pragma once

#include <string_view>
#include <vector>

#include "bseg/pcio.hpp"
#include "bseg/spatial.hpp"

namespace bseg {

enum class CombineRule { Or, And };

CombineRule parse_combine_rule(std::string_view name);
std::string_view to_string(CombineRule rule);

/// A point is a boundary point when its mean neighbour-normal angle exceeds
/// `theta_angle` and/or its centroid offset ratio exceeds `tau_offset`.
struct BoundaryThresholds {
  double theta_angle = 0.30;  // radians, in (0, pi/2)
  double tau_offset = 0.50;   // > 0
  CombineRule combine = CombineRule::Or;

  void validate() const;
};

struct BoundaryMask {
  std::vector<bool> flags;
  std::vector<PointId> boundary_indices;
  std::vector<PointId> interior_indices;

  std::size_t size() const noexcept { return flags.size(); }
  double boundary_fraction() const noexcept {
    return flags.empty() ? 0.0
                         : static_cast<double>(boundary_indices.size()) /
                               static_cast<double>(flags.size());
  }
};

BoundaryMask mask_from_flags(std::vector<bool> flags);

BoundaryMask classify_boundary(const NeighborhoodStats& stats, const BoundaryThresholds& thr);

/// Convenience: index, normals, stats and classification in one call.
BoundaryMask detect_boundary(const PointCloud& cloud, const SpatialIndex& index, std::size_t k_est,
                             const BoundaryThresholds& thr);

/// Boundary and interior sub-clouds; `*_map[i]` is the original index of
/// row i of the corresponding subset.
struct CloudSplit {
  PointCloud boundary;
  PointCloud interior;
  std::vector<PointId> boundary_map;
  std::vector<PointId> interior_map;

  /// Scatters both subsets back into original order.
  PointCloud reassemble() const;
};

CloudSplit split_cloud(const PointCloud& cloud, const BoundaryMask& mask);

}  // namespace bseg
