#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bseg/pcio.hpp"

namespace bseg {

using PointId = std::uint32_t;

/// k nearest neighbours of one cloud member, sorted by (distance, index).
struct Neighborhood {
  PointId center_index = 0;
  std::vector<PointId> neighbor_indices;
  std::vector<double> distances;
};

/// Immutable balanced kd-tree over the points of a cloud. Queries are exact
/// and agree with a brute-force scan, ties broken by ascending point index.
class SpatialIndex {
 public:
  explicit SpatialIndex(std::span<const Vec3> points);

  std::size_t size() const noexcept { return points_.size(); }
  std::span<const Vec3> points() const noexcept { return points_; }

  /// The k nearest other cloud members of point `center`.
  Neighborhood knn(PointId center, std::size_t k) const;

  /// knn for every point, row-major N x k index table.
  std::vector<PointId> knn_table(std::size_t k) const;

 private:
  struct Node {
    // Leaf when left == 0 (root is never a child); children are node ids.
    std::uint32_t begin = 0, end = 0;
    std::uint32_t left = 0, right = 0;
    std::uint8_t axis = 0;
    double split = 0.0;
  };

  std::uint32_t build(std::uint32_t begin, std::uint32_t end, int depth);

  std::vector<Vec3> points_;
  std::vector<PointId> order_;
  std::vector<Node> nodes_;
};

/// Builds the index; throws TooFewPoints when N < 2.
SpatialIndex build_index(const PointCloud& cloud);

Neighborhood knn(const SpatialIndex& index, PointId center, std::size_t k);

struct NormalField {
  std::vector<Vec3> normals;
  /// Neighbourhoods whose covariance had rank < 2. Their normal is (0,0,1).
  std::vector<bool> degenerate;

  std::size_t degenerate_count() const;
};

/// PCA normals over each point plus its k neighbours; the eigenvector of the
/// smallest covariance eigenvalue, signed so that its largest-magnitude
/// component (first on ties) is positive.
NormalField estimate_normals(const PointCloud& cloud, const SpatialIndex& index, std::size_t k);

struct NeighborhoodStats {
  /// Mean over neighbours of arccos(|n_i . n_j|), radians in [0, pi/2].
  std::vector<double> mean_angle;
  /// |centroid(neighbours) - p_i| / mean neighbour distance.
  std::vector<double> offset_ratio;
};

NeighborhoodStats neighborhood_stats(const PointCloud& cloud, const SpatialIndex& index,
                                     const NormalField& normals, std::size_t k);

/// Eigen-decomposition of a symmetric 3x3 matrix by cyclic Jacobi rotations.
/// Eigenvalues ascending; eigenvectors[i] belongs to eigenvalues[i].
struct SymEigen3 {
  std::array<double, 3> eigenvalues{};
  std::array<Vec3, 3> eigenvectors{};
};
SymEigen3 symmetric_eigen3(const std::array<std::array<double, 3>, 3>& m);

}  // namespace bseg
