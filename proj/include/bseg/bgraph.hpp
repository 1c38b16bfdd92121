#pragma once

#include <span>
#include <vector>

#include "bseg/pcio.hpp"
#include "bseg/spatial.hpp"

namespace bseg {

/// Distances are clamped to this before taking the logarithm.
inline constexpr double kEdgeDistanceFloor = 1e-6;

/// ln(max(distance, kEdgeDistanceFloor)).
double edge_weight(double distance) noexcept;

/// Star graph around one boundary point: the point, its k nearest
/// neighbours in the full cloud, and log-distance edge weights.
struct BoundaryGraph {
  PointId center_index = 0;
  Vec3 center{};
  std::vector<PointId> neighbor_indices;
  std::vector<Vec3> neighbors;
  std::vector<double> edge_weights;

  std::size_t k() const noexcept { return neighbors.size(); }
};

/// Vertices with edge weights folded in: the centre gets the sum of all its
/// edge weights added to every coordinate, each neighbour gets its own edge
/// weight added to every coordinate.
struct FusedGraph {
  Vec3 fused_center{};
  std::vector<Vec3> fused_neighbors;
  std::vector<double> edge_weights;

  std::size_t k() const noexcept { return fused_neighbors.size(); }
};

std::vector<BoundaryGraph> build_graph(const PointCloud& cloud, const SpatialIndex& index,
                                       std::span<const PointId> boundary_indices, std::size_t k);

/// Same as build_graph but from a precomputed N x k neighbour table.
std::vector<BoundaryGraph> build_graph(const PointCloud& cloud,
                                       std::span<const PointId> knn_table, std::size_t k,
                                       std::span<const PointId> boundary_indices);

/// Builds a graph from explicit coordinates; neighbour ids default to 0..k-1.
BoundaryGraph make_graph(const Vec3& center, std::span<const Vec3> neighbors,
                         std::span<const PointId> neighbor_ids = {});

/// The weight sum is accumulated in ascending neighbour-id order, so the
/// fused centre does not depend on how the neighbour list is ordered.
FusedGraph fuse_edge_vertex(const BoundaryGraph& graph);

}  // namespace bseg
