#include "bseg/bgraph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bseg/errors.hpp"

namespace bseg {

double edge_weight(double distance) noexcept {
  return std::log(std::max(distance, kEdgeDistanceFloor));
}

BoundaryGraph make_graph(const Vec3& center, std::span<const Vec3> neighbors,
                         std::span<const PointId> neighbor_ids) {
  if (!neighbor_ids.empty() && neighbor_ids.size() != neighbors.size()) {
    throw LengthMismatch("make_graph: neighbour id count differs from neighbour count");
  }
  BoundaryGraph g;
  g.center = center;
  g.neighbors.assign(neighbors.begin(), neighbors.end());
  g.neighbor_indices.resize(neighbors.size());
  if (neighbor_ids.empty()) {
    std::iota(g.neighbor_indices.begin(), g.neighbor_indices.end(), PointId{0});
  } else {
    std::copy(neighbor_ids.begin(), neighbor_ids.end(), g.neighbor_indices.begin());
  }
  g.edge_weights.reserve(neighbors.size());
  for (const auto& p : neighbors) {
    const double dx = center[0] - p[0], dy = center[1] - p[1], dz = center[2] - p[2];
    g.edge_weights.push_back(edge_weight(std::sqrt(dx * dx + dy * dy + dz * dz)));
  }
  return g;
}

std::vector<BoundaryGraph> build_graph(const PointCloud& cloud,
                                       std::span<const PointId> knn_table, std::size_t k,
                                       std::span<const PointId> boundary_indices) {
  if (knn_table.size() != cloud.size() * k) {
    throw LengthMismatch("build_graph: neighbour table does not match cloud and k");
  }
  std::vector<BoundaryGraph> graphs;
  graphs.reserve(boundary_indices.size());
  std::vector<Vec3> nb(k);
  for (auto b : boundary_indices) {
    if (b >= cloud.size()) throw BadIndex("build_graph: boundary index out of range");
    const auto row = knn_table.subspan(static_cast<std::size_t>(b) * k, k);
    for (std::size_t j = 0; j < k; ++j) nb[j] = cloud.points[row[j]];
    auto g = make_graph(cloud.points[b], nb, row);
    g.center_index = b;
    graphs.push_back(std::move(g));
  }
  return graphs;
}

std::vector<BoundaryGraph> build_graph(const PointCloud& cloud, const SpatialIndex& index,
                                       std::span<const PointId> boundary_indices, std::size_t k) {
  std::vector<BoundaryGraph> graphs;
  graphs.reserve(boundary_indices.size());
  std::vector<Vec3> nb(k);
  for (auto b : boundary_indices) {
    const auto hood = index.knn(b, k);
    for (std::size_t j = 0; j < k; ++j) nb[j] = cloud.points[hood.neighbor_indices[j]];
    auto g = make_graph(cloud.points[b], nb, hood.neighbor_indices);
    g.center_index = b;
    graphs.push_back(std::move(g));
  }
  return graphs;
}

FusedGraph fuse_edge_vertex(const BoundaryGraph& graph) {
  const auto k = graph.k();
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return graph.neighbor_indices[a] < graph.neighbor_indices[b];
  });
  double weight_sum = 0.0;
  for (auto j : order) weight_sum += graph.edge_weights[j];

  FusedGraph f;
  f.edge_weights = graph.edge_weights;
  for (int a = 0; a < 3; ++a) f.fused_center[a] = graph.center[a] + weight_sum;
  f.fused_neighbors.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    for (int a = 0; a < 3; ++a) f.fused_neighbors[j][a] = graph.neighbors[j][a] + graph.edge_weights[j];
  }
  return f;
}

}  // namespace bseg
