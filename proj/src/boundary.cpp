#include "bseg/boundary.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "bseg/errors.hpp"

namespace bseg {

CombineRule parse_combine_rule(std::string_view name) {
  if (name == "or" || name == "OR") return CombineRule::Or;
  if (name == "and" || name == "AND") return CombineRule::And;
  throw PreconditionError("unknown combine rule '" + std::string(name) + "'");
}

std::string_view to_string(CombineRule rule) { return rule == CombineRule::Or ? "or" : "and"; }

void BoundaryThresholds::validate() const {
  if (!(theta_angle > 0.0 && theta_angle < std::numbers::pi / 2)) {
    throw PreconditionError("theta_angle must lie in (0, pi/2)");
  }
  if (!(tau_offset > 0.0) || !std::isfinite(tau_offset)) {
    throw PreconditionError("tau_offset must be finite and > 0");
  }
}

BoundaryMask mask_from_flags(std::vector<bool> flags) {
  BoundaryMask mask;
  mask.flags = std::move(flags);
  for (PointId i = 0; i < mask.flags.size(); ++i) {
    (mask.flags[i] ? mask.boundary_indices : mask.interior_indices).push_back(i);
  }
  return mask;
}

BoundaryMask classify_boundary(const NeighborhoodStats& stats, const BoundaryThresholds& thr) {
  thr.validate();
  if (stats.mean_angle.size() != stats.offset_ratio.size()) {
    throw LengthMismatch("classify_boundary: stats columns differ in length");
  }
  std::vector<bool> flags(stats.mean_angle.size());
  for (std::size_t i = 0; i < flags.size(); ++i) {
    const double angle = stats.mean_angle[i];
    const double ratio = stats.offset_ratio[i];
    if (!std::isfinite(angle) || !std::isfinite(ratio)) {
      throw PreconditionError("classify_boundary: non-finite statistic at point " +
                              std::to_string(i));
    }
    const bool chaotic_normals = angle > thr.theta_angle;
    const bool uneven = ratio > thr.tau_offset;
    flags[i] = thr.combine == CombineRule::Or ? (chaotic_normals || uneven)
                                              : (chaotic_normals && uneven);
  }
  return mask_from_flags(std::move(flags));
}

BoundaryMask detect_boundary(const PointCloud& cloud, const SpatialIndex& index, std::size_t k_est,
                             const BoundaryThresholds& thr) {
  const auto normals = estimate_normals(cloud, index, k_est);
  const auto stats = neighborhood_stats(cloud, index, normals, k_est);
  return classify_boundary(stats, thr);
}

CloudSplit split_cloud(const PointCloud& cloud, const BoundaryMask& mask) {
  if (mask.size() != cloud.size()) {
    throw LengthMismatch("split_cloud: mask length " + std::to_string(mask.size()) +
                         " != cloud size " + std::to_string(cloud.size()));
  }
  CloudSplit out;
  out.boundary.num_classes = cloud.num_classes;
  out.interior.num_classes = cloud.num_classes;
  for (PointId i = 0; i < cloud.size(); ++i) {
    const bool b = mask.flags[i];
    auto& part = b ? out.boundary : out.interior;
    (b ? out.boundary_map : out.interior_map).push_back(i);
    part.points.push_back(cloud.points[i]);
    if (cloud.has_labels()) part.labels.push_back(cloud.labels[i]);
  }
  return out;
}

PointCloud CloudSplit::reassemble() const {
  PointCloud out;
  const auto n = boundary_map.size() + interior_map.size();
  out.points.resize(n);
  const bool labeled = !boundary.labels.empty() || !interior.labels.empty();
  if (labeled) out.labels.resize(n);
  out.num_classes = boundary.num_classes ? boundary.num_classes : interior.num_classes;
  auto scatter = [&](const PointCloud& part, const std::vector<PointId>& map) {
    for (std::size_t i = 0; i < map.size(); ++i) {
      out.points[map[i]] = part.points[i];
      if (labeled) out.labels[map[i]] = part.labels[i];
    }
  };
  scatter(boundary, boundary_map);
  scatter(interior, interior_map);
  return out;
}

}  // namespace bseg
