#include "bseg/spatial.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "bseg/errors.hpp"

namespace bseg {

namespace {

constexpr std::uint32_t kLeafSize = 8;

inline double sq_dist(const Vec3& a, const Vec3& b) noexcept {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

struct Candidate {
  double d2;
  PointId id;
  bool operator<(const Candidate& o) const noexcept {
    return d2 < o.d2 || (d2 == o.d2 && id < o.id);
  }
};

// Bounded sorted list of the best k candidates seen so far.
class BestK {
 public:
  explicit BestK(std::size_t k) : k_(k) { items_.reserve(k + 1); }

  bool full() const noexcept { return items_.size() == k_; }
  double worst() const noexcept { return items_.back().d2; }

  void offer(Candidate c) {
    if (full() && !(c < items_.back())) return;
    auto pos = std::upper_bound(items_.begin(), items_.end(), c);
    items_.insert(pos, c);
    if (items_.size() > k_) items_.pop_back();
  }

  const std::vector<Candidate>& items() const noexcept { return items_; }

 private:
  std::size_t k_;
  std::vector<Candidate> items_;
};

}  // namespace

SpatialIndex::SpatialIndex(std::span<const Vec3> points)
    : points_(points.begin(), points.end()), order_(points.size()) {
  if (points_.size() < 2) throw TooFewPoints("spatial index needs at least 2 points");
  std::iota(order_.begin(), order_.end(), PointId{0});
  nodes_.reserve(2 * (points_.size() / kLeafSize + 1));
  build(0, static_cast<std::uint32_t>(points_.size()), 0);
}

std::uint32_t SpatialIndex::build(std::uint32_t begin, std::uint32_t end, int depth) {
  const auto id = static_cast<std::uint32_t>(nodes_.size());
  nodes_.push_back(Node{begin, end, 0, 0, 0, 0.0});
  if (end - begin <= kLeafSize) return id;

  // Split on the axis of largest extent at the median (coordinate, index).
  Vec3 lo = points_[order_[begin]], hi = lo;
  for (auto i = begin; i < end; ++i) {
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], points_[order_[i]][a]);
      hi[a] = std::max(hi[a], points_[order_[i]][a]);
    }
  }
  std::uint8_t axis = 0;
  for (std::uint8_t a = 1; a < 3; ++a) {
    if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = a;
  }
  const auto mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](PointId a, PointId b) {
                     const double ca = points_[a][axis], cb = points_[b][axis];
                     return ca < cb || (ca == cb && a < b);
                   });
  const double split = points_[order_[mid]][axis];
  const auto left = build(begin, mid, depth + 1);
  const auto right = build(mid, end, depth + 1);
  nodes_[id].left = left;
  nodes_[id].right = right;
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  return id;
}

Neighborhood SpatialIndex::knn(PointId center, std::size_t k) const {
  if (center >= points_.size()) {
    throw BadIndex("knn: center " + std::to_string(center) + " out of range");
  }
  if (k == 0) throw PreconditionError("knn: k must be positive");
  if (k > points_.size() - 1) {
    throw KTooLarge("knn: k=" + std::to_string(k) + " exceeds N-1=" +
                    std::to_string(points_.size() - 1));
  }
  const Vec3& q = points_[center];
  BestK best(k);

  // Left subtrees hold coordinates <= split and right subtrees >= split, so
  // the squared plane distance is a lower bound on either far side. Equal
  // bounds are still visited so that index tie-breaking stays exact.
  struct Frame {
    std::uint32_t node;
    double bound;
  };
  std::vector<Frame> stack;
  stack.reserve(64);
  stack.push_back({0, 0.0});
  while (!stack.empty()) {
    const Frame f = stack.back();
    stack.pop_back();
    if (best.full() && f.bound > best.worst()) continue;
    const Node& n = nodes_[f.node];
    if (n.left == 0) {
      for (auto i = n.begin; i < n.end; ++i) {
        const PointId id = order_[i];
        if (id == center) continue;
        best.offer({sq_dist(q, points_[id]), id});
      }
      continue;
    }
    const double diff = q[n.axis] - n.split;
    const double far_bound = std::max(f.bound, diff * diff);
    const auto near = diff < 0 ? n.left : n.right;
    const auto far = diff < 0 ? n.right : n.left;
    stack.push_back({far, far_bound});
    stack.push_back({near, f.bound});
  }

  Neighborhood out;
  out.center_index = center;
  out.neighbor_indices.reserve(k);
  out.distances.reserve(k);
  for (const auto& c : best.items()) {
    out.neighbor_indices.push_back(c.id);
    out.distances.push_back(std::sqrt(c.d2));
  }
  return out;
}

std::vector<PointId> SpatialIndex::knn_table(std::size_t k) const {
  std::vector<PointId> table;
  table.reserve(size() * k);
  for (PointId i = 0; i < size(); ++i) {
    auto nb = knn(i, k);
    table.insert(table.end(), nb.neighbor_indices.begin(), nb.neighbor_indices.end());
  }
  return table;
}

SpatialIndex build_index(const PointCloud& cloud) { return SpatialIndex(cloud.points); }

Neighborhood knn(const SpatialIndex& index, PointId center, std::size_t k) {
  return index.knn(center, k);
}

std::size_t NormalField::degenerate_count() const {
  return static_cast<std::size_t>(std::count(degenerate.begin(), degenerate.end(), true));
}

SymEigen3 symmetric_eigen3(const std::array<std::array<double, 3>, 3>& m) {
  auto a = m;
  std::array<std::array<double, 3>, 3> v{};
  for (int i = 0; i < 3; ++i) v[i][i] = 1.0;

  for (int sweep = 0; sweep < 64; ++sweep) {
    const double off = std::abs(a[0][1]) + std::abs(a[0][2]) + std::abs(a[1][2]);
    if (off == 0.0) break;
    for (int p = 0; p < 2; ++p) {
      for (int q = p + 1; q < 3; ++q) {
        const double apq = a[p][q];
        if (apq == 0.0) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        // A' = J^T A J with J the (p,q) Givens rotation.
        for (int r = 0; r < 3; ++r) {
          const double arp = a[r][p], arq = a[r][q];
          a[r][p] = c * arp - s * arq;
          a[r][q] = s * arp + c * arq;
        }
        for (int r = 0; r < 3; ++r) {
          const double apr = a[p][r], aqr = a[q][r];
          a[p][r] = c * apr - s * aqr;
          a[q][r] = s * apr + c * aqr;
        }
        a[p][q] = a[q][p] = 0.0;
        for (int r = 0; r < 3; ++r) {
          const double vrp = v[r][p], vrq = v[r][q];
          v[r][p] = c * vrp - s * vrq;
          v[r][q] = s * vrp + c * vrq;
        }
      }
    }
  }

  std::array<int, 3> idx{0, 1, 2};
  std::stable_sort(idx.begin(), idx.end(), [&](int i, int j) { return a[i][i] < a[j][j]; });
  SymEigen3 out;
  for (int k = 0; k < 3; ++k) {
    out.eigenvalues[k] = a[idx[k]][idx[k]];
    out.eigenvectors[k] = {v[0][idx[k]], v[1][idx[k]], v[2][idx[k]]};
  }
  return out;
}

NormalField estimate_normals(const PointCloud& cloud, const SpatialIndex& index, std::size_t k) {
  if (k < 3) throw KTooSmall("estimate_normals: k must be >= 3");
  if (index.size() != cloud.size()) throw LengthMismatch("index was built on another cloud");
  const auto n = cloud.size();
  NormalField field;
  field.normals.resize(n);
  field.degenerate.assign(n, false);

  for (PointId i = 0; i < n; ++i) {
    const auto nb = index.knn(i, k);
    Vec3 centroid = cloud.points[i];
    for (auto j : nb.neighbor_indices) {
      for (int a = 0; a < 3; ++a) centroid[a] += cloud.points[j][a];
    }
    const double count = static_cast<double>(k + 1);
    for (auto& c : centroid) c /= count;

    std::array<std::array<double, 3>, 3> cov{};
    auto accumulate = [&](const Vec3& p) {
      const Vec3 d{p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]};
      for (int r = 0; r < 3; ++r) {
        for (int c = r; c < 3; ++c) cov[r][c] += d[r] * d[c];
      }
    };
    accumulate(cloud.points[i]);
    for (auto j : nb.neighbor_indices) accumulate(cloud.points[j]);
    for (int r = 0; r < 3; ++r) {
      for (int c = r; c < 3; ++c) {
        cov[r][c] /= count;
        cov[c][r] = cov[r][c];
      }
    }

    const auto eig = symmetric_eigen3(cov);
    const double largest = eig.eigenvalues[2];
    if (!(largest > 0.0) || eig.eigenvalues[1] <= 1e-12 * largest) {
      field.normals[i] = {0.0, 0.0, 1.0};
      field.degenerate[i] = true;
      continue;
    }
    Vec3 nrm = eig.eigenvectors[0];
    const double len = std::sqrt(nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]);
    for (auto& c : nrm) c /= len;
    int dominant = 0;
    for (int a = 1; a < 3; ++a) {
      if (std::abs(nrm[a]) > std::abs(nrm[dominant])) dominant = a;
    }
    if (nrm[dominant] < 0) {
      for (auto& c : nrm) c = -c;
    }
    // Avoid -0.0 components so exported normals compare textually.
    for (auto& c : nrm) c += 0.0;
    field.normals[i] = nrm;
  }
  return field;
}

NeighborhoodStats neighborhood_stats(const PointCloud& cloud, const SpatialIndex& index,
                                     const NormalField& normals, std::size_t k) {
  const auto n = cloud.size();
  if (normals.normals.size() != n || index.size() != n) {
    throw LengthMismatch("neighborhood_stats: normals/index do not match the cloud");
  }
  NeighborhoodStats stats;
  stats.mean_angle.resize(n);
  stats.offset_ratio.resize(n);
  const double inv_k = 1.0 / static_cast<double>(k);
  for (PointId i = 0; i < n; ++i) {
    const auto nb = index.knn(i, k);
    const Vec3& p = cloud.points[i];
    const Vec3& ni = normals.normals[i];
    double angle_sum = 0.0;
    double dist_sum = 0.0;
    Vec3 centroid{0.0, 0.0, 0.0};
    for (std::size_t j = 0; j < k; ++j) {
      const auto id = nb.neighbor_indices[j];
      const Vec3& nj = normals.normals[id];
      const double dot = std::abs(ni[0] * nj[0] + ni[1] * nj[1] + ni[2] * nj[2]);
      angle_sum += std::acos(std::clamp(dot, 0.0, 1.0));
      dist_sum += nb.distances[j];
      for (int a = 0; a < 3; ++a) centroid[a] += cloud.points[id][a];
    }
    Vec3 offset{};
    for (int a = 0; a < 3; ++a) offset[a] = centroid[a] * inv_k - p[a];
    const double offset_len =
        std::sqrt(offset[0] * offset[0] + offset[1] * offset[1] + offset[2] * offset[2]);
    const double mean_dist = dist_sum * inv_k;
    stats.mean_angle[i] = angle_sum * inv_k;
    stats.offset_ratio[i] = mean_dist > 0.0 ? offset_len / mean_dist : 0.0;
  }
  return stats;
}

}  // namespace bseg
