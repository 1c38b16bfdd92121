#include <cmath>
#include <numbers>
#include <thread>

#include "bseg/errors.hpp"
#include "bseg/spatial.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace bseg;

namespace {

double angle_deg(const Vec3& a, const Vec3& b) {
  double dot = 0;
  for (int i = 0; i < 3; ++i) dot += a[i] * b[i];
  return std::acos(std::min(1.0, std::abs(dot))) * 180.0 / std::numbers::pi;
}

Vec3 rotate(const std::array<Vec3, 3>& r, const Vec3& p) {
  return {r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
          r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
          r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2]};
}

}  // namespace

TEST_CASE("knn small hand-checked cases") {
  auto two = oracle::cloud_of({{0, 0, 0}, {1, 0, 0}});
  auto idx2 = build_index(two);
  auto nb = knn(idx2, 0, 1);
  CHECK(nb.neighbor_indices == std::vector<PointId>{1});
  CHECK(nb.distances[0] == 1.0);

  auto line = oracle::cloud_of({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {5, 0, 0}});
  auto li = build_index(line);
  nb = knn(li, 1, 2);
  CHECK(nb.neighbor_indices == std::vector<PointId>{0, 2});
  CHECK(nb.distances == std::vector<double>{1.0, 1.0});

  auto square = oracle::cloud_of({{0, 0, 0}, {1, 1, 0}, {0, 1, 0}, {1, 0, 0}});
  nb = knn(build_index(square), 0, 2);
  CHECK(nb.neighbor_indices == std::vector<PointId>{2, 3});  // sqrt 1 < sqrt 2, ties by index
}

TEST_CASE("knn errors") {
  CHECK_THROWS_AS(build_index(oracle::cloud_of({{0, 0, 0}})), TooFewPoints);
  auto idx = build_index(oracle::cloud_of({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}}));
  CHECK_THROWS_AS(knn(idx, 0, 3), KTooLarge);
  CHECK_THROWS_AS(knn(idx, 3, 1), BadIndex);
}

TEST_CASE("knn equals the brute-force oracle") {
  for (std::uint64_t seed : {11u, 12u}) {
    const auto pts = oracle::random_points(1000, seed);
    const auto idx = build_index(oracle::cloud_of(pts));
    for (PointId i = 0; i < pts.size(); ++i) {
      REQUIRE(knn(idx, i, 8).neighbor_indices == oracle::brute_knn(pts, i, 8));
    }
  }
  const auto pts = oracle::random_points(500, 13);
  const auto idx = build_index(oracle::cloud_of(pts));
  for (PointId i = 0; i < pts.size(); ++i) {
    const auto nb = knn(idx, i, 16);
    REQUIRE(nb.neighbor_indices == oracle::brute_knn(pts, i, 16));
    for (std::size_t j = 1; j < nb.distances.size(); ++j) CHECK(nb.distances[j - 1] <= nb.distances[j]);
  }
}

TEST_CASE("knn resolves exact ties on a lattice and duplicates") {
  std::vector<Vec3> pts;
  for (int x = 0; x < 6; ++x)
    for (int y = 0; y < 6; ++y)
      for (int z = 0; z < 6; ++z) pts.push_back({double(x), double(y), double(z)});
  pts.push_back({2, 2, 2});  // duplicate of an existing point
  const auto idx = build_index(oracle::cloud_of(pts));
  for (PointId i = 0; i < pts.size(); ++i) {
    REQUIRE(knn(idx, i, 20).neighbor_indices == oracle::brute_knn(pts, i, 20));
  }
  const auto dup = knn(idx, static_cast<PointId>(pts.size() - 1), 1);
  CHECK(dup.distances[0] == 0.0);
}

TEST_CASE("concurrent queries match sequential ones") {
  const auto pts = oracle::random_points(800, 21);
  const auto idx = build_index(oracle::cloud_of(pts));
  const auto sequential = idx.knn_table(12);
  std::vector<PointId> parallel(sequential.size());
  std::vector<std::thread> workers;
  for (int t = 0; t < 4; ++t) {
    workers.emplace_back([&, t] {
      for (PointId i = t; i < pts.size(); i += 4) {
        auto nb = idx.knn(i, 12);
        std::copy(nb.neighbor_indices.begin(), nb.neighbor_indices.end(), parallel.begin() + i * 12);
      }
    });
  }
  for (auto& w : workers) w.join();
  CHECK(parallel == sequential);
}

TEST_CASE("symmetric_eigen3") {
  const auto e = symmetric_eigen3({{{2, 1, 0}, {1, 2, 0}, {0, 0, 5}}});
  CHECK(e.eigenvalues[0] == doctest::Approx(1.0));
  CHECK(e.eigenvalues[1] == doctest::Approx(3.0));
  CHECK(e.eigenvalues[2] == doctest::Approx(5.0));
  SplitMix64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::array<std::array<double, 3>, 3> m{};
    for (int r = 0; r < 3; ++r)
      for (int c = r; c < 3; ++c) m[r][c] = m[c][r] = rng.uniform(-1, 1);
    const auto s = symmetric_eigen3(m);
    for (int k = 0; k < 3; ++k) {
      const auto& v = s.eigenvectors[k];
      for (int r = 0; r < 3; ++r) {
        const double mv = m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2];
        CHECK(mv == doctest::Approx(s.eigenvalues[k] * v[r]).epsilon(1e-9).scale(1.0));
      }
    }
    CHECK(s.eigenvalues[0] <= s.eigenvalues[1]);
    CHECK(s.eigenvalues[1] <= s.eigenvalues[2]);
  }
}

TEST_CASE("normals of axis-aligned planes") {
  SplitMix64 rng(3);
  std::vector<Vec3> z0, x0;
  for (int i = 0; i < 300; ++i) {
    const double a = rng.uniform(), b = rng.uniform();
    z0.push_back({a, b, 0.0});
    x0.push_back({0.0, a, b});
  }
  auto cz = oracle::cloud_of(z0);
  auto nz = estimate_normals(cz, build_index(cz), 8);
  auto cx = oracle::cloud_of(x0);
  auto nx = estimate_normals(cx, build_index(cx), 8);
  for (std::size_t i = 0; i < z0.size(); ++i) {
    CHECK(nz.normals[i] == Vec3{0, 0, 1});
    CHECK(nx.normals[i] == Vec3{1, 0, 0});
  }
  CHECK(nz.degenerate_count() == 0);
  CHECK_THROWS_AS(estimate_normals(cz, build_index(cz), 2), KTooSmall);
}

TEST_CASE("noisy plane normals agree with the PCA oracle and the true normal") {
  std::vector<Vec3> pts;
  SplitMix64 rng(17);
  for (int i = 0; i < 1500; ++i) pts.push_back({rng.uniform(), rng.uniform(), 0.001 * rng.gaussian()});
  const auto c = oracle::cloud_of(pts);
  const auto field = estimate_normals(c, build_index(c), 16);
  std::size_t interior = 0, good = 0;
  for (PointId i = 0; i < pts.size(); ++i) {
    const auto& p = pts[i];
    CHECK(angle_deg(field.normals[i], oracle::pca_normal(pts, i, 16)) < 1e-6);
    if (p[0] < 0.1 || p[0] > 0.9 || p[1] < 0.1 || p[1] > 0.9) continue;
    ++interior;
    if (angle_deg(field.normals[i], {0, 0, 1}) < 5.0) ++good;
  }
  CHECK(static_cast<double>(good) >= 0.95 * static_cast<double>(interior));
}

TEST_CASE("normals are unit length, collinear neighbourhoods are flagged") {
  const auto c = gen_shape({ShapeKind::Cube, 800, 0.01, 4});
  const auto field = estimate_normals(c, build_index(c), 10);
  for (const auto& n : field.normals) {
    CHECK(std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]) == doctest::Approx(1.0).epsilon(1e-9));
  }
  std::vector<Vec3> line;
  for (int i = 0; i < 10; ++i) line.push_back({double(i), 2.0 * i, 0.0});
  const auto cl = oracle::cloud_of(line);
  const auto lf = estimate_normals(cl, build_index(cl), 4);
  CHECK(lf.degenerate_count() == line.size());
  CHECK(lf.normals[0] == Vec3{0, 0, 1});
}

TEST_CASE("normals rotate with the cloud up to sign") {
  const auto c = gen_shape({ShapeKind::LBracket, 600, 0.005, 8});
  const double a = 0.7, b = -0.4;
  // R = Rz(a) * Rx(b)
  const std::array<Vec3, 3> rz{{{std::cos(a), -std::sin(a), 0}, {std::sin(a), std::cos(a), 0}, {0, 0, 1}}};
  const std::array<Vec3, 3> rx{{{1, 0, 0}, {0, std::cos(b), -std::sin(b)}, {0, std::sin(b), std::cos(b)}}};
  std::array<Vec3, 3> r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i][j] += rz[i][k] * rx[k][j];
  PointCloud rc = c;
  for (auto& p : rc.points) p = rotate(r, p);
  const auto n0 = estimate_normals(c, build_index(c), 12);
  const auto n1 = estimate_normals(rc, build_index(rc), 12);
  const auto k0 = build_index(c).knn_table(12);
  const auto k1 = build_index(rc).knn_table(12);
  for (std::size_t i = 0; i < c.size(); ++i) {
    // Rounding can reorder near-tied neighbours; compare where the sets agree.
    if (!std::equal(k0.begin() + i * 12, k0.begin() + (i + 1) * 12, k1.begin() + i * 12)) continue;
    const auto rn = rotate(r, n0.normals[i]);
    double dot = 0;
    for (int t = 0; t < 3; ++t) dot += rn[t] * n1.normals[i][t];
    CHECK(std::abs(std::abs(dot) - 1.0) < 1e-6);
  }
}

TEST_CASE("neighborhood statistics on a uniform plane") {
  SplitMix64 rng(2024);
  std::vector<Vec3> pts;
  for (int i = 0; i < 2000; ++i) pts.push_back({rng.uniform(), rng.uniform(), 0.0});
  const auto c = oracle::cloud_of(pts);
  const auto idx = build_index(c);
  const auto stats = neighborhood_stats(c, idx, estimate_normals(c, idx, 16), 16);
  std::vector<double> interior_ratio;
  for (PointId i = 0; i < pts.size(); ++i) {
    CHECK(stats.mean_angle[i] == 0.0);
    const auto& p = pts[i];
    if (p[0] > 0.2 && p[0] < 0.8 && p[1] > 0.2 && p[1] < 0.8) interior_ratio.push_back(stats.offset_ratio[i]);
  }
  std::sort(interior_ratio.begin(), interior_ratio.end());
  // Random k-subsets of a disk: centroid offset ~0.15 r over mean distance 2r/3.
  CHECK(interior_ratio[interior_ratio.size() / 2] < 0.3);
  CHECK(interior_ratio[interior_ratio.size() * 95 / 100] < 0.5);
}

TEST_CASE("offset ratio at a straight edge approaches the half-disk value") {
  // Uniform half-plane sample; query points sit on the edge y = 0.
  SplitMix64 rng(77);
  std::vector<Vec3> pts;
  for (int i = 0; i < 20000; ++i) pts.push_back({rng.uniform(), rng.uniform(0.0, 0.5), 0.0});
  std::vector<PointId> probes;
  for (int i = 0; i < 20; ++i) {
    probes.push_back(static_cast<PointId>(pts.size()));
    pts.push_back({0.3 + 0.02 * i, 0.0, 0.0});
  }
  const auto c = oracle::cloud_of(pts);
  const auto idx = build_index(c);
  const auto stats = neighborhood_stats(c, idx, estimate_normals(c, idx, 64), 64);
  const double analytic = (4.0 / (3.0 * std::numbers::pi)) / (2.0 / 3.0);
  double mean = 0;
  for (auto p : probes) mean += stats.offset_ratio[p];
  mean /= probes.size();
  CHECK(analytic == doctest::Approx(0.6366).epsilon(1e-3));
  CHECK(std::abs(mean - analytic) < 0.15);
}

TEST_CASE("mean angle at a 90 degree crease with an even split") {
  // Centre on the crease line; 4 neighbours on each face, equally distant.
  std::vector<Vec3> pts{{0, 0, 0}};
  for (int s : {-1, 1}) {
    pts.push_back({0.1 * s, 0.1, 0});
    pts.push_back({0.1 * s, 0, 0.1});
  }
  for (int s : {-1, 1}) {
    pts.push_back({0.05 * s, 0.1, 0});
    pts.push_back({0.05 * s, 0, 0.1});
  }
  const auto c = oracle::cloud_of(pts);
  const auto idx = build_index(c);
  NormalField nf;
  nf.normals.resize(pts.size());
  nf.degenerate.assign(pts.size(), false);
  nf.normals[0] = {0, 0, 1};  // centre normal aligned with one face
  for (std::size_t i = 1; i < pts.size(); ++i) nf.normals[i] = pts[i][2] == 0 ? Vec3{0, 0, 1} : Vec3{0, 1, 0};
  const auto stats = neighborhood_stats(c, idx, nf, 8);
  CHECK(stats.mean_angle[0] == doctest::Approx(std::numbers::pi / 4).epsilon(1e-12));
  // Flipping signs of normals does not change the angle statistic.
  for (auto& n : nf.normals) n = {-n[0], -n[1], -n[2]};
  CHECK(neighborhood_stats(c, idx, nf, 8).mean_angle[0] == doctest::Approx(std::numbers::pi / 4));
}

TEST_CASE("offset ratio is invariant to translation and uniform scale") {
  const auto c = gen_shape({ShapeKind::Cube, 500, 0.01, 9});
  const auto idx = build_index(c);
  const auto s0 = neighborhood_stats(c, idx, estimate_normals(c, idx, 10), 10);
  PointCloud moved = c;
  for (auto& p : moved.points) p = {4.0 * p[0] + 1.0, 4.0 * p[1] - 2.0, 4.0 * p[2] + 0.5};
  const auto midx = build_index(moved);
  const auto s1 = neighborhood_stats(moved, midx, estimate_normals(moved, midx, 10), 10);
  const auto t0 = idx.knn_table(10), t1 = midx.knn_table(10);
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (!std::equal(t0.begin() + i * 10, t0.begin() + (i + 1) * 10, t1.begin() + i * 10)) continue;
    CHECK(s1.offset_ratio[i] == doctest::Approx(s0.offset_ratio[i]).epsilon(1e-9));
    CHECK(s1.mean_angle[i] == doctest::Approx(s0.mean_angle[i]).epsilon(1e-6).scale(1.0));
  }
}
