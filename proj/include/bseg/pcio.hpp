#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace bseg {

using Vec3 = std::array<double, 3>;
using Label = std::uint32_t;

/// N points with optional per-point class labels.
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Label> labels;  // empty or size() == points.size()
  std::optional<Label> num_classes;

  std::size_t size() const noexcept { return points.size(); }
  bool has_labels() const noexcept { return !labels.empty(); }

  /// Throws PreconditionError when the cloud breaks its invariants
  /// (empty, non-finite coordinate, label count or range mismatch).
  void validate() const;
};

enum class ShapeKind { Cube, Planes, LBracket };

struct ShapeSpec {
  ShapeKind kind = ShapeKind::Cube;
  std::size_t n_points = 1024;
  double noise_sigma = 0.0;
  std::uint64_t seed = 1;
};

/// Parses "cube", "planes" or "lbracket"; throws SpecError otherwise.
ShapeKind parse_shape_kind(std::string_view name);
std::string_view to_string(ShapeKind kind);

PointCloud read_xyz(const std::filesystem::path& path);
void write_xyz(const std::filesystem::path& path, const PointCloud& cloud);

void write_labels(const std::filesystem::path& path, std::span<const Label> labels);
std::vector<Label> read_labels(const std::filesystem::path& path);

/// Writes one "nx ny nz" line per vector.
void write_vectors(const std::filesystem::path& path, std::span<const Vec3> rows);

/// Synthetic labeled surface sample. Deterministic for a fixed spec.
PointCloud gen_shape(const ShapeSpec& spec);

}  // namespace bseg
