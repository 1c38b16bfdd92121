#include "bseg/pcio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "bseg/errors.hpp"
#include "bseg/random.hpp"

namespace bseg {

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

double parse_double(std::string_view field, std::size_t line_no) {
  if (!field.empty() && field.front() == '+') field.remove_prefix(1);
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc{} || ptr != field.data() + field.size()) {
    throw FormatError("not a number: '" + std::string(field) + "'", line_no);
  }
  if (!std::isfinite(value)) throw FormatError("non-finite value", line_no);
  return value;
}

Label parse_label(std::string_view field, std::size_t line_no) {
  if (!field.empty() && field.front() == '+') field.remove_prefix(1);
  if (!field.empty() && field.front() == '-') {
    throw FormatError("negative label: '" + std::string(field) + "'", line_no);
  }
  Label value = 0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc{} || ptr != field.data() + field.size()) {
    throw FormatError("not a non-negative integer: '" + std::string(field) + "'", line_no);
  }
  return value;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

void append_double(std::string& buf, double v) {
  char tmp[32];
  auto [ptr, ec] = std::to_chars(tmp, tmp + sizeof tmp, v);
  buf.append(tmp, ptr);
}

std::string_view trim_comment(std::string_view line) {
  // '#' starts a comment only at the beginning of a (whitespace-trimmed) line.
  std::size_t i = 0;
  while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
  if (i < line.size() && line[i] == '#') return {};
  return line;
}

}  // namespace

void PointCloud::validate() const {
  if (points.empty()) throw PreconditionError("point cloud is empty");
  for (const auto& p : points) {
    if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2])) {
      throw PreconditionError("point cloud has a non-finite coordinate");
    }
  }
  if (!labels.empty()) {
    if (labels.size() != points.size()) {
      throw LengthMismatch("label count " + std::to_string(labels.size()) +
                           " != point count " + std::to_string(points.size()));
    }
    if (num_classes) {
      for (auto l : labels) {
        if (l >= *num_classes) throw BadLabel("label " + std::to_string(l) + " >= num_classes");
      }
    }
  }
  if (num_classes && *num_classes == 0) throw PreconditionError("num_classes must be positive");
}

ShapeKind parse_shape_kind(std::string_view name) {
  if (name == "cube") return ShapeKind::Cube;
  if (name == "planes") return ShapeKind::Planes;
  if (name == "lbracket") return ShapeKind::LBracket;
  throw SpecError("unknown shape kind '" + std::string(name) + "'");
}

std::string_view to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::Cube: return "cube";
    case ShapeKind::Planes: return "planes";
    case ShapeKind::LBracket: return "lbracket";
  }
  return "?";
}

PointCloud read_xyz(const std::filesystem::path& path) {
  auto in = open_in(path);
  PointCloud cloud;
  std::optional<std::size_t> width;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto fields = split_fields(trim_comment(line));
    if (fields.empty()) continue;
    if (fields.size() != 3 && fields.size() != 4) {
      throw FormatError("expected 3 or 4 fields, got " + std::to_string(fields.size()), line_no);
    }
    if (width && *width != fields.size()) {
      throw FormatError("mixed 3- and 4-field lines", line_no);
    }
    width = fields.size();
    cloud.points.push_back({parse_double(fields[0], line_no), parse_double(fields[1], line_no),
                            parse_double(fields[2], line_no)});
    if (fields.size() == 4) cloud.labels.push_back(parse_label(fields[3], line_no));
  }
  if (in.bad()) throw IoError("read failure on '" + path.string() + "'");
  if (cloud.points.empty()) throw FormatError("no points in '" + path.string() + "'", 0);
  if (cloud.has_labels()) {
    cloud.num_classes = *std::max_element(cloud.labels.begin(), cloud.labels.end()) + 1;
  }
  return cloud;
}

void write_xyz(const std::filesystem::path& path, const PointCloud& cloud) {
  auto out = open_out(path);
  std::string buf;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    append_double(buf, p[0]);
    buf += ' ';
    append_double(buf, p[1]);
    buf += ' ';
    append_double(buf, p[2]);
    if (cloud.has_labels()) {
      buf += ' ';
      buf += std::to_string(cloud.labels[i]);
    }
    buf += '\n';
  }
  out << buf;
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

void write_labels(const std::filesystem::path& path, std::span<const Label> labels) {
  if (labels.empty()) throw PreconditionError("write_labels: empty label list");
  auto out = open_out(path);
  std::string buf;
  for (auto l : labels) {
    buf += std::to_string(l);
    buf += '\n';
  }
  out << buf;
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

std::vector<Label> read_labels(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<Label> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto fields = split_fields(line);
    if (fields.empty()) continue;
    if (fields.size() != 1) throw FormatError("expected one label per line", line_no);
    labels.push_back(parse_label(fields[0], line_no));
  }
  if (in.bad()) throw IoError("read failure on '" + path.string() + "'");
  if (labels.empty()) throw FormatError("label file '" + path.string() + "' is empty", 0);
  return labels;
}

void write_vectors(const std::filesystem::path& path, std::span<const Vec3> rows) {
  auto out = open_out(path);
  std::string buf;
  for (const auto& r : rows) {
    append_double(buf, r[0]);
    buf += ' ';
    append_double(buf, r[1]);
    buf += ' ';
    append_double(buf, r[2]);
    buf += '\n';
  }
  out << buf;
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

// Draw order per point, identical for every kind:
//   1. face selector: one uniform() draw
//   2. in-face coordinates u, v: two uniform() draws
//   3. noise: three gaussian() draws (x, y, z), two uniforms each,
//      always consumed even when noise_sigma == 0
//
// cube:     face = below(6); face f fixes axis f/2 at value f%2, u and v fill
//           the remaining axes in ascending order. label = f.
// planes:   face = below(2); label 0 -> (u, 0, v), label 1 -> (u, v, 0).
// lbracket: base (x in [0,1], y = 0) and a half-height leg (x = 0,
//           y in [0,0.5]), both extruded over z in [0,1]. The face is picked
//           by area: 1.5 * uniform() < 1 -> base (label 0), else leg (label 1).
//           base -> (u, 0, v), leg -> (0, 0.5 u, v).
PointCloud gen_shape(const ShapeSpec& spec) {
  if (spec.n_points < 8) throw PreconditionError("gen_shape: n_points must be >= 8");
  if (!(spec.noise_sigma >= 0.0) || !std::isfinite(spec.noise_sigma)) {
    throw PreconditionError("gen_shape: noise_sigma must be finite and >= 0");
  }
  SplitMix64 rng(spec.seed);
  PointCloud cloud;
  cloud.points.reserve(spec.n_points);
  cloud.labels.reserve(spec.n_points);
  cloud.num_classes = spec.kind == ShapeKind::Cube ? 6 : 2;

  for (std::size_t i = 0; i < spec.n_points; ++i) {
    Vec3 p{};
    Label label = 0;
    const double selector = rng.uniform();
    const double u = rng.uniform();
    const double v = rng.uniform();
    switch (spec.kind) {
      case ShapeKind::Cube: {
        label = static_cast<Label>(std::min(5.0, std::floor(selector * 6.0)));
        const std::size_t axis = label / 2;
        p[axis] = static_cast<double>(label % 2);
        p[axis == 0 ? 1 : 0] = u;
        p[axis == 2 ? 1 : 2] = v;
        break;
      }
      case ShapeKind::Planes:
        label = selector < 0.5 ? 0 : 1;
        p = label == 0 ? Vec3{u, 0.0, v} : Vec3{u, v, 0.0};
        break;
      case ShapeKind::LBracket:
        label = 1.5 * selector < 1.0 ? 0 : 1;
        p = label == 0 ? Vec3{u, 0.0, v} : Vec3{0.0, 0.5 * u, v};
        break;
    }
    for (auto& c : p) c += spec.noise_sigma * rng.gaussian();
    cloud.points.push_back(p);
    cloud.labels.push_back(label);
  }
  return cloud;
}

}  // namespace bseg
