#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "bseg/boundary.hpp"
#include "bseg/errors.hpp"
#include "bseg/trainer.hpp"

namespace py = pybind11;
using namespace bseg;

namespace {

using Points = py::array_t<double, py::array::c_style | py::array::forcecast>;
using Labels = py::array_t<std::uint32_t, py::array::c_style | py::array::forcecast>;

PointCloud to_cloud(const Points& points, const std::optional<Labels>& labels) {
  if (points.ndim() != 2 || points.shape(1) != 3) throw PreconditionError("points must have shape (N, 3)");
  PointCloud cloud;
  cloud.points.resize(static_cast<std::size_t>(points.shape(0)));
  std::memcpy(cloud.points.data(), points.data(), cloud.points.size() * sizeof(Vec3));
  if (labels) {
    if (labels->ndim() != 1) throw PreconditionError("labels must be one-dimensional");
    cloud.labels.assign(labels->data(), labels->data() + labels->shape(0));
    Label top = 0;
    for (auto l : cloud.labels) top = std::max(top, l);
    if (!cloud.labels.empty()) cloud.num_classes = top + 1;
  }
  cloud.validate();
  return cloud;
}

Points from_points(const std::vector<Vec3>& pts) {
  Points out({static_cast<py::ssize_t>(pts.size()), py::ssize_t{3}});
  std::memcpy(out.mutable_data(), pts.data(), pts.size() * sizeof(Vec3));
  return out;
}

Labels from_labels(const std::vector<Label>& labels) {
  Labels out(static_cast<py::ssize_t>(labels.size()));
  std::copy(labels.begin(), labels.end(), out.mutable_data());
  return out;
}

py::array_t<bool> from_flags(const std::vector<bool>& flags) {
  py::array_t<bool> out(static_cast<py::ssize_t>(flags.size()));
  for (std::size_t i = 0; i < flags.size(); ++i) out.mutable_data()[i] = flags[i];
  return out;
}

std::vector<PointCloud> to_dataset(const py::list& clouds) {
  std::vector<PointCloud> data;
  for (const auto& item : clouds) {
    auto pair = item.cast<py::tuple>();
    data.push_back(to_cloud(pair[0].cast<Points>(), pair[1].cast<Labels>()));
  }
  return data;
}

}  // namespace

PYBIND11_MODULE(_bseg, m) {
  m.doc() = "Boundary-aware point cloud segmentation";

  auto base = py::register_exception<Error>(m, "Error");
  py::register_exception<PreconditionError>(m, "PreconditionError", base);
  py::register_exception<NumericError>(m, "NumericError", base);
  py::register_exception<IoError>(m, "IoError", base);
  py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<VersionError>(m, "VersionError", base);
  py::register_exception<SchemaError>(m, "SchemaError", base);

  m.def(
      "gen_shape",
      [](const std::string& kind, std::size_t n_points, double noise, std::uint64_t seed) {
        const auto cloud = gen_shape({parse_shape_kind(kind), n_points, noise, seed});
        return py::make_tuple(from_points(cloud.points), from_labels(cloud.labels));
      },
      py::arg("kind"), py::arg("n_points") = 1024, py::arg("noise") = 0.0, py::arg("seed") = 1);

  m.def(
      "read_xyz",
      [](const std::filesystem::path& path) {
        const auto cloud = read_xyz(path);
        return py::make_tuple(from_points(cloud.points),
                              cloud.has_labels() ? py::object(from_labels(cloud.labels)) : py::none());
      },
      py::arg("path"));
  m.def(
      "write_xyz",
      [](const std::filesystem::path& path, const Points& points, const std::optional<Labels>& labels) {
        write_xyz(path, to_cloud(points, labels));
      },
      py::arg("path"), py::arg("points"), py::arg("labels") = py::none());

  m.def(
      "knn",
      [](const Points& points, std::size_t k) {
        const auto cloud = to_cloud(points, std::nullopt);
        const auto table = SpatialIndex(cloud.points).knn_table(k);
        py::array_t<std::uint32_t> out({static_cast<py::ssize_t>(cloud.size()), static_cast<py::ssize_t>(k)});
        std::copy(table.begin(), table.end(), out.mutable_data());
        return out;
      },
      py::arg("points"), py::arg("k"));

  m.def(
      "estimate_normals",
      [](const Points& points, std::size_t k) {
        const auto cloud = to_cloud(points, std::nullopt);
        const auto field = estimate_normals(cloud, SpatialIndex(cloud.points), k);
        return py::make_tuple(from_points(field.normals), from_flags(field.degenerate));
      },
      py::arg("points"), py::arg("k") = 16);

  m.def(
      "detect_boundary",
      [](const Points& points, std::size_t k, double theta, double rho, const std::string& rule) {
        const auto cloud = to_cloud(points, std::nullopt);
        BoundaryThresholds thr{theta, rho, parse_combine_rule(rule)};
        return from_flags(detect_boundary(cloud, SpatialIndex(cloud.points), k, thr).flags);
      },
      py::arg("points"), py::arg("k") = 16, py::arg("theta") = 0.30, py::arg("rho") = 0.50,
      py::arg("rule") = "or");

  py::class_<Checkpoint>(m, "Model")
      .def_static("load", &load_checkpoint, py::arg("path"))
      .def("save", [](const Checkpoint& c, const std::filesystem::path& p) { save_checkpoint(c, p); })
      .def_property_readonly("num_classes", [](const Checkpoint& c) { return c.config.model.num_classes; })
      .def_property_readonly("parameter_count", [](const Checkpoint& c) { return c.params.total_size(); })
      .def("to_json", &checkpoint_to_string)
      .def(
          "segment",
          [](const Checkpoint& c, const Points& points) {
            return from_labels(segment(c, to_cloud(points, std::nullopt)));
          },
          py::arg("points"))
      .def(
          "evaluate",
          [](const Checkpoint& c, const py::list& clouds) {
            const auto data = to_dataset(clouds);
            const auto r = evaluate(c, data);
            py::dict d;
            d["miou"] = r.miou;
            d["oa"] = r.oa;
            d["per_class_iou"] = r.per_class_iou;
            d["mean_infer_ms"] = r.mean_infer_ms;
            d["n_points"] = r.n_points;
            d["boundary_fraction"] = r.boundary_fraction;
            return d;
          },
          py::arg("clouds"));

  m.def(
      "train",
      [](const py::list& clouds, std::size_t num_classes, std::size_t epochs, std::uint64_t seed,
         std::size_t k, std::size_t k_est, std::size_t k_pool, std::size_t dim, std::size_t batch,
         double lr, const py::object& on_epoch) {
        const auto data = to_dataset(clouds);
        TrainConfig cfg;
        cfg.model.num_classes = num_classes;
        cfg.model.k_layer = k;
        cfg.model.k_est = k_est;
        cfg.model.k_pool = k_pool;
        cfg.model.dim = dim;
        cfg.batch_size = batch;
        cfg.epochs = epochs;
        cfg.seed = seed;
        cfg.lr0 = lr;
        EpochCallback cb;
        if (!on_epoch.is_none()) {
          cb = [&](std::size_t e, double loss, double rate) { on_epoch(e, loss, rate); };
        }
        auto result = train(data, cfg, cb);
        return py::make_tuple(std::move(result.checkpoint), result.loss_history);
      },
      py::arg("clouds"), py::arg("num_classes") = 2, py::arg("epochs") = 100, py::arg("seed") = 1,
      py::arg("k") = 32, py::arg("k_est") = 16, py::arg("k_pool") = 16, py::arg("dim") = 256,
      py::arg("batch") = 16, py::arg("lr") = 0.001, py::arg("on_epoch") = py::none());

  m.def(
      "miou",
      [](const std::vector<std::vector<std::uint64_t>>& rows) {
        std::vector<std::uint64_t> flat;
        for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
        return miou(ConfusionMatrix(rows.size(), flat));
      },
      py::arg("confusion"));
  m.def(
      "overall_accuracy",
      [](const std::vector<std::vector<std::uint64_t>>& rows) {
        std::vector<std::uint64_t> flat;
        for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
        return overall_accuracy(ConfusionMatrix(rows.size(), flat));
      },
      py::arg("confusion"));
}
