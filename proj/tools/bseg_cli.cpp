// bseg: command-line front end for boundary-aware point cloud segmentation.
//
// Exit status: 0 success, 1 usage or invalid argument, 2 I/O or format
// error, 3 numeric failure. Diagnostics go to standard error; results go to
// standard output as "key value" lines.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bseg/boundary.hpp"
#include "bseg/errors.hpp"
#include "bseg/layers.hpp"
#include "bseg/pcio.hpp"
#include "bseg/spatial.hpp"
#include "bseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace bseg;

namespace {

std::vector<PointCloud> read_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("'" + dir.string() + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".xyz") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .xyz files in '" + dir.string() + "'");
  std::vector<PointCloud> clouds;
  for (const auto& f : files) {
    auto cloud = read_xyz(f);
    if (!cloud.has_labels()) throw FormatError("'" + f.string() + "' has no labels", 0);
    clouds.push_back(std::move(cloud));
  }
  return clouds;
}

struct ThresholdFlags {
  double theta = BoundaryThresholds{}.theta_angle;
  double rho = BoundaryThresholds{}.tau_offset;
  std::string rule = "or";

  void attach(CLI::App* app) {
    app->add_option("--theta", theta, "Mean normal-angle threshold (radians)")->capture_default_str();
    app->add_option("--rho", rho, "Centroid offset-ratio threshold")->capture_default_str();
    app->add_option("--rule", rule, "Combination of the two criteria")
        ->check(CLI::IsMember({"or", "and"}))
        ->capture_default_str();
  }

  BoundaryThresholds get() const {
    BoundaryThresholds thr{theta, rho, parse_combine_rule(rule)};
    thr.validate();
    return thr;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Boundary-aware point cloud semantic segmentation"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a labeled synthetic point cloud");
  std::string shape;
  ShapeSpec spec;
  fs::path gen_out;
  gen->add_option("--shape", shape, "cube | planes | lbracket")->required();
  gen->add_option("--points", spec.n_points, "Number of points")->capture_default_str();
  gen->add_option("--noise", spec.noise_sigma, "Gaussian noise sigma")->capture_default_str();
  gen->add_option("--seed", spec.seed, "Generator seed")->capture_default_str();
  gen->add_option("--out", gen_out, "Output XYZ file")->required();

  // normals
  auto* normals = app.add_subcommand("normals", "Estimate PCA normals");
  fs::path normals_in, normals_out;
  std::size_t normals_k = ModelConfig{}.k_est;
  normals->add_option("--in", normals_in, "Input XYZ file")->required();
  normals->add_option("--k", normals_k, "Neighbour count")->capture_default_str();
  normals->add_option("--out", normals_out, "Output normals file")->required();

  // boundary
  auto* boundary = app.add_subcommand("boundary", "Classify boundary points");
  fs::path boundary_in, boundary_out;
  std::size_t boundary_k = ModelConfig{}.k_est;
  ThresholdFlags boundary_thr;
  boundary->add_option("--in", boundary_in, "Input XYZ file")->required();
  boundary->add_option("--k", boundary_k, "Neighbour count for the statistics")->capture_default_str();
  boundary_thr.attach(boundary);
  boundary->add_option("--out", boundary_out, "Output mask file (0/1 per line)")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model on a directory of labeled clouds");
  fs::path train_data, train_out;
  TrainConfig tc;
  std::size_t classes = 0;
  ThresholdFlags train_thr;
  train_cmd->add_option("--data", train_data, "Directory of labeled .xyz files")->required();
  train_cmd->add_option("--epochs", tc.epochs, "Training epochs")->capture_default_str();
  train_cmd->add_option("--seed", tc.seed, "Seed for weights and shuffling")->capture_default_str();
  train_cmd->add_option("--k", tc.model.k_layer, "Neighbours of the attention graph")->capture_default_str();
  train_cmd->add_option("--k-est", tc.model.k_est, "Neighbours for boundary estimation")->capture_default_str();
  train_cmd->add_option("--k-pool", tc.model.k_pool, "Neighbours for global pooling")->capture_default_str();
  train_cmd->add_option("--dim", tc.model.dim, "Feature width D")->capture_default_str();
  train_cmd->add_option("--batch", tc.batch_size, "Clouds per optimiser step")->capture_default_str();
  train_cmd->add_option("--lr", tc.lr0, "Initial learning rate")->capture_default_str();
  train_cmd->add_option("--halve-every", tc.halve_every, "Epochs between learning-rate halvings")
      ->capture_default_str();
  train_cmd->add_option("--lr-floor", tc.lr_floor, "Learning-rate floor")->capture_default_str();
  train_cmd->add_option("--classes", classes, "Class count (0: largest label + 1)")->capture_default_str();
  train_thr.attach(train_cmd);
  train_cmd->add_option("--out", train_out, "Output checkpoint")->required();

  // segment
  auto* seg = app.add_subcommand("segment", "Predict per-point labels");
  fs::path seg_model, seg_in, seg_out;
  seg->add_option("--model", seg_model, "Checkpoint")->required();
  seg->add_option("--in", seg_in, "Input XYZ file")->required();
  seg->add_option("--out", seg_out, "Output label file")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a model on a labeled directory");
  fs::path eval_model, eval_data, eval_report;
  eval->add_option("--model", eval_model, "Checkpoint")->required();
  eval->add_option("--data", eval_data, "Directory of labeled .xyz files")->required();
  eval->add_option("--report", eval_report, "Output report file")->required();

  // bench
  auto* bench = app.add_subcommand("bench", "Time boundary-aware versus all-graph inference");
  fs::path bench_model, bench_in;
  std::size_t repeats = 5;
  bench->add_option("--model", bench_model, "Checkpoint")->required();
  bench->add_option("--in", bench_in, "Input XYZ file")->required();
  bench->add_option("--repeat", repeats, "Timed repeats (>= 3)")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) {
      spec.kind = parse_shape_kind(shape);
      write_xyz(gen_out, gen_shape(spec));
      std::cout << "points " << spec.n_points << "\n";
    } else if (*normals) {
      if (normals_k < 3) throw KTooSmall("--k must be >= 3");
      const auto cloud = read_xyz(normals_in);
      const auto index = build_index(cloud);
      const auto field = estimate_normals(cloud, index, normals_k);
      write_vectors(normals_out, field.normals);
      std::cout << "points " << cloud.size() << "\n";
      std::cout << "degenerate " << field.degenerate_count() << "\n";
    } else if (*boundary) {
      const auto thr = boundary_thr.get();
      if (boundary_k < 3) throw KTooSmall("--k must be >= 3");
      const auto cloud = read_xyz(boundary_in);
      const auto mask = detect_boundary(cloud, build_index(cloud), boundary_k, thr);
      std::vector<Label> flags(mask.size());
      for (std::size_t i = 0; i < flags.size(); ++i) flags[i] = mask.flags[i] ? 1 : 0;
      write_labels(boundary_out, flags);
      std::cout << "boundary_points " << mask.boundary_indices.size() << "\n";
      std::cout << "boundary_fraction " << mask.boundary_fraction() << "\n";
    } else if (*train_cmd) {
      tc.model.thresholds = train_thr.get();
      tc.model.num_classes = std::max<std::size_t>(classes, 1);
      tc.validate();
      const auto data = read_dataset(train_data);
      if (classes == 0) {
        Label top = 0;
        for (const auto& c : data) top = std::max(top, *std::max_element(c.labels.begin(), c.labels.end()));
        tc.model.num_classes = top + 1;
      }
      std::cout.precision(10);
      const auto result = train(data, tc, [](std::size_t epoch, double loss, double lr) {
        std::cout << "epoch " << epoch << " loss " << loss << " lr " << lr << "\n" << std::flush;
      });
      save_checkpoint(result.checkpoint, train_out);
    } else if (*seg) {
      const auto ckpt = load_checkpoint(seg_model);
      const auto cloud = read_xyz(seg_in);
      const auto labels = segment(ckpt, cloud);
      write_labels(seg_out, labels);
      std::cout << "points " << labels.size() << "\n";
    } else if (*eval) {
      const auto ckpt = load_checkpoint(eval_model);
      const auto data = read_dataset(eval_data);
      const auto report = evaluate(ckpt, data);
      std::ofstream out(eval_report, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot open '" + eval_report.string() + "' for writing");
      out << report_to_string(report);
      if (!out) throw IoError("write failure on '" + eval_report.string() + "'");
      std::cout << "miou " << report.miou << "\n";
      std::cout << "oa " << report.oa << "\n";
      std::cout << "mean_infer_ms " << report.mean_infer_ms << "\n";
    } else if (*bench) {
      if (repeats < 3) throw PreconditionError("--repeat must be >= 3");
      const auto ckpt = load_checkpoint(bench_model);
      const auto cloud = read_xyz(bench_in);
      const auto r = bench_boundary_speedup(ckpt, cloud, repeats);
      std::cout << "boundary_fraction " << r.boundary_fraction << "\n";
      std::cout << "t_boundary_aware_ms " << r.t_boundary_aware_ms << "\n";
      std::cout << "t_all_graph_ms " << r.t_all_graph_ms << "\n";
      std::cout << "speedup " << r.speedup << "\n";
    }
  } catch (const PreconditionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
