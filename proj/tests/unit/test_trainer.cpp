#include <cmath>
#include <fstream>
#include <sstream>

#include "bseg/errors.hpp"
#include "bseg/trainer.hpp"
#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"

using namespace bseg;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.model.num_classes = 2;
  c.model.dim = 8;
  c.model.k_layer = 6;
  c.model.k_est = 6;
  c.model.k_pool = 6;
  c.epochs = 3;
  c.batch_size = 2;
  c.seed = 4;
  return c;
}

std::vector<PointCloud> tiny_dataset(std::size_t clouds = 3) {
  std::vector<PointCloud> data;
  for (std::size_t s = 1; s <= clouds; ++s) data.push_back(gen_shape({ShapeKind::Planes, 64, 0.01, s}));
  return data;
}

double ce(std::vector<double> logits, Label label) {
  const Label labels[] = {label};
  const std::size_t c = logits.size();
  return cross_entropy(nd::Tensor::constant({1, c}, std::move(logits)), labels).item();
}

}  // namespace

TEST_CASE("cross entropy values") {
  CHECK(ce({0, 0}, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(ce({0, 0}, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(ce({1000, 0}, 0) < 1e-12);
  CHECK(std::abs(ce({1000, 0}, 1) - 1000.0) < 1e-9);
  CHECK_THROWS_AS(ce({0, 0}, 2), BadLabel);
}

TEST_CASE("cross entropy gradient") {
  nd::ParamStore store;
  store.add("z", {4, 3}, 0, 0);
  SplitMix64 rng(3);
  for (auto& v : store.at("z").value) v = rng.uniform(-3, 3);
  const Label labels[] = {0, 2, 1, 2};
  SplitMix64 picks(1);
  CHECK(nd::finite_diff_check([&](const nd::BoundParams& p) { return cross_entropy(p.at("z"), labels); },
                              store, 1e-5, 12, picks) < 1e-8);
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  CHECK(lr_at(c, 0) == 0.001);
  CHECK(lr_at(c, 39) == 0.001);
  CHECK(lr_at(c, 40) == 0.0005);
  CHECK(lr_at(c, 400) == 0.00001);
  double prev = lr_at(c, 0);
  for (std::size_t e = 1; e < 1000; ++e) {
    const double lr = lr_at(c, e);
    CHECK(lr <= prev);
    CHECK(lr >= c.lr_floor);
    prev = lr;
  }
}

TEST_CASE("metrics on hand-computed matrices") {
  CHECK(miou(ConfusionMatrix(2, {2, 0, 0, 2})) == 1.0);
  CHECK(overall_accuracy(ConfusionMatrix(2, {2, 0, 0, 2})) == 1.0);
  CHECK(miou(ConfusionMatrix(2, {1, 1, 1, 1})) == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK(overall_accuracy(ConfusionMatrix(2, {1, 1, 1, 1})) == 0.5);
  CHECK(miou(ConfusionMatrix(2, {3, 0, 0, 0})) == 1.0);
  const auto ious = per_class_iou(ConfusionMatrix(2, {3, 0, 0, 0}));
  CHECK(ious[0] == 1.0);
  CHECK_FALSE(ious[1].has_value());
  CHECK(overall_accuracy(ConfusionMatrix(2, {0, 4, 0, 0})) == 0.0);
  CHECK_THROWS_AS(miou(ConfusionMatrix(3)), EmptyMatrix);
  CHECK_THROWS_AS(overall_accuracy(ConfusionMatrix(3)), EmptyMatrix);
}

TEST_CASE("metrics are invariant to relabelling classes") {
  SplitMix64 rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t c = 2 + rng.below(4);
    std::vector<std::uint64_t> counts(c * c);
    for (auto& v : counts) v = rng.below(20);
    std::vector<std::size_t> perm(c);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = c; i-- > 1;) std::swap(perm[i], perm[rng.below(i + 1)]);
    std::vector<std::uint64_t> permuted(c * c);
    for (std::size_t r = 0; r < c; ++r)
      for (std::size_t k = 0; k < c; ++k) permuted[perm[r] * c + perm[k]] = counts[r * c + k];
    const ConfusionMatrix a(c, counts), b(c, permuted);
    CHECK(std::abs(miou(a) - miou(b)) < 1e-12);
    CHECK(overall_accuracy(a) == overall_accuracy(b));
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  Checkpoint ckpt;
  ckpt.config = tiny_config();
  ckpt.config.lr0 = 0.1 / 3;
  ckpt.params = init_model_params(ckpt.config.model, 12);
  for (auto& [name, p] : ckpt.params.items())
    for (auto& v : p.value) v = std::nextafter(v, 1.0) / 7.0;
  const auto dir = oracle::temp_dir("ckpt");
  save_checkpoint(ckpt, dir / "m.json");
  const auto back = load_checkpoint(dir / "m.json");
  CHECK(back.config.lr0 == ckpt.config.lr0);
  CHECK(back.config.model.dim == 8);
  CHECK(back.config.model.thresholds.theta_angle == ckpt.config.model.thresholds.theta_angle);
  REQUIRE(back.params.items().size() == ckpt.params.items().size());
  for (const auto& [name, p] : ckpt.params.items()) {
    CHECK(back.params.at(name).shape == p.shape);
    CHECK(back.params.at(name).value == p.value);
  }
  CHECK(checkpoint_to_string(back) == checkpoint_to_string(ckpt));
  std::filesystem::remove_all(dir);
}

TEST_CASE("checkpoint errors") {
  Checkpoint ckpt;
  ckpt.config = tiny_config();
  ckpt.params = init_model_params(ckpt.config.model, 1);
  const auto text = checkpoint_to_string(ckpt);

  auto doc = nlohmann::json::parse(text);
  doc["format_version"] = 99;
  CHECK_THROWS_AS(checkpoint_from_string(doc.dump()), VersionError);

  doc = nlohmann::json::parse(text);
  doc["params"].erase("head.1.bias");
  try {
    checkpoint_from_string(doc.dump());
    FAIL("expected SchemaError");
  } catch (const SchemaError& e) {
    CHECK(std::string(e.what()).find("head.1.bias") != std::string::npos);
  }

  doc = nlohmann::json::parse(text);
  doc["params"]["bogus"] = {{"shape", {1}}, {"data", {0.0}}};
  CHECK_THROWS_AS(checkpoint_from_string(doc.dump()), SchemaError);

  doc = nlohmann::json::parse(text);
  doc["params"]["bag.score"]["shape"] = {3};
  CHECK_THROWS_AS(checkpoint_from_string(doc.dump()), SchemaError);

  CHECK_THROWS_AS(checkpoint_from_string("{not json"), SchemaError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/m.json"), IoError);
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  auto cfg = tiny_config();
  cfg.lr0 = 0.0;
  cfg.lr_floor = 0.0;
  cfg.epochs = 1;
  const auto data = tiny_dataset(1);
  const auto result = train(data, cfg);
  const auto init = init_model_params(cfg.model, cfg.seed);
  for (const auto& [name, p] : init.items()) CHECK(result.checkpoint.params.at(name).value == p.value);
}

TEST_CASE("training is deterministic and reduces the loss") {
  auto cfg = tiny_config();
  cfg.epochs = 8;
  cfg.lr0 = 0.01;
  const auto data = tiny_dataset(3);
  std::vector<std::size_t> seen;
  const auto a = train(data, cfg, [&](std::size_t e, double loss, double lr) {
    seen.push_back(e);
    CHECK(std::isfinite(loss));
    CHECK(lr == lr_at(cfg, e));
  });
  const auto b = train(data, cfg);
  CHECK(seen.size() == 8);
  CHECK(a.loss_history == b.loss_history);
  CHECK(checkpoint_to_string(a.checkpoint) == checkpoint_to_string(b.checkpoint));
  CHECK(a.loss_history.back() < a.loss_history.front());
}

TEST_CASE("training preconditions") {
  auto cfg = tiny_config();
  CHECK_THROWS_AS(train({}, cfg), PreconditionError);
  auto data = tiny_dataset(1);
  data[0].labels[0] = 5;
  CHECK_THROWS_AS(train(data, cfg), BadLabel);
  cfg = tiny_config();
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), PreconditionError);
}

TEST_CASE("evaluation") {
  Checkpoint ckpt;
  ckpt.config = tiny_config();
  ckpt.params = init_model_params(ckpt.config.model, 3);
  auto data = tiny_dataset(2);
  CHECK_THROWS_AS(evaluate(ckpt, std::span<const PointCloud>{}), EmptyMatrix);
  // Relabel with the model's own predictions.
  for (auto& cloud : data) cloud.labels = segment(ckpt, cloud);
  const auto report = evaluate(ckpt, data);
  CHECK(report.miou == 1.0);
  CHECK(report.oa == 1.0);
  CHECK(report.n_points == 128);
  CHECK(report.mean_infer_ms > 0.0);
  CHECK(report.boundary_fraction >= 0.0);
  CHECK(report.boundary_fraction <= 1.0);
  const auto doc = nlohmann::json::parse(report_to_string(report));
  for (const char* key : {"miou", "oa", "per_class_iou", "mean_infer_ms", "n_points", "boundary_fraction"})
    CHECK(doc.contains(key));
}

TEST_CASE("boundary benchmark") {
  Checkpoint ckpt;
  ckpt.config = tiny_config();
  ckpt.params = init_model_params(ckpt.config.model, 3);
  const auto cloud = gen_shape({ShapeKind::Cube, 200, 0.0, 2});
  CHECK_THROWS_AS(bench_boundary_speedup(ckpt, cloud, 1), PreconditionError);
  const auto r = bench_boundary_speedup(ckpt, cloud, 3);
  CHECK(r.speedup > 0.0);
  CHECK(r.max_boundary_logit_diff < 1e-10);

  // Thresholds that flag every point: both variants do the same work.
  ckpt.config.model.thresholds.tau_offset = 1e-9;
  const auto all = bench_boundary_speedup(ckpt, cloud, 3);
  CHECK(all.boundary_fraction == 1.0);
  CHECK(all.max_boundary_logit_diff == 0.0);
}
