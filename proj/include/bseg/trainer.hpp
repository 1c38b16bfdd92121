#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bseg/layers.hpp"
#include "bseg/ndiff.hpp"
#include "bseg/pcio.hpp"

namespace bseg {

struct TrainConfig {
  ModelConfig model;
  double lr0 = 0.001;
  std::size_t halve_every = 40;  // epochs
  double lr_floor = 0.00001;
  std::size_t batch_size = 16;  // clouds per optimiser step
  std::size_t epochs = 100;
  std::uint64_t seed = 1;

  void validate() const;
};

/// max(lr_floor, lr0 * 0.5^floor(epoch / halve_every)).
double lr_at(const TrainConfig& config, std::size_t epoch);

/// Mean over rows of -log softmax(logits)[label]; differentiable in logits.
nd::Tensor cross_entropy(const nd::Tensor& logits, std::span<const Label> labels);

/// C x C counts, rows = ground truth, columns = prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}
  ConfusionMatrix(std::size_t classes, std::vector<std::uint64_t> row_major);

  void add(Label truth, Label predicted);
  void add(std::span<const Label> truth, std::span<const Label> predicted);

  std::size_t classes() const noexcept { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const {
    return counts_[truth * classes_ + predicted];
  }
  std::uint64_t total() const noexcept;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

/// TP / (TP + FP + FN) per class; nullopt where the denominator is zero.
std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm);
/// Mean of the defined per-class IoUs. Throws EmptyMatrix if none is defined.
double miou(const ConfusionMatrix& cm);
double overall_accuracy(const ConfusionMatrix& cm);

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  int format_version = kCheckpointVersion;
  TrainConfig config;
  nd::ParamStore params;
};

std::string checkpoint_to_string(const Checkpoint& ckpt);
Checkpoint checkpoint_from_string(const std::string& text);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> loss_history;  // mean per-cloud loss of each epoch
};

using EpochCallback = std::function<void(std::size_t epoch, double loss, double lr)>;

/// Minibatch Adam (beta1 0.9, beta2 0.999, eps 1e-8) on the sum of per-cloud
/// cross-entropies, learning rate from lr_at. Clouds are reshuffled every
/// epoch with a SplitMix64 stream seeded by ~seed; weights use `seed`.
TrainResult train(std::span<const PointCloud> dataset, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

struct EvalReport {
  double miou = 0.0;
  double oa = 0.0;
  std::vector<std::optional<double>> per_class_iou;
  double mean_infer_ms = 0.0;
  std::size_t n_points = 0;
  double boundary_fraction = 0.0;
  ConfusionMatrix confusion{1};
};

EvalReport evaluate(const Checkpoint& ckpt, std::span<const PointCloud> dataset);
std::string report_to_string(const EvalReport& report);

/// Class predictions for one cloud.
std::vector<Label> segment(const Checkpoint& ckpt, const PointCloud& cloud);

struct BenchReport {
  double boundary_fraction = 0.0;
  double t_boundary_aware_ms = 0.0;  // median
  double t_all_graph_ms = 0.0;       // median
  double speedup = 0.0;
  /// Largest logit difference on boundary points between the two variants.
  double max_boundary_logit_diff = 0.0;
};

BenchReport bench_boundary_speedup(const Checkpoint& ckpt, const PointCloud& cloud,
                                   std::size_t repeats);

}  // namespace bseg
