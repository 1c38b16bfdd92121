#include "bseg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "bseg/errors.hpp"
#include "bseg/random.hpp"
#include "json.hpp"

namespace bseg {

using nd::Tensor;
using json = nlohmann::json;

namespace {

// Every forward/backward pass allocates and frees the same large tensor
// buffers. Stop glibc from returning them to the OS between passes, which
// otherwise costs a page fault per touched page on every step.
void keep_heap_warm() {
#if defined(__GLIBC__)
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
  });
#endif
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  // lr0 == 0 is accepted so that a frozen run can be expressed.
  if (!(lr_floor >= 0.0) || !(lr0 >= lr_floor) || !std::isfinite(lr0)) {
    throw PreconditionError("learning rates must satisfy lr0 >= lr_floor >= 0");
  }
  if (halve_every < 1) throw PreconditionError("halve_every must be >= 1");
  if (batch_size < 1) throw PreconditionError("batch_size must be >= 1");
}

double lr_at(const TrainConfig& config, std::size_t epoch) {
  const auto halvings = static_cast<double>(epoch / config.halve_every);
  return std::max(config.lr_floor, config.lr0 * std::pow(0.5, halvings));
}

Tensor cross_entropy(const Tensor& logits, std::span<const Label> labels) {
  if (logits.rank() != 2) throw PreconditionError("cross_entropy expects [N, C] logits");
  const auto n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw LengthMismatch("cross_entropy: label count differs from rows");
  for (auto l : labels) {
    if (l >= c) throw BadLabel("label " + std::to_string(l) + " >= class count " + std::to_string(c));
  }
  const auto x = logits.data();
  std::vector<double> probs(n * c);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - mx) / z;
    total += (mx + std::log(z)) - row[labels[i]];
  }
  std::vector<Label> lab(labels.begin(), labels.end());
  return nd::make_result({}, {total / static_cast<double>(n)}, {logits},
                         [n, c, probs = std::move(probs), lab = std::move(lab)](nd::detail::Node& node) {
                           auto& g = node.inputs[0]->grad_buffer();
                           const double s = node.grad[0] / static_cast<double>(n);
                           for (std::size_t i = 0; i < n; ++i) {
                             for (std::size_t j = 0; j < c; ++j) {
                               g[i * c + j] += s * (probs[i * c + j] - (j == lab[i] ? 1.0 : 0.0));
                             }
                           }
                         });
}

// -------------------------------------------------------------- metrics

ConfusionMatrix::ConfusionMatrix(std::size_t classes, std::vector<std::uint64_t> row_major)
    : classes_(classes), counts_(std::move(row_major)) {
  if (counts_.size() != classes * classes) throw LengthMismatch("confusion matrix must be C x C");
}

void ConfusionMatrix::add(Label truth, Label predicted) {
  if (truth >= classes_ || predicted >= classes_) throw BadLabel("class id outside confusion matrix");
  ++counts_[truth * classes_ + predicted];
}

void ConfusionMatrix::add(std::span<const Label> truth, std::span<const Label> predicted) {
  if (truth.size() != predicted.size()) throw LengthMismatch("truth/prediction length differ");
  for (std::size_t i = 0; i < truth.size(); ++i) add(truth[i], predicted[i]);
}

std::uint64_t ConfusionMatrix::total() const noexcept {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm) {
  const auto c = cm.classes();
  std::vector<std::optional<double>> out(c);
  for (std::size_t k = 0; k < c; ++k) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < c; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    const auto tp = cm.at(k, k);
    const auto denom = row + col - tp;
    if (denom > 0) out[k] = static_cast<double>(tp) / static_cast<double>(denom);
  }
  return out;
}

double miou(const ConfusionMatrix& cm) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& iou : per_class_iou(cm)) {
    if (iou) {
      sum += *iou;
      ++count;
    }
  }
  if (count == 0) throw EmptyMatrix("miou: confusion matrix is empty");
  return sum / static_cast<double>(count);
}

double overall_accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw EmptyMatrix("overall_accuracy: confusion matrix is empty");
  std::uint64_t trace = 0;
  for (std::size_t k = 0; k < cm.classes(); ++k) trace += cm.at(k, k);
  return static_cast<double>(trace) / static_cast<double>(total);
}

// ----------------------------------------------------------- checkpoints

namespace {

json config_to_json(const TrainConfig& c) {
  return json{{"num_classes", c.model.num_classes},
              {"dim", c.model.dim},
              {"k_layer", c.model.k_layer},
              {"k_est", c.model.k_est},
              {"k_pool", c.model.k_pool},
              {"theta_angle", c.model.thresholds.theta_angle},
              {"tau_offset", c.model.thresholds.tau_offset},
              {"combine", std::string(to_string(c.model.thresholds.combine))},
              {"lr0", c.lr0},
              {"halve_every", c.halve_every},
              {"lr_floor", c.lr_floor},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"seed", c.seed}};
}

template <class T>
T required(const json& obj, const std::string& key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) throw SchemaError(where + ": missing key '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw SchemaError(where + ": bad value for '" + key + "': " + e.what());
  }
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.model.num_classes = required<std::size_t>(j, "num_classes", "config");
  c.model.dim = required<std::size_t>(j, "dim", "config");
  c.model.k_layer = required<std::size_t>(j, "k_layer", "config");
  c.model.k_est = required<std::size_t>(j, "k_est", "config");
  c.model.k_pool = required<std::size_t>(j, "k_pool", "config");
  c.model.thresholds.theta_angle = required<double>(j, "theta_angle", "config");
  c.model.thresholds.tau_offset = required<double>(j, "tau_offset", "config");
  try {
    c.model.thresholds.combine = parse_combine_rule(required<std::string>(j, "combine", "config"));
  } catch (const PreconditionError& e) {
    throw SchemaError(std::string("config: ") + e.what());
  }
  c.lr0 = required<double>(j, "lr0", "config");
  c.halve_every = required<std::size_t>(j, "halve_every", "config");
  c.lr_floor = required<double>(j, "lr_floor", "config");
  c.batch_size = required<std::size_t>(j, "batch_size", "config");
  c.epochs = required<std::size_t>(j, "epochs", "config");
  c.seed = required<std::uint64_t>(j, "seed", "config");
  return c;
}

}  // namespace

std::string checkpoint_to_string(const Checkpoint& ckpt) {
  json params = json::object();
  for (const auto& [name, p] : ckpt.params.items()) {
    params[name] = json{{"shape", p.shape}, {"data", p.value}};
  }
  json doc{{"format_version", ckpt.format_version},
           {"config", config_to_json(ckpt.config)},
           {"params", std::move(params)}};
  return doc.dump(1) + "\n";
}

Checkpoint checkpoint_from_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  const int version = required<int>(doc, "format_version", "checkpoint");
  if (version != kCheckpointVersion) {
    throw VersionError("unsupported checkpoint format_version " + std::to_string(version) +
                       " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.format_version = version;
  if (!doc.contains("config")) throw SchemaError("checkpoint: missing key 'config'");
  ckpt.config = config_from_json(doc.at("config"));
  try {
    ckpt.config.validate();
  } catch (const PreconditionError& e) {
    throw SchemaError(std::string("checkpoint config invalid: ") + e.what());
  }
  register_model_params(ckpt.params, ckpt.config.model);
  if (!doc.contains("params") || !doc.at("params").is_object()) {
    throw SchemaError("checkpoint: missing key 'params'");
  }
  const auto& params = doc.at("params");
  for (auto& [name, p] : ckpt.params.items()) {
    if (!params.contains(name)) throw SchemaError("checkpoint: missing parameter '" + name + "'");
    const auto& entry = params.at(name);
    const auto where = "parameter '" + name + "'";
    const auto shape = required<nd::Shape>(entry, "shape", where);
    if (shape != p.shape) {
      throw SchemaError(where + ": shape " + nd::shape_str(shape) + " expected " + nd::shape_str(p.shape));
    }
    auto data = required<std::vector<double>>(entry, "data", where);
    if (data.size() != p.value.size()) throw SchemaError(where + ": data length does not match shape");
    p.value = std::move(data);
  }
  for (const auto& [name, _] : params.items()) {
    if (!ckpt.params.contains(name)) throw SchemaError("checkpoint: unexpected parameter '" + name + "'");
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << checkpoint_to_string(ckpt);
  if (!out) throw IoError("write failure on '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_string(ss.str());
}

// -------------------------------------------------------------- training

namespace {

struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;
  std::uint64_t step = 0;

  void apply(nd::ParamStore& store, double lr) {
    ++step;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
    for (auto& [name, p] : store.items()) {
      auto& [m, v] = moments[name];
      if (m.empty()) {
        m.assign(p.value.size(), 0.0);
        v.assign(p.value.size(), 0.0);
      }
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g;
        v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g * g;
        p.value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
      }
    }
  }
};

}  // namespace

TrainResult train(std::span<const PointCloud> dataset, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  config.validate();
  if (dataset.empty()) throw PreconditionError("train: empty dataset");
  keep_heap_warm();
  std::vector<PreparedCloud> prepared;
  prepared.reserve(dataset.size());
  for (const auto& cloud : dataset) {
    cloud.validate();
    if (!cloud.has_labels()) throw PreconditionError("train: every cloud must be labeled");
    for (auto l : cloud.labels) {
      if (l >= config.model.num_classes) {
        throw BadLabel("train: label " + std::to_string(l) + " >= num_classes " +
                       std::to_string(config.model.num_classes));
      }
    }
    prepared.push_back(prepare_cloud(cloud, config.model));
  }

  TrainResult result;
  result.checkpoint.config = config;
  result.checkpoint.params = init_model_params(config.model, config.seed);
  auto& store = result.checkpoint.params;
  SplitMix64 shuffle_rng(~config.seed);
  AdamState adam;
  std::vector<std::size_t> order(dataset.size());

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(config, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i-- > 1;) {
      std::swap(order[i], order[static_cast<std::size_t>(shuffle_rng.below(i + 1))]);
    }
    double epoch_loss = 0.0;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += config.batch_size, ++batch) {
      const auto stop = std::min(order.size(), start + config.batch_size);
      store.zero_grad();
      try {
        for (auto pos = start; pos < stop; ++pos) {
          const auto c = order[pos];
          nd::Tape tape;
          const auto bound = store.bind(&tape);
          const auto loss = cross_entropy(model_forward(bound, prepared[c]), dataset[c].labels);
          tape.backward(loss);
          store.accumulate_grads(bound);
          epoch_loss += loss.item();
        }
        adam.apply(store, lr);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " batch " + std::to_string(batch) +
                           ": " + e.what());
      }
    }
    epoch_loss /= static_cast<double>(dataset.size());
    result.loss_history.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch, epoch_loss, lr);
  }
  return result;
}

// ------------------------------------------------------------ evaluation

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point t0, Clock::time_point t1) {
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<Label> segment(const Checkpoint& ckpt, const PointCloud& cloud) {
  const auto bound = ckpt.params.bind(nullptr);
  return argmax_rows(model_forward(bound, cloud, ckpt.config.model));
}

EvalReport evaluate(const Checkpoint& ckpt, std::span<const PointCloud> dataset) {
  if (dataset.empty()) throw EmptyMatrix("evaluate: empty dataset");
  keep_heap_warm();
  const auto& model = ckpt.config.model;
  const auto bound = ckpt.params.bind(nullptr);
  EvalReport report;
  report.confusion = ConfusionMatrix(model.num_classes);
  double total_ms = 0.0;
  std::size_t boundary_points = 0;
  for (const auto& cloud : dataset) {
    if (!cloud.has_labels()) throw PreconditionError("evaluate: dataset must be labeled");
    const auto t0 = Clock::now();
    const auto prep = prepare_cloud(cloud, model);
    const auto logits = model_forward(bound, prep);
    const auto t1 = Clock::now();
    total_ms += elapsed_ms(t0, t1);
    report.confusion.add(cloud.labels, argmax_rows(logits));
    report.n_points += cloud.size();
    boundary_points += prep.mask.boundary_indices.size();
  }
  report.per_class_iou = per_class_iou(report.confusion);
  report.miou = miou(report.confusion);
  report.oa = overall_accuracy(report.confusion);
  report.mean_infer_ms = total_ms / static_cast<double>(dataset.size());
  report.boundary_fraction =
      static_cast<double>(boundary_points) / static_cast<double>(report.n_points);
  return report;
}

std::string report_to_string(const EvalReport& r) {
  json per_class = json::array();
  for (const auto& iou : r.per_class_iou) per_class.push_back(iou ? json(*iou) : json(nullptr));
  json doc{{"miou", r.miou},
           {"oa", r.oa},
           {"per_class_iou", per_class},
           {"mean_infer_ms", r.mean_infer_ms},
           {"n_points", r.n_points},
           {"boundary_fraction", r.boundary_fraction}};
  return doc.dump(2) + "\n";
}

BenchReport bench_boundary_speedup(const Checkpoint& ckpt, const PointCloud& cloud,
                                   std::size_t repeats) {
  if (repeats < 3) throw PreconditionError("bench_boundary_speedup: repeats must be >= 3");
  keep_heap_warm();
  const auto& model = ckpt.config.model;
  const auto bound = ckpt.params.bind(nullptr);
  std::vector<double> t_aware, t_all;
  BenchReport report;
  Tensor aware_logits, all_logits;
  BoundaryMask mask;
  for (std::size_t r = 0; r < repeats; ++r) {
    auto t0 = Clock::now();
    const auto prep = prepare_cloud(cloud, model, Routing::BoundaryAware);
    aware_logits = model_forward(bound, prep);
    auto t1 = Clock::now();
    t_aware.push_back(elapsed_ms(t0, t1));
    mask = prep.mask;

    t0 = Clock::now();
    all_logits = model_forward(bound, prepare_cloud(cloud, model, Routing::AllGraph));
    t1 = Clock::now();
    t_all.push_back(elapsed_ms(t0, t1));
  }
  report.boundary_fraction = mask.boundary_fraction();
  report.t_boundary_aware_ms = median(t_aware);
  report.t_all_graph_ms = median(t_all);
  report.speedup = report.t_all_graph_ms / report.t_boundary_aware_ms;
  const auto c = aware_logits.dim(1);
  for (auto i : mask.boundary_indices) {
    for (std::size_t j = 0; j < c; ++j) {
      report.max_boundary_logit_diff =
          std::max(report.max_boundary_logit_diff,
                   std::abs(aware_logits[i * c + j] - all_logits[i * c + j]));
    }
  }
  return report;
}

}  // namespace bseg
