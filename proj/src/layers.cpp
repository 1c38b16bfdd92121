#include "bseg/layers.hpp"

#include <algorithm>
#include <string>

#include "bseg/errors.hpp"

namespace bseg {

using nd::Tensor;

void ModelConfig::validate() const {
  if (num_classes < 1) throw PreconditionError("num_classes must be >= 1");
  if (dim < 1) throw PreconditionError("feature width must be >= 1");
  if (k_layer < 1 || k_pool < 1) throw PreconditionError("k_layer and k_pool must be >= 1");
  if (k_est < 3) throw KTooSmall("k_est must be >= 3");
  thresholds.validate();
}

namespace {

void add_mlp(nd::ParamStore& store, const std::string& prefix,
             std::initializer_list<std::size_t> widths) {
  auto it = widths.begin();
  std::size_t in = *it++;
  for (std::size_t layer = 0; it != widths.end(); ++it, ++layer) {
    const auto out = *it;
    const auto base = prefix + "." + std::to_string(layer);
    store.add(base + ".weight", {out, in}, in, out);
    store.add(base + ".bias", {out}, 0, 0);
    in = out;
  }
}

std::size_t count_layers(const nd::BoundParams& params, const std::string& prefix) {
  std::size_t n = 0;
  while (params.count(prefix + "." + std::to_string(n) + ".weight")) ++n;
  return n;
}

}  // namespace

void register_model_params(nd::ParamStore& store, const ModelConfig& config) {
  const auto d = config.dim;
  add_mlp(store, "bag.center", {3, kEncoderHidden, d});
  add_mlp(store, "bag.neighbor", {3, kEncoderHidden, d});
  add_mlp(store, "bag.edge", {1, kEncoderHidden, d});
  store.add("bag.score", {d}, d, 1);
  add_mlp(store, "pool", {3, kPoolWidths[0], kPoolWidths[1], kPoolWidths[2], kPoolWidths[3]});
  add_mlp(store, "point", {6, kEncoderHidden, d});
  add_mlp(store, "head", {d + kGlobalWidth, kHeadWidths[0], kHeadWidths[1], config.num_classes});
}

nd::ParamStore init_model_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  nd::ParamStore store;
  register_model_params(store, config);
  SplitMix64 rng(seed);
  store.initialize(rng);
  return store;
}

namespace {

// Layers [first, end) of the MLP under `prefix`.
Tensor run_mlp(const nd::BoundParams& params, const std::string& prefix, Tensor x, std::size_t first) {
  const auto layers = count_layers(params, prefix);
  if (layers == 0) throw SchemaError("no MLP parameters under '" + prefix + "'");
  for (std::size_t l = first; l < layers; ++l) {
    const auto base = prefix + "." + std::to_string(l);
    x = nd::linear(x, params.at(base + ".weight"), params.at(base + ".bias"));
    if (l + 1 < layers) x = nd::leaky_relu(x);
  }
  return x;
}

}  // namespace

Tensor mlp_forward(const nd::BoundParams& params, const std::string& prefix, Tensor x) {
  return run_mlp(params, prefix, std::move(x), 0);
}

GraphBatch stack_graphs(std::span<const FusedGraph> graphs) {
  GraphBatch batch;
  batch.count = graphs.size();
  if (graphs.empty()) return batch;
  const auto k = graphs.front().k();
  batch.k = k;
  std::vector<double> centers, neighbors, weights;
  centers.reserve(graphs.size() * 3);
  neighbors.reserve(graphs.size() * k * 3);
  weights.reserve(graphs.size() * k);
  for (const auto& g : graphs) {
    if (g.k() != k) throw LengthMismatch("stack_graphs: graphs differ in neighbour count");
    centers.insert(centers.end(), g.fused_center.begin(), g.fused_center.end());
    for (const auto& p : g.fused_neighbors) neighbors.insert(neighbors.end(), p.begin(), p.end());
    weights.insert(weights.end(), g.edge_weights.begin(), g.edge_weights.end());
  }
  const auto b = graphs.size();
  batch.centers = Tensor::constant({b, 3}, std::move(centers));
  batch.neighbors = Tensor::constant({b, k, 3}, std::move(neighbors));
  batch.edge_weights = Tensor::constant({b, k, 1}, std::move(weights));
  return batch;
}

namespace {

// scores[b, j] = u . leaky_relu(c[b] + e[b, j] - w[b, j]) without
// materialising the [B, k, D] pre-activations.
Tensor neighbour_scores(const Tensor& center, const Tensor& neighbor, const Tensor& edge, const Tensor& u) {
  const auto b = neighbor.dim(0), k = neighbor.dim(1), d = neighbor.dim(2);
  if (center.shape() != nd::Shape{b, d} || edge.shape() != neighbor.shape() || u.shape() != nd::Shape{d}) {
    throw PreconditionError("attention scores: inconsistent encoder shapes");
  }
  const double* c = center.data().data();
  const double* e = neighbor.data().data();
  const double* w = edge.data().data();
  const double* uv = u.data().data();
  nd::Buffer out(b * k);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const auto row = (i * k + j) * d;
      double s = 0.0;
      for (std::size_t t = 0; t < d; ++t) {
        const double z = c[i * d + t] + e[row + t] - w[row + t];
        s += uv[t] * (z > 0.0 ? z : nd::kLeakySlope * z);
      }
      out[i * k + j] = s;
    }
  }
  return nd::make_result({b, k}, std::move(out), {center, neighbor, edge, u}, [b, k, d](nd::detail::Node& n) {
    const auto& in = n.inputs;
    const double* c = in[0]->value.data();
    const double* e = in[1]->value.data();
    const double* w = in[2]->value.data();
    const double* uv = in[3]->value.data();
    double* gc = in[0]->requires_grad ? in[0]->grad_buffer().data() : nullptr;
    double* ge = in[1]->requires_grad ? in[1]->grad_buffer().data() : nullptr;
    double* gw = in[2]->requires_grad ? in[2]->grad_buffer().data() : nullptr;
    double* gu = in[3]->requires_grad ? in[3]->grad_buffer().data() : nullptr;
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const double g = n.grad[i * k + j];
        const auto row = (i * k + j) * d;
        for (std::size_t t = 0; t < d; ++t) {
          const double z = c[i * d + t] + e[row + t] - w[row + t];
          const double slope = z > 0.0 ? 1.0 : nd::kLeakySlope;
          const double dz = g * uv[t] * slope;
          if (gc) gc[i * d + t] += dz;
          if (ge) ge[row + t] += dz;
          if (gw) gw[row + t] -= dz;
          if (gu) gu[t] += g * slope * z;
        }
      }
    }
  });
}

// out[b] = sum_j a[b, j] * e[b, j, :]
Tensor weighted_sum(const Tensor& a, const Tensor& e) {
  const auto b = e.dim(0), k = e.dim(1), d = e.dim(2);
  nd::Buffer out(b * d, 0.0);
  const double* av = a.data().data();
  const double* ev = e.data().data();
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double w = av[i * k + j];
      const double* row = ev + (i * k + j) * d;
      for (std::size_t t = 0; t < d; ++t) out[i * d + t] += w * row[t];
    }
  }
  return nd::make_result({b, d}, std::move(out), {a, e}, [b, k, d](nd::detail::Node& n) {
    const double* av = n.inputs[0]->value.data();
    const double* ev = n.inputs[1]->value.data();
    double* ga = n.inputs[0]->requires_grad ? n.inputs[0]->grad_buffer().data() : nullptr;
    double* ge = n.inputs[1]->requires_grad ? n.inputs[1]->grad_buffer().data() : nullptr;
    for (std::size_t i = 0; i < b; ++i) {
      const double* g = n.grad.data() + i * d;
      for (std::size_t j = 0; j < k; ++j) {
        const auto row = (i * k + j) * d;
        if (ga) {
          double dot = 0.0;
          for (std::size_t t = 0; t < d; ++t) dot += g[t] * ev[row + t];
          ga[i * k + j] += dot;
        }
        if (ge) {
          const double w = av[i * k + j];
          for (std::size_t t = 0; t < d; ++t) ge[row + t] += w * g[t];
        }
      }
    }
  });
}

}  // namespace

AttentionResult baglayer_forward(const nd::BoundParams& params, const GraphBatch& batch) {
  if (batch.count == 0) throw PreconditionError("baglayer_forward: empty graph batch");
  const Tensor center = mlp_forward(params, "bag.center", batch.centers);        // [B, D]
  const Tensor neighbor = mlp_forward(params, "bag.neighbor", batch.neighbors);  // [B, k, D]
  const Tensor edge = mlp_forward(params, "bag.edge", batch.edge_weights);       // [B, k, D]
  const Tensor scores = neighbour_scores(center, neighbor, edge, params.at("bag.score"));
  const Tensor coeff = nd::softmax(scores, 1);
  return {scores, coeff, weighted_sum(coeff, neighbor)};
}

Tensor attention_pool_forward(const nd::BoundParams& params, const PointCloud& cloud,
                              std::span<const PointId> knn_table, std::size_t k_pool) {
  if (knn_table.size() != cloud.size() * k_pool) {
    throw LengthMismatch("attention_pool_forward: neighbour table does not match cloud");
  }
  // Each gathered row is the coordinate triple of some cloud point, so its
  // MLP output depends only on which point it is. The max over all N * k
  // rows (points first, then neighbours) therefore equals the max over the
  // distinct points that occur in the table, which is what is evaluated.
  std::vector<PointId> distinct(knn_table.begin(), knn_table.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::vector<double> coords;
  coords.reserve(distinct.size() * 3);
  for (auto id : distinct) coords.insert(coords.end(), cloud.points[id].begin(), cloud.points[id].end());
  const Tensor rows = Tensor::constant({distinct.size(), 3}, std::move(coords));
  return nd::max_reduce(mlp_forward(params, "pool", rows), 0);
}

Tensor attention_pool_forward(const nd::BoundParams& params, const PointCloud& cloud,
                              const SpatialIndex& index, std::size_t k_pool) {
  return attention_pool_forward(params, cloud, index.knn_table(k_pool), k_pool);
}

Tensor pointwise_inputs(const PointCloud& cloud, std::span<const PointId> interior,
                        std::span<const PointId> knn_table, std::size_t k) {
  if (knn_table.size() != cloud.size() * k) {
    throw LengthMismatch("pointwise_inputs: neighbour table does not match cloud");
  }
  std::vector<double> data;
  data.reserve(interior.size() * 6);
  for (auto i : interior) {
    const Vec3& p = cloud.points[i];
    Vec3 mx{};
    for (std::size_t j = 0; j < k; ++j) {
      const Vec3& q = cloud.points[knn_table[i * k + j]];
      for (int a = 0; a < 3; ++a) {
        const double off = q[a] - p[a];
        mx[a] = j == 0 ? off : std::max(mx[a], off);
      }
    }
    data.insert(data.end(), p.begin(), p.end());
    data.insert(data.end(), mx.begin(), mx.end());
  }
  return Tensor::constant({interior.size(), 6}, std::move(data));
}

Tensor pointwise_forward(const nd::BoundParams& params, const PointCloud& cloud,
                         std::span<const PointId> interior, const SpatialIndex& index,
                         std::size_t k) {
  if (interior.empty()) return {};
  return mlp_forward(params, "point", pointwise_inputs(cloud, interior, index.knn_table(k), k));
}

PreparedCloud prepare_cloud(const PointCloud& cloud, const ModelConfig& config, Routing routing) {
  config.validate();
  const auto index = build_index(cloud);
  const auto n = cloud.size();
  PreparedCloud prep;
  prep.n_points = n;

  switch (routing) {
    case Routing::BoundaryAware:
      prep.mask = detect_boundary(cloud, index, config.k_est, config.thresholds);
      break;
    case Routing::AllGraph:
      prep.mask = mask_from_flags(std::vector<bool>(n, true));
      break;
    case Routing::AllPointwise:
      prep.mask = mask_from_flags(std::vector<bool>(n, false));
      break;
  }

  const auto layer_table = index.knn_table(config.k_layer);
  if (!prep.mask.boundary_indices.empty()) {
    const auto graphs = build_graph(cloud, layer_table, config.k_layer, prep.mask.boundary_indices);
    std::vector<FusedGraph> fused;
    fused.reserve(graphs.size());
    for (const auto& g : graphs) fused.push_back(fuse_edge_vertex(g));
    prep.graphs = stack_graphs(fused);
  }
  if (!prep.mask.interior_indices.empty()) {
    prep.point_inputs = pointwise_inputs(cloud, prep.mask.interior_indices, layer_table, config.k_layer);
  }

  const auto pool_table = config.k_pool == config.k_layer ? layer_table : index.knn_table(config.k_pool);
  prep.pool_points.assign(pool_table.begin(), pool_table.end());
  std::sort(prep.pool_points.begin(), prep.pool_points.end());
  prep.pool_points.erase(std::unique(prep.pool_points.begin(), prep.pool_points.end()),
                         prep.pool_points.end());
  std::vector<double> coords;
  coords.reserve(prep.pool_points.size() * 3);
  for (auto id : prep.pool_points) {
    coords.insert(coords.end(), cloud.points[id].begin(), cloud.points[id].end());
  }
  prep.pool_coords = Tensor::constant({prep.pool_points.size(), 3}, std::move(coords));

  prep.order.resize(n);
  std::uint32_t row = 0;
  for (auto i : prep.mask.boundary_indices) prep.order[i] = row++;
  for (auto i : prep.mask.interior_indices) prep.order[i] = row++;
  return prep;
}

Tensor model_forward(const nd::BoundParams& params, const PreparedCloud& prep) {
  std::vector<Tensor> parts;
  if (prep.graphs.count > 0) parts.push_back(baglayer_forward(params, prep.graphs).features);
  if (prep.point_inputs.defined()) parts.push_back(mlp_forward(params, "point", prep.point_inputs));
  const Tensor stacked = parts.size() == 1 ? parts.front() : nd::concat(parts, 0);
  const Tensor local = nd::gather_rows(stacked, prep.order);  // [N, D]

  const Tensor global = nd::max_reduce(mlp_forward(params, "pool", prep.pool_coords), 0);

  // First head layer on [local, global]: the global columns are applied once
  // and broadcast instead of tiling the global vector over every point.
  const Tensor& w0 = params.at("head.0.weight");
  const auto d = local.dim(1), g = global.size();
  if (w0.rank() != 2 || w0.dim(1) != d + g) throw SchemaError("head.0.weight does not match feature widths");
  const Tensor from_local = nd::linear(local, nd::slice(w0, 1, 0, d), params.at("head.0.bias"));
  const Tensor from_global = nd::linear(nd::reshape(global, {1, g}), nd::slice(w0, 1, d, g), Tensor());
  const Tensor hidden = nd::leaky_relu(nd::add(from_local, from_global));
  return run_mlp(params, "head", hidden, 1);
}

Tensor model_forward(const nd::BoundParams& params, const PointCloud& cloud,
                     const ModelConfig& config, Routing routing) {
  return model_forward(params, prepare_cloud(cloud, config, routing));
}

std::vector<Label> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw PreconditionError("argmax_rows expects a matrix");
  const auto n = logits.dim(0), c = logits.dim(1);
  std::vector<Label> out(n);
  const auto v = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (v[i * c + j] > v[i * c + best]) best = j;
    }
    out[i] = static_cast<Label>(best);
  }
  return out;
}

}  // namespace bseg
