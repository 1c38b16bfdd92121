#pragma once

#include <span>
#include <string>
#include <vector>

#include "bseg/bgraph.hpp"
#include "bseg/boundary.hpp"
#include "bseg/ndiff.hpp"
#include "bseg/pcio.hpp"
#include "bseg/spatial.hpp"

namespace bseg {

/// Architecture and preprocessing settings of the segmentation model.
struct ModelConfig {
  std::size_t num_classes = 2;
  std::size_t dim = 256;     // width D of boundary and pointwise features
  std::size_t k_layer = 32;  // neighbours of the attention graph and pointwise path
  std::size_t k_est = 16;    // neighbours for normals and boundary statistics
  std::size_t k_pool = 16;   // neighbours gathered by the pooling layer
  BoundaryThresholds thresholds;

  void validate() const;
};

inline constexpr std::size_t kEncoderHidden = 64;
inline constexpr std::size_t kGlobalWidth = 512;
/// Pooling MLP widths applied to 3-vectors.
inline constexpr std::size_t kPoolWidths[] = {16, 64, 128, 512};
/// Segmentation head hidden widths between (D + 512) and C.
inline constexpr std::size_t kHeadWidths[] = {256, 128};

/// Registers every model parameter (unset values) under stable names.
void register_model_params(nd::ParamStore& store, const ModelConfig& config);

/// Registered and initialised from a SplitMix64 stream seeded with `seed`.
nd::ParamStore init_model_params(const ModelConfig& config, std::uint64_t seed);

/// Runs the MLP stored under `prefix.<i>.weight/bias` on the last axis of x.
/// Hidden layers use leaky_relu; the last layer is linear.
nd::Tensor mlp_forward(const nd::BoundParams& params, const std::string& prefix, nd::Tensor x);

/// Boundary graphs stacked for batched evaluation.
struct GraphBatch {
  std::size_t count = 0;
  std::size_t k = 0;
  nd::Tensor centers;       // [B, 3] fused centres
  nd::Tensor neighbors;     // [B, k, 3] fused neighbours
  nd::Tensor edge_weights;  // [B, k, 1]
};

GraphBatch stack_graphs(std::span<const FusedGraph> graphs);

/// Per-boundary-point attention outputs, batched over B graphs.
struct AttentionResult {
  nd::Tensor scores;        // [B, k]  raw neighbour scores
  nd::Tensor coefficients;  // [B, k]  softmax of scores over neighbours
  nd::Tensor features;      // [B, D]  attention-weighted neighbour encodings
};

/// Encodes centres, neighbours and edges with separate MLPs, scores each
/// neighbour as u . leaky_relu(center + neighbor - edge), normalises with a
/// softmax over neighbours and returns the weighted sum of neighbour codes.
AttentionResult baglayer_forward(const nd::BoundParams& params, const GraphBatch& batch);

/// Global feature: the pooling MLP applied to every gathered neighbour
/// coordinate (N x k_pool x 3), max over points, then max over neighbours.
nd::Tensor attention_pool_forward(const nd::BoundParams& params, const PointCloud& cloud,
                                  const SpatialIndex& index, std::size_t k_pool);
nd::Tensor attention_pool_forward(const nd::BoundParams& params, const PointCloud& cloud,
                                  std::span<const PointId> knn_table, std::size_t k_pool);

/// Pointwise inputs: point coordinates followed by the componentwise max of
/// neighbour offsets p_ij - p_i. Shape [I, 6].
nd::Tensor pointwise_inputs(const PointCloud& cloud, std::span<const PointId> interior,
                            std::span<const PointId> knn_table, std::size_t k);

/// Per-interior-point D-vectors; an undefined tensor when `interior` is empty.
nd::Tensor pointwise_forward(const nd::BoundParams& params, const PointCloud& cloud,
                             std::span<const PointId> interior, const SpatialIndex& index,
                             std::size_t k);

enum class Routing {
  BoundaryAware,  // boundary points through the attention layer, rest pointwise
  AllGraph,       // every point through the attention layer
  AllPointwise,   // attention layer disabled
};

/// Everything about a cloud that does not depend on learned parameters.
struct PreparedCloud {
  std::size_t n_points = 0;
  BoundaryMask mask;
  GraphBatch graphs;                  // boundary points
  nd::Tensor point_inputs;            // [I, 6] interior points
  std::vector<PointId> pool_points;   // distinct points gathered by the pooling layer
  nd::Tensor pool_coords;             // [U, 3]
  std::vector<std::uint32_t> order;   // original index -> row in [boundary; interior]
};

PreparedCloud prepare_cloud(const PointCloud& cloud, const ModelConfig& config,
                            Routing routing = Routing::BoundaryAware);

/// Per-point class logits [N, C] in original point order.
nd::Tensor model_forward(const nd::BoundParams& params, const PreparedCloud& prepared);

nd::Tensor model_forward(const nd::BoundParams& params, const PointCloud& cloud,
                         const ModelConfig& config, Routing routing = Routing::BoundaryAware);

/// Row-wise argmax of [N, C] logits, ties to the lowest class id.
std::vector<Label> argmax_rows(const nd::Tensor& logits);

}  // namespace bseg
