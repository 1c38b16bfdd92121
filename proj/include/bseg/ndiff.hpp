#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto an immutable value. Tensors created by
// Tape::watch() are leaves that require gradients; every op whose inputs
// include such a tensor is appended to the same tape together with its
// backward rule. Ops on constants are evaluated eagerly and not recorded,
// which is the inference path.

#include <cstdint>
#include <functional>
#include <new>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bseg/random.hpp"

namespace bseg::nd {

using Shape = std::vector<std::size_t>;

/// Allocator with a fixed 64-byte alignment. Vectorised kernels choose
/// their peeling from the data address, so a fixed alignment keeps the
/// floating-point summation order, and hence results, reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t numel(const Shape& shape) noexcept;
std::string shape_str(const Shape& shape);

class Tape;

namespace detail {
struct TapeState;

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until backward reaches the node
  bool requires_grad = false;
  std::weak_ptr<TapeState> tape;
  std::vector<std::shared_ptr<Node>> inputs;
  // Accumulates this node's grad into the grads of `inputs`.
  std::function<void(Node&)> backward;

  Buffer& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, Buffer data);
  template <class Alloc>
  static Tensor constant(Shape shape, const std::vector<double, Alloc>& data) {
    return constant(std::move(shape), Buffer(data.begin(), data.end()));
  }
  static Tensor zeros(Shape shape);
  static Tensor scalar(double v);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::span<const double> data() const { return node_->value; }
  double item() const;
  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  /// Gradient after Tape::backward; all zeros if the node was not reached.
  std::vector<double> grad() const;

  /// Same value, cut from the tape.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const noexcept { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Append-only record of executed ops. Nodes are stored in execution order,
/// which is a topological order of the computation.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A leaf copy of `value` that requires gradients.
  Tensor watch(const Tensor& value);

  /// Reverse sweep from a scalar. Throws NumericError on a non-finite gradient.
  void backward(const Tensor& loss);

  std::size_t size() const;

 private:
  std::shared_ptr<detail::TapeState> state_;
};

/// Builds the output of a custom op. `backward` receives the output node and
/// must accumulate into the grad buffers of the inputs that require grad.
Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> backward);

// Elementwise, numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor matmul(const Tensor& a, const Tensor& b);
/// x[..., in] * W[out, in]^T + b[out]; `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

inline constexpr double kLeakySlope = 0.2;
/// x > 0 ? x : slope * x. The derivative at exactly 0 is `slope`.
Tensor leaky_relu(const Tensor& x, double slope = kLeakySlope);

Tensor softmax(const Tensor& x, std::size_t axis);
/// Max along an axis; the gradient goes to the first (lowest index) maximum.
Tensor max_reduce(const Tensor& x, std::size_t axis);
Tensor mean_reduce(const Tensor& x, std::size_t axis);
Tensor sum_reduce(const Tensor& x, std::size_t axis);
/// Sum of all elements, shape {}.
Tensor sum(const Tensor& x);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor reshape(const Tensor& x, Shape shape);
/// Elements [start, start + len) along `axis`.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
/// Rows of x (along axis 0) selected by index. The indices carry no gradient.
Tensor gather_rows(const Tensor& x, std::span<const std::uint32_t> rows);

/// Named learnable arrays. Iteration and initialisation follow the
/// lexicographic order of names.
class ParamStore {
 public:
  struct Param {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::size_t fan_in = 0;
    std::size_t fan_out = 0;  // both zero: initialised to zeros
  };

  /// Registers a parameter (zero-valued). Throws on duplicate names.
  void add(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out);

  /// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), name order, row-major
  /// within each array; bias-like entries (no fans) set to zero.
  void initialize(SplitMix64& rng);

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  const std::map<std::string, Param>& items() const noexcept { return params_; }
  std::map<std::string, Param>& items() noexcept { return params_; }
  std::size_t total_size() const;

  void zero_grad();
  /// Adds the gradients of bound leaves into the stored grads.
  void accumulate_grads(const std::map<std::string, Tensor>& bound);

  /// Parameters as tensors: leaves on `tape` when given, constants otherwise.
  std::map<std::string, Tensor> bind(Tape* tape) const;

 private:
  std::map<std::string, Param> params_;
};

using BoundParams = std::map<std::string, Tensor>;
using LossFn = std::function<Tensor(const BoundParams&)>;

/// Compares tape gradients against central differences (f(+h) - f(-h)) / 2h
/// on `samples` distinct parameter entries drawn from `rng`. The relative
/// error of each entry is |fd - analytic| / max(1, |analytic|); returns the max.
double finite_diff_check(const LossFn& f, ParamStore& params, double h, std::size_t samples,
                         SplitMix64& rng);

}  // namespace bseg::nd
