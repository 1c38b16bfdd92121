#include "bseg/ndiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "bseg/errors.hpp"

namespace bseg::nd {

namespace detail {
struct TapeState {
  std::vector<std::shared_ptr<Node>> nodes;
};
}  // namespace detail

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;
using MapConstVec = Eigen::Map<const Eigen::RowVectorXd>;
using MapVec = Eigen::Map<Eigen::RowVectorXd>;

void check_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + what);
  }
}

bool needs(const Node& n, std::size_t input) { return n.inputs[input]->requires_grad; }

Buffer& grad_of(Node& n, std::size_t input) {
  return n.inputs[input]->grad_buffer();
}

// Splits a shape around `axis` into (outer, len, inner) extents.
struct AxisView {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw PreconditionError(std::string(op) + ": axis " + std::to_string(axis) +
                            " out of range for shape " + shape_str(s));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out = s;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

// Broadcast plan for two shapes, aligned at the trailing axis.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;
};

std::vector<std::size_t> row_major_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r - a.size(), 1), pb(r - b.size(), 1);
  pa.insert(pa.end(), a.begin(), a.end());
  pb.insert(pb.end(), b.begin(), b.end());
  Broadcast p;
  p.out.resize(r);
  auto sa = row_major_strides(pa), sb = row_major_strides(pb);
  p.stride_a.resize(r);
  p.stride_b.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw PreconditionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                              shape_str(b));
    }
    p.out[i] = std::max(pa[i], pb[i]);
    p.stride_a[i] = pa[i] == 1 ? 0 : sa[i];
    p.stride_b[i] = pb[i] == 1 ? 0 : sb[i];
  }
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element in
// row-major order.
template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::size_t r = p.out.size();
  const std::size_t total = numel(p.out);
  if (total == 0) return;
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t last = p.out[r - 1];
  const std::size_t la = p.stride_a[r - 1], lb = p.stride_b[r - 1];
  std::vector<std::size_t> counter(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; o += last) {
    for (std::size_t t = 0; t < last; ++t) f(o + t, ia + t * la, ib + t * lb);
    // Advance the counter over axes [0, r-1).
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ++counter[ax];
      ia += p.stride_a[ax];
      ib += p.stride_b[ax];
      if (counter[ax] < p.out[ax]) break;
      ia -= counter[ax] * p.stride_a[ax];
      ib -= counter[ax] * p.stride_b[ax];
      counter[ax] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const auto& av = a.data();
  const auto& bv = b.data();
  if (a.shape() == b.shape()) {
    Buffer out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = op == BinOp::Add ? av[i] + bv[i] : op == BinOp::Sub ? av[i] - bv[i] : av[i] * bv[i];
    }
    return make_result(a.shape(), std::move(out), {a, b}, [op](Node& n) {
      const auto& g = n.grad;
      const auto& x = n.inputs[0]->value;
      const auto& y = n.inputs[1]->value;
      if (needs(n, 0)) {
        auto& gx = grad_of(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += op == BinOp::Mul ? g[i] * y[i] : g[i];
      }
      if (needs(n, 1)) {
        auto& gy = grad_of(n, 1);
        for (std::size_t i = 0; i < g.size(); ++i) {
          gy[i] += op == BinOp::Mul ? g[i] * x[i] : op == BinOp::Sub ? -g[i] : g[i];
        }
      }
    });
  }
  auto plan = plan_broadcast(a.shape(), b.shape(), name);
  Buffer out(numel(plan.out));
  for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = op == BinOp::Add ? av[ia] + bv[ib] : op == BinOp::Sub ? av[ia] - bv[ib] : av[ia] * bv[ib];
  });
  return make_result(plan.out, std::move(out), {a, b}, [op, plan](Node& n) {
    const auto& g = n.grad;
    const auto& x = n.inputs[0]->value;
    const auto& y = n.inputs[1]->value;
    const bool nx = needs(n, 0), ny = needs(n, 1);
    Buffer* gx = nx ? &grad_of(n, 0) : nullptr;
    Buffer* gy = ny ? &grad_of(n, 1) : nullptr;
    for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (nx) (*gx)[ia] += op == BinOp::Mul ? g[o] * y[ib] : g[o];
      if (ny) (*gy)[ib] += op == BinOp::Mul ? g[o] * x[ia] : op == BinOp::Sub ? -g[o] : g[o];
    });
  });
}

}  // namespace

std::size_t numel(const Shape& shape) noexcept {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------- Tensor

Tensor Tensor::constant(Shape shape, Buffer data) {
  if (numel(shape) != data.size()) {
    throw LengthMismatch("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  check_finite(data, "constant");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape) {
  const auto n = numel(shape);
  return constant(std::move(shape), Buffer(n, 0.0));
}

Tensor Tensor::scalar(double v) { return constant({}, {v}); }

double Tensor::item() const {
  if (size() != 1) throw PreconditionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
  return {node_->grad.begin(), node_->grad.end()};
}

Tensor Tensor::detach() const { return constant(node_->shape, node_->value); }

// ------------------------------------------------------------------ Tape

Tape::Tape() : state_(std::make_shared<detail::TapeState>()) {}
Tape::~Tape() = default;

std::size_t Tape::size() const { return state_->nodes.size(); }

Tensor Tape::watch(const Tensor& value) {
  auto node = std::make_shared<Node>();
  node->shape = value.shape();
  node->value.assign(value.data().begin(), value.data().end());
  node->requires_grad = true;
  node->tape = state_;
  state_->nodes.push_back(node);
  return Tensor(std::move(node));
}

void Tape::backward(const Tensor& loss) {
  if (!loss.requires_grad()) throw PreconditionError("backward: loss does not depend on the tape");
  if (loss.size() != 1) throw PreconditionError("backward: loss must be a scalar");
  if (loss.node()->tape.lock() != state_) throw PreconditionError("backward: loss is on another tape");
  for (auto& n : state_->nodes) n->grad.clear();
  loss.node()->grad_buffer()[0] = 1.0;
  for (auto it = state_->nodes.rbegin(); it != state_->nodes.rend(); ++it) {
    Node& n = **it;
    if (n.grad.empty()) continue;
    check_finite(n.grad, "backward");
    if (n.backward) n.backward(n);
  }
}

Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward) {
  check_finite(value, "forward op");
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  std::shared_ptr<detail::TapeState> tape;
  for (const auto& in : inputs) {
    if (!in.requires_grad()) continue;
    auto t = in.node()->tape.lock();
    if (!t) throw PreconditionError("input tensor belongs to a tape that no longer exists");
    if (tape && tape != t) throw PreconditionError("inputs are recorded on different tapes");
    tape = t;
  }
  if (tape) {
    node->requires_grad = true;
    node->tape = tape;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
    tape->nodes.push_back(node);
  }
  return Tensor(std::move(node));
}

// ------------------------------------------------------------ elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }

Tensor scale(const Tensor& a, double s) {
  Buffer out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return make_result(a.shape(), std::move(out), {a}, [s](Node& n) {
    auto& gx = grad_of(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += s * n.grad[i];
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  Buffer out(a.data().begin(), a.data().end());
  for (auto& v : out) v += s;
  return make_result(a.shape(), std::move(out), {a}, [](Node& n) {
    auto& gx = grad_of(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i];
  });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  Buffer out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0 ? v : slope * v;
  return make_result(x.shape(), std::move(out), {x}, [slope](Node& n) {
    auto& gx = grad_of(n, 0);
    const auto& xv = n.inputs[0]->value;
    for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += xv[i] > 0.0 ? n.grad[i] : slope * n.grad[i];
  });
}

// ---------------------------------------------------------------- linear

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw PreconditionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                            shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer out(m * n);
  MapMat(out.data(), m, n).noalias() =
      MapConstMat(a.data().data(), m, k) * MapConstMat(b.data().data(), k, n);
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& nd) {
    MapConstMat g(nd.grad.data(), m, n);
    if (needs(nd, 0)) {
      MapMat(grad_of(nd, 0).data(), m, k).noalias() +=
          g * MapConstMat(nd.inputs[1]->value.data(), k, n).transpose();
    }
    if (needs(nd, 1)) {
      MapMat(grad_of(nd, 1).data(), k, n).noalias() +=
          MapConstMat(nd.inputs[0]->value.data(), m, k).transpose() * g;
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const bool has_bias = bias.defined();
  if (weight.rank() != 2 || x.rank() == 0 || x.shape().back() != weight.dim(1) ||
      (has_bias && (bias.rank() != 1 || bias.dim(0) != weight.dim(0)))) {
    throw PreconditionError("linear: incompatible shapes x" + shape_str(x.shape()) + " W" +
                            shape_str(weight.shape()) +
                            (has_bias ? " b" + shape_str(bias.shape()) : std::string()));
  }
  const auto in = weight.dim(1), outw = weight.dim(0);
  const auto rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outw;
  Buffer out(rows * outw);
  MapMat y(out.data(), rows, outw);
  y.noalias() = MapConstMat(x.data().data(), rows, in) *
                MapConstMat(weight.data().data(), outw, in).transpose();
  if (has_bias) y.rowwise() += MapConstVec(bias.data().data(), outw);
  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_result(std::move(out_shape), std::move(out), std::move(inputs),
                     [rows, in, outw](Node& nd) {
                       MapConstMat g(nd.grad.data(), rows, outw);
                       if (needs(nd, 0)) {
                         MapMat(grad_of(nd, 0).data(), rows, in).noalias() +=
                             g * MapConstMat(nd.inputs[1]->value.data(), outw, in);
                       }
                       if (needs(nd, 1)) {
                         MapMat(grad_of(nd, 1).data(), outw, in).noalias() +=
                             g.transpose() * MapConstMat(nd.inputs[0]->value.data(), rows, in);
                       }
                       if (nd.inputs.size() > 2 && needs(nd, 2)) {
                         MapVec(grad_of(nd, 2).data(), outw) += g.colwise().sum();
                       }
                     });
}

// ------------------------------------------------------------- reductions

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto v = axis_view(x.shape(), axis, "softmax");
  const auto& xv = x.data();
  Buffer out(x.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.len * v.inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < v.len; ++j) mx = std::max(mx, xv[base + j * v.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < v.len; ++j) {
        const double e = std::exp(xv[base + j * v.inner] - mx);
        out[base + j * v.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < v.len; ++j) out[base + j * v.inner] /= total;
    }
  }
  return make_result(x.shape(), std::move(out), {x}, [v](Node& n) {
    auto& gx = grad_of(n, 0);
    const auto& y = n.value;
    const auto& g = n.grad;
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t in = 0; in < v.inner; ++in) {
        const std::size_t base = o * v.len * v.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < v.len; ++j) dot += g[base + j * v.inner] * y[base + j * v.inner];
        for (std::size_t j = 0; j < v.len; ++j) {
          const auto i = base + j * v.inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

Tensor max_reduce(const Tensor& x, std::size_t axis) {
  const auto v = axis_view(x.shape(), axis, "max_reduce");
  if (v.len == 0) throw PreconditionError("max_reduce over an empty axis");
  const auto& xv = x.data();
  Buffer out(v.outer * v.inner);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.len * v.inner + in;
      std::size_t best = base;
      for (std::size_t j = 1; j < v.len; ++j) {
        const auto i = base + j * v.inner;
        if (xv[i] > xv[best]) best = i;
      }
      out[o * v.inner + in] = xv[best];
      arg[o * v.inner + in] = best;
    }
  }
  return make_result(drop_axis(x.shape(), axis), std::move(out), {x},
                     [arg = std::move(arg)](Node& n) {
                       auto& gx = grad_of(n, 0);
                       for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += n.grad[i];
                     });
}

Tensor sum_reduce(const Tensor& x, std::size_t axis) {
  const auto v = axis_view(x.shape(), axis, "sum_reduce");
  const auto& xv = x.data();
  Buffer out(v.outer * v.inner, 0.0);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t j = 0; j < v.len; ++j) {
      const double* src = xv.data() + (o * v.len + j) * v.inner;
      double* dst = out.data() + o * v.inner;
      for (std::size_t in = 0; in < v.inner; ++in) dst[in] += src[in];
    }
  }
  return make_result(drop_axis(x.shape(), axis), std::move(out), {x}, [v](Node& n) {
    auto& gx = grad_of(n, 0);
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t j = 0; j < v.len; ++j) {
        double* dst = gx.data() + (o * v.len + j) * v.inner;
        const double* g = n.grad.data() + o * v.inner;
        for (std::size_t in = 0; in < v.inner; ++in) dst[in] += g[in];
      }
    }
  });
}

Tensor mean_reduce(const Tensor& x, std::size_t axis) {
  const auto len = axis_view(x.shape(), axis, "mean_reduce").len;
  return scale(sum_reduce(x, axis), 1.0 / static_cast<double>(len));
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_result({}, {total}, {x}, [](Node& n) {
    auto& gx = grad_of(n, 0);
    for (auto& g : gx) g += n.grad[0];
  });
}

// ------------------------------------------------------------ shape ops

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw PreconditionError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw PreconditionError("concat: axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw PreconditionError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.dim(i) != ref[i]) {
        throw PreconditionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                shape_str(ref));
      }
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  std::vector<std::size_t> chunk(parts.size());
  std::size_t row = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    chunk[p] = parts[p].dim(axis) * inner;
    row += chunk[p];
  }
  Buffer out(outer * row);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t off = o * row;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const double* src = parts[p].data().data() + o * chunk[p];
      std::copy(src, src + chunk[p], out.begin() + static_cast<std::ptrdiff_t>(off));
      off += chunk[p];
    }
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result(std::move(out_shape), std::move(out), std::move(inputs),
                     [outer, row, chunk](Node& n) {
                       std::size_t col = 0;
                       for (std::size_t p = 0; p < chunk.size(); ++p) {
                         if (needs(n, p)) {
                           auto& gp = grad_of(n, p);
                           for (std::size_t o = 0; o < outer; ++o) {
                             const double* g = n.grad.data() + o * row + col;
                             double* dst = gp.data() + o * chunk[p];
                             for (std::size_t i = 0; i < chunk[p]; ++i) dst[i] += g[i];
                           }
                         }
                         col += chunk[p];
                       }
                     });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  const auto v = axis_view(x.shape(), axis, "slice");
  if (start + len > v.len) {
    throw PreconditionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                            ") exceeds axis of length " + std::to_string(v.len));
  }
  Shape shape = x.shape();
  shape[axis] = len;
  const auto& xv = x.data();
  Buffer out(v.outer * len * v.inner);
  const auto block = len * v.inner;
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * v.len + start) * v.inner), block,
                out.begin() + static_cast<std::ptrdiff_t>(o * block));
  }
  return make_result(std::move(shape), std::move(out), {x}, [v, start, block](Node& n) {
    auto& gx = grad_of(n, 0);
    for (std::size_t o = 0; o < v.outer; ++o) {
      const double* g = n.grad.data() + o * block;
      double* dst = gx.data() + (o * v.len + start) * v.inner;
      for (std::size_t t = 0; t < block; ++t) dst[t] += g[t];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw PreconditionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Buffer out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& n) {
    auto& gx = grad_of(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) gx[i] += n.grad[i];
  });
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  auto plan = plan_broadcast(x.shape(), shape, "broadcast_to");
  if (plan.out != shape) {
    throw PreconditionError("broadcast_to: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  const auto& xv = x.data();
  Buffer out(numel(shape));
  for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t) { out[o] = xv[ia]; });
  return make_result(shape, std::move(out), {x}, [plan](Node& n) {
    auto& gx = grad_of(n, 0);
    for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t) { gx[ia] += n.grad[o]; });
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::uint32_t> rows) {
  if (x.rank() == 0) throw PreconditionError("gather_rows on a scalar");
  const auto n_rows = x.dim(0);
  const auto width = n_rows ? x.size() / n_rows : 0;
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  Buffer out(rows.size() * width);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n_rows) throw BadIndex("gather_rows: row index out of range");
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  std::vector<std::uint32_t> idx(rows.begin(), rows.end());
  return make_result(std::move(out_shape), std::move(out), {x},
                     [idx = std::move(idx), width](Node& n) {
                       auto& gx = grad_of(n, 0);
                       for (std::size_t r = 0; r < idx.size(); ++r) {
                         const double* g = n.grad.data() + r * width;
                         double* dst = gx.data() + idx[r] * width;
                         for (std::size_t i = 0; i < width; ++i) dst[i] += g[i];
                       }
                     });
}

// ------------------------------------------------------------- ParamStore

void ParamStore::add(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out) {
  if (params_.count(name)) throw PreconditionError("duplicate parameter name '" + name + "'");
  Param p;
  p.value.assign(numel(shape), 0.0);
  p.shape = std::move(shape);
  p.fan_in = fan_in;
  p.fan_out = fan_out;
  params_.emplace(name, std::move(p));
}

void ParamStore::initialize(SplitMix64& rng) {
  for (auto& [name, p] : params_) {
    if (p.fan_in + p.fan_out == 0) {
      std::fill(p.value.begin(), p.value.end(), 0.0);
      continue;
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(p.fan_in + p.fan_out));
    for (auto& v : p.value) v = rng.uniform(-bound, bound);
  }
}

ParamStore::Param& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw SchemaError("unknown parameter '" + name + "'");
  return it->second;
}

const ParamStore::Param& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw SchemaError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) p.grad.assign(p.value.size(), 0.0);
}

void ParamStore::accumulate_grads(const BoundParams& bound) {
  for (auto& [name, p] : params_) {
    auto it = bound.find(name);
    if (it == bound.end()) continue;
    if (p.grad.size() != p.value.size()) p.grad.assign(p.value.size(), 0.0);
    const auto& node = it->second.node();
    if (node->grad.empty()) continue;
    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += node->grad[i];
  }
}

BoundParams ParamStore::bind(Tape* tape) const {
  BoundParams out;
  for (const auto& [name, p] : params_) {
    auto t = Tensor::constant(p.shape, p.value);
    out.emplace(name, tape ? tape->watch(t) : t);
  }
  return out;
}

// ------------------------------------------------------ gradient checking

double finite_diff_check(const LossFn& f, ParamStore& params, double h, std::size_t samples,
                         SplitMix64& rng) {
  if (!(h > 0.0)) throw PreconditionError("finite_diff_check: h must be > 0");
  Tape tape;
  auto bound = params.bind(&tape);
  auto loss = f(bound);
  tape.backward(loss);

  struct Entry {
    const std::string* name;
    std::size_t offset;
  };
  std::vector<Entry> flat_names;
  std::vector<std::size_t> starts;
  std::size_t total = 0;
  for (const auto& [name, p] : params.items()) {
    flat_names.push_back({&name, 0});
    starts.push_back(total);
    total += p.value.size();
  }
  std::vector<std::size_t> picks;
  if (samples >= total) {
    picks.resize(total);
    std::iota(picks.begin(), picks.end(), std::size_t{0});
  } else {
    std::set<std::size_t> seen;
    while (picks.size() < samples) {
      const auto idx = static_cast<std::size_t>(rng.below(total));
      if (seen.insert(idx).second) picks.push_back(idx);
    }
  }

  double worst = 0.0;
  for (auto flat : picks) {
    const auto slot = static_cast<std::size_t>(
        std::upper_bound(starts.begin(), starts.end(), flat) - starts.begin() - 1);
    const std::string& name = *flat_names[slot].name;
    const std::size_t offset = flat - starts[slot];
    auto& param = params.at(name);
    const double analytic = bound.at(name).grad()[offset];
    const double saved = param.value[offset];
    param.value[offset] = saved + h;
    const double up = f(params.bind(nullptr)).item();
    param.value[offset] = saved - h;
    const double down = f(params.bind(nullptr)).item();
    param.value[offset] = saved;
    const double numeric = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(numeric - analytic) / std::max(1.0, std::abs(analytic)));
  }
  return worst;
}

}  // namespace bseg::nd
