#include <cmath>

#include "bseg/errors.hpp"
#include "bseg/ndiff.hpp"
#include "doctest.h"

using namespace bseg;
using namespace bseg::nd;

namespace {

std::vector<double> random_values(std::size_t n, SplitMix64& rng, double lo = -1, double hi = 1) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

ParamStore store_with(std::initializer_list<std::pair<std::string, Shape>> params, SplitMix64& rng) {
  ParamStore s;
  for (const auto& [name, shape] : params) {
    s.add(name, shape, 1, 1);
    s.at(name).value = random_values(numel(shape), rng);
  }
  return s;
}

// sum(out * R) with a fixed random R, so every output element matters.
Tensor weighted_total(const Tensor& out, std::uint64_t seed) {
  SplitMix64 rng(seed);
  return sum(mul(out, Tensor::constant(out.shape(), random_values(out.size(), rng))));
}

double check_op(std::initializer_list<std::pair<std::string, Shape>> params,
                const std::function<Tensor(const BoundParams&)>& op, std::uint64_t seed = 1) {
  SplitMix64 rng(seed);
  auto store = store_with(params, rng);
  SplitMix64 picks(seed + 100);
  return finite_diff_check([&](const BoundParams& p) { return weighted_total(op(p), seed + 7); }, store,
                           1e-5, 1000, picks);
}

}  // namespace

TEST_CASE("softmax values") {
  auto s = softmax(Tensor::constant({3}, {0, 0, 0}), 0);
  for (auto v : s.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));
  s = softmax(Tensor::constant({2}, {std::log(2.0), 0}), 0);
  CHECK(s[0] == doctest::Approx(2.0 / 3).epsilon(1e-15));
  CHECK(s[1] == doctest::Approx(1.0 / 3).epsilon(1e-15));
  s = softmax(Tensor::constant({2}, {1000, 0}), 0);
  CHECK(std::abs(s[0] - 1.0) < 1e-12);
  CHECK(std::abs(s[1]) < 1e-12);
  CHECK_THROWS_AS(Tensor::constant({2}, {NAN, 0}), NumericError);
}

TEST_CASE("softmax rows sum to one and ignore constant shifts") {
  SplitMix64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng.below(6), cols = 1 + rng.below(9);
    auto x = random_values(rows * cols, rng, -20, 20);
    const auto s = softmax(Tensor::constant({rows, cols}, x), 1);
    std::vector<double> shifted = x;
    for (std::size_t r = 0; r < rows; ++r) {
      const double c = rng.uniform(-50, 50);
      for (std::size_t j = 0; j < cols; ++j) shifted[r * cols + j] += c;
    }
    const auto s2 = softmax(Tensor::constant({rows, cols}, shifted), 1);
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0;
      for (std::size_t j = 0; j < cols; ++j) {
        total += s[r * cols + j];
        CHECK(std::abs(s[r * cols + j] - s2[r * cols + j]) < 1e-12);
      }
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("backward on simple losses") {
  SplitMix64 rng(1);
  ParamStore store = store_with({{"W", {3, 4}}}, rng);
  {
    Tape tape;
    auto p = store.bind(&tape);
    tape.backward(sum(p.at("W")));
    for (auto g : p.at("W").grad()) CHECK(g == 1.0);
  }
  {
    Tape tape;
    auto p = store.bind(&tape);
    const auto before = store.at("W").value;
    tape.backward(sum(mul(p.at("W"), p.at("W"))));
    const auto g = p.at("W").grad();
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == 2.0 * before[i]);
    CHECK(store.at("W").value == before);
  }
}

TEST_CASE("finite_diff_check reference cases") {
  SplitMix64 rng(2);
  auto store = store_with({{"W", {5, 5}}}, rng);
  SplitMix64 picks(1);
  CHECK(finite_diff_check([](const BoundParams& p) { return sum(p.at("W")); }, store, 1e-3, 25, picks) <
        1e-10);
  // Entries away from the kink.
  for (auto& v : store.at("W").value) v = v >= 0 ? v + 0.1 : v - 0.1;
  CHECK(finite_diff_check([](const BoundParams& p) { return sum(leaky_relu(p.at("W"))); }, store, 1e-5, 25,
                          picks) < 1e-8);
}

TEST_CASE("every differentiable op passes the gradient check") {
  const double tol = 1e-6;
  CHECK(check_op({{"a", {3, 4}}, {"b", {3, 4}}}, [](auto& p) { return add(p.at("a"), p.at("b")); }) < tol);
  CHECK(check_op({{"a", {2, 3, 4}}, {"b", {4}}}, [](auto& p) { return sub(p.at("a"), p.at("b")); }) < tol);
  CHECK(check_op({{"a", {2, 1, 4}}, {"b", {2, 3, 1}}}, [](auto& p) { return mul(p.at("a"), p.at("b")); }) <
        tol);
  CHECK(check_op({{"a", {3, 4}}}, [](auto& p) { return mul(p.at("a"), p.at("a")); }) < tol);
  CHECK(check_op({{"a", {3, 4}}}, [](auto& p) { return scale(add_scalar(p.at("a"), 0.3), -2.5); }) < tol);
  CHECK(check_op({{"a", {3, 5}}, {"b", {5, 2}}}, [](auto& p) { return matmul(p.at("a"), p.at("b")); }) < tol);
  CHECK(check_op({{"x", {2, 3, 5}}, {"w", {4, 5}}, {"b", {4}}},
                 [](auto& p) { return linear(p.at("x"), p.at("w"), p.at("b")); }) < tol);
  CHECK(check_op({{"a", {4, 6}}}, [](auto& p) { return leaky_relu(p.at("a")); }) < tol);
  CHECK(check_op({{"a", {3, 5, 2}}}, [](auto& p) { return softmax(p.at("a"), 1); }) < tol);
  CHECK(check_op({{"a", {3, 5, 2}}}, [](auto& p) { return max_reduce(p.at("a"), 1); }) < tol);
  CHECK(check_op({{"a", {3, 5, 2}}}, [](auto& p) { return mean_reduce(p.at("a"), 2); }) < tol);
  CHECK(check_op({{"a", {3, 5, 2}}}, [](auto& p) { return sum_reduce(p.at("a"), 0); }) < tol);
  CHECK(check_op({{"a", {2, 3}}, {"b", {2, 4}}}, [](auto& p) {
          const Tensor parts[] = {p.at("a"), p.at("b")};
          return concat(parts, 1);
        }) < tol);
  CHECK(check_op({{"a", {2, 3}}, {"b", {4, 3}}}, [](auto& p) {
          const Tensor parts[] = {p.at("a"), p.at("b")};
          return concat(parts, 0);
        }) < tol);
  CHECK(check_op({{"a", {6, 2}}}, [](auto& p) { return reshape(p.at("a"), {3, 4}); }) < tol);
  CHECK(check_op({{"a", {1, 3}}}, [](auto& p) { return broadcast_to(p.at("a"), {4, 3}); }) < tol);
  CHECK(check_op({{"a", {3, 7, 2}}}, [](auto& p) { return slice(p.at("a"), 1, 2, 4); }) < tol);
  CHECK(check_op({{"x", {3, 5}}, {"w", {4, 5}}},
                 [](auto& p) { return linear(p.at("x"), p.at("w"), Tensor()); }) < tol);
  CHECK(check_op({{"a", {4, 3}}}, [](auto& p) {
          const std::uint32_t rows[] = {3, 0, 3, 1};
          return gather_rows(p.at("a"), rows);
        }) < tol);
}

TEST_CASE("max_reduce routes gradient to the first maximum") {
  ParamStore store;
  store.add("x", {2, 3}, 0, 0);
  store.at("x").value = {1, 5, 5, 7, 2, 7};
  Tape tape;
  auto p = store.bind(&tape);
  const auto m = max_reduce(p.at("x"), 1);
  CHECK(m[0] == 5);
  CHECK(m[1] == 7);
  tape.backward(sum(m));
  CHECK(p.at("x").grad() == std::vector<double>{0, 1, 0, 1, 0, 0});
}

TEST_CASE("leaky_relu uses the negative slope at zero") {
  ParamStore store;
  store.add("x", {3}, 0, 0);
  store.at("x").value = {0.0, -1.0, 2.0};
  Tape tape;
  auto p = store.bind(&tape);
  const auto y = leaky_relu(p.at("x"));
  CHECK(y[1] == doctest::Approx(-0.2));
  tape.backward(sum(y));
  CHECK(p.at("x").grad() == std::vector<double>{0.2, 0.2, 1.0});
}

TEST_CASE("tape bookkeeping") {
  Tape tape;
  const auto x = tape.watch(Tensor::constant({2}, {1, 2}));
  const auto c = Tensor::constant({2}, {3, 4});
  CHECK(tape.size() == 1);
  const auto y = add(x, c);
  CHECK(tape.size() == 2);
  const auto z = add(c, c);  // constants are not recorded
  CHECK(tape.size() == 2);
  CHECK_FALSE(z.requires_grad());
  CHECK_THROWS_AS(tape.backward(y), PreconditionError);  // not a scalar
  CHECK_THROWS_AS(tape.backward(sum(z)), PreconditionError);

  Tape other;
  const auto w = other.watch(Tensor::constant({2}, {1, 1}));
  CHECK_THROWS_AS(add(x, w), PreconditionError);
}

TEST_CASE("non-finite values raise NumericError") {
  CHECK_THROWS_AS(scale(Tensor::constant({1}, {1e308}), 10.0), NumericError);
  ParamStore store;
  store.add("x", {1}, 0, 0);
  store.at("x").value = {1e200};
  Tape tape;
  auto p = store.bind(&tape);
  CHECK_THROWS_AS(mul(mul(p.at("x"), p.at("x")), p.at("x")), NumericError);
  // Finite forward value whose backward rule overflows.
  const auto y = make_result({1}, {1.0}, {p.at("x")}, [](detail::Node& n) {
    n.inputs[0]->grad_buffer()[0] += n.grad[0] * 1e300 * 1e300;
  });
  CHECK_THROWS_AS(tape.backward(sum(y)), NumericError);
}

TEST_CASE("shape errors") {
  const auto a = Tensor::zeros({2, 3});
  const auto b = Tensor::zeros({4, 3});
  CHECK_THROWS_AS(add(a, b), PreconditionError);
  CHECK_THROWS_AS(matmul(a, a), PreconditionError);
  CHECK_THROWS_AS(reshape(a, {5}), PreconditionError);
  CHECK_THROWS_AS(slice(a, 1, 2, 2), PreconditionError);
  CHECK_THROWS_AS(softmax(a, 2), PreconditionError);
  const std::uint32_t bad[] = {2};
  CHECK_THROWS_AS(gather_rows(a, bad), BadIndex);
  CHECK_THROWS_AS(Tensor::constant({2}, {1, 2, 3}), LengthMismatch);
}

TEST_CASE("ParamStore initialisation is ordered and bounded") {
  ParamStore s;
  s.add("b.weight", {4, 6}, 6, 4);
  s.add("a.weight", {8, 2}, 2, 8);
  s.add("a.bias", {8}, 0, 0);
  CHECK_THROWS_AS(s.add("a.bias", {8}, 0, 0), PreconditionError);
  SplitMix64 rng(9);
  s.initialize(rng);
  for (auto v : s.at("a.bias").value) CHECK(v == 0.0);
  const double bound_a = std::sqrt(6.0 / 10.0);
  for (auto v : s.at("a.weight").value) CHECK(std::abs(v) <= bound_a);
  // "a.weight" is drawn before "b.weight" regardless of registration order.
  SplitMix64 replay(9);
  CHECK(s.at("a.weight").value[0] == replay.uniform(-bound_a, bound_a));
  CHECK(s.total_size() == 24 + 16 + 8);
}

TEST_CASE("forward evaluation is bit-reproducible") {
  SplitMix64 rng(12);
  auto x = Tensor::constant({16, 7}, random_values(112, rng));
  auto w = Tensor::constant({5, 7}, random_values(35, rng));
  auto b = Tensor::constant({5}, random_values(5, rng));
  const auto y1 = softmax(leaky_relu(linear(x, w, b)), 1);
  const auto y2 = softmax(leaky_relu(linear(x, w, b)), 1);
  CHECK(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
}
