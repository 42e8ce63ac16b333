#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mmtprobe/tensor.hpp"

using namespace mmtprobe;
using Catch::Approx;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform_real(rng, lo, hi);
  return t;
}

// Weighted sum with fixed random weights turns any tensor function into a
// scalar one whose gradient exercises every output coordinate.
Var weighted_sum(Tape& tape, const Var& y, std::uint64_t seed) {
  Rng rng(seed);
  Var w = tape.constant(random_tensor(y.value().shape(), rng));
  return sum(mul(y, w));
}

constexpr double kGradTol = 1e-4;

}  // namespace

TEST_CASE("matmul forward values", "[tensor][matmul]") {
  Tape tape;
  Var I = tape.constant(Tensor::matrix({{1, 0}, {0, 1}}));
  Var M = tape.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  CHECK(matmul(I, M).value() == Tensor::matrix({{1, 2}, {3, 4}}));
  Var a = tape.constant(Tensor::matrix({{1, 2}}));
  Var b = tape.constant(Tensor::matrix({{3}, {4}}));
  CHECK(matmul(a, b).value() == Tensor::matrix({{11}}));
}

TEST_CASE("matmul rejects mismatched inner dimensions", "[tensor][matmul]") {
  Tape tape;
  Var a = tape.constant(Tensor(Shape{2, 3}));
  Var b = tape.constant(Tensor(Shape{2, 3}));
  try {
    (void)matmul(a, b);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches central differences", "[tensor][matmul][gradcheck]") {
  Rng rng(11);
  Tensor A = random_tensor({5, 7}, rng), B = random_tensor({7, 3}, rng);
  std::vector<Tensor*> xs{&A, &B};
  auto report = finite_difference_check(
      [](Tape& t, std::span<const Var> v) { return weighted_sum(t, matmul(v[0], v[1]), 3); }, xs);
  CHECK(report.max_relative_error < kGradTol);
  CHECK(report.coordinates == 35 + 21);
}

TEST_CASE("elementwise values", "[tensor][elementwise]") {
  Tape tape;
  Var z = tape.constant(Tensor::vector({0.0}));
  CHECK(tanh(z).value()[0] == 0.0);
  CHECK(sigmoid(z).value()[0] == 0.5);
  Var a = tape.constant(Tensor::vector({1, 2}));
  Var b = tape.constant(Tensor::vector({3, 4}));
  CHECK(add(a, b).value() == Tensor::vector({4, 6}));
  std::vector<Var> ops{a, b};
  CHECK(apply_elementwise(Elementwise::sub, ops).value() == Tensor::vector({-2, -2}));
  CHECK(apply_elementwise(Elementwise::mul, ops).value() == Tensor::vector({3, 8}));
  CHECK(apply_elementwise(Elementwise::scale, std::span<const Var>(ops).first(1), 2.5).value() == Tensor::vector({2.5, 5}));
}

TEST_CASE("sigmoid derivative at zero is one quarter", "[tensor][elementwise]") {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(0.0));
  Var y = sigmoid(x);
  tape.backward(y);
  CHECK(tape.grad(x)[0] == Approx(0.25).margin(1e-15));
}

TEST_CASE("elementwise broadcasting is restricted", "[tensor][elementwise]") {
  Tape tape;
  Var m = tape.constant(Tensor(Shape{3, 4}, 1.0));
  Var row = tape.constant(Tensor::vector({1, 2, 3, 4}));
  CHECK(add(m, row).value().at(2, 3) == 5.0);
  Var col = tape.constant(Tensor(Shape{3, 1}, 1.0));
  CHECK_THROWS_AS(add(m, col), DimensionError);
  CHECK_THROWS_AS(mul(m, tape.constant(Tensor(Shape{4, 3}))), DimensionError);
}

TEST_CASE("elementwise gradients including row broadcast", "[tensor][elementwise][gradcheck]") {
  Rng rng(5);
  Tensor a = random_tensor({4, 6}, rng), b = random_tensor({4, 6}, rng), r = random_tensor({6}, rng);
  std::vector<Tensor*> xs{&a, &b, &r};
  auto f = [](Tape& t, std::span<const Var> v) {
    Var y = add(mul(tanh(v[0]), sigmoid(v[1])), scale(sub(v[0], v[2]), 0.7));
    y = mul(y, v[2]);
    return weighted_sum(t, add(y, v[2]), 9);
  };
  CHECK(finite_difference_check(f, xs).max_relative_error < kGradTol);
}

TEST_CASE("softmax values and stability", "[tensor][softmax]") {
  Tape tape;
  CHECK(softmax(tape.constant(Tensor::vector({0, 0})), 0).value() == Tensor::vector({0.5, 0.5}));
  auto big = softmax(tape.constant(Tensor::vector({1000, 1000})), 0).value();
  CHECK(big[0] == 0.5);
  CHECK(big[1] == 0.5);
}

TEST_CASE("softmax rows are distributions", "[tensor][softmax][property]") {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + uniform_index(rng, 6), c = 1 + uniform_index(rng, 9);
    Tape tape;
    Var x = tape.constant(random_tensor({r, c}, rng, -50, 50));
    for (std::size_t axis : {0u, 1u}) {
      const Tensor& y = softmax(x, axis).value();
      const std::size_t outer = axis == 0 ? c : r, extent = axis == 0 ? r : c;
      for (std::size_t o = 0; o < outer; ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < extent; ++i) {
          const double v = axis == 0 ? y.at(i, o) : y.at(o, i);
          REQUIRE(v >= 0.0);
          s += v;
        }
        REQUIRE(std::abs(s - 1.0) < 1e-9);
      }
    }
  }
}

TEST_CASE("softmax gradient", "[tensor][softmax][gradcheck]") {
  Rng rng(4);
  for (std::size_t axis : {0u, 1u}) {
    Tensor x = random_tensor({4, 6}, rng, -3, 3);
    auto err = finite_difference_check([axis](Tape& t, const Var& v) { return weighted_sum(t, softmax(v, axis), 2); }, x);
    CHECK(err < kGradTol);
  }
  Tensor x = random_tensor({5, 3}, rng, -3, 3);
  Tensor mask(Shape{5, 3}, 1.0);
  mask.at(4, 0) = mask.at(3, 0) = mask.at(0, 2) = 0.0;
  auto err = finite_difference_check([&](Tape& t, const Var& v) { return weighted_sum(t, masked_softmax(v, mask, 0), 6); }, x);
  CHECK(err < kGradTol);
}

TEST_CASE("masked softmax zeroes masked positions and rejects all-masked slices", "[tensor][softmax]") {
  Tape tape;
  Var x = tape.constant(Tensor::matrix({{1.0, 5.0}, {2.0, 7.0}}));
  Tensor mask = Tensor::matrix({{1, 0}, {1, 1}});
  const Tensor& y = masked_softmax(x, mask, 0).value();
  CHECK(y.at(0, 1) == 0.0);
  CHECK(y.at(1, 1) == 1.0);
  CHECK(y.at(0, 0) + y.at(1, 0) == Approx(1.0).margin(1e-12));
  CHECK_THROWS_AS(masked_softmax(x, Tensor::matrix({{0, 1}, {0, 1}}), 0), ContractError);
}

TEST_CASE("concat values, errors and gradient split", "[tensor][concat]") {
  Tape tape;
  Var a = tape.constant(Tensor::matrix({{1}}));
  Var b = tape.constant(Tensor::matrix({{2}}));
  CHECK(concat({a, b}, 1).value() == Tensor::matrix({{1, 2}}));
  CHECK_THROWS_AS(concat(std::span<const Var>{}, 0), DimensionError);
  CHECK_THROWS_AS(concat({a, tape.constant(Tensor(Shape{2, 2}))}, 1), DimensionError);

  Rng rng(8);
  Tensor p = random_tensor({3, 2}, rng), q = random_tensor({3, 4}, rng), r = random_tensor({2, 2}, rng);
  std::vector<Tensor*> xs{&p, &q};
  CHECK(finite_difference_check([](Tape& t, std::span<const Var> v) { return weighted_sum(t, concat({v[0], v[1]}, 1), 1); },
                                xs)
            .max_relative_error < kGradTol);
  std::vector<Tensor*> ys{&p, &r};
  CHECK(finite_difference_check([](Tape& t, std::span<const Var> v) { return weighted_sum(t, concat({v[0], v[1]}, 0), 1); },
                                ys)
            .max_relative_error < kGradTol);

  // Backward of concat routes each slice of the upstream gradient to its part.
  Tape t2;
  Var x = t2.leaf(p), y = t2.leaf(q);
  Tensor w = random_tensor({3, 6}, rng);
  t2.backward(sum(mul(concat({x, y}, 1), t2.constant(w))));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) CHECK(t2.grad(x).at(i, j) == w.at(i, j));
    for (std::size_t j = 0; j < 4; ++j) CHECK(t2.grad(y).at(i, j) == w.at(i, j + 2));
  }
}

TEST_CASE("slice and reshape gradients", "[tensor][gradcheck]") {
  Rng rng(14);
  Tensor x = random_tensor({4, 6}, rng);
  CHECK(finite_difference_check([](Tape& t, const Var& v) { return weighted_sum(t, slice(v, 1, 2, 3), 3); }, x) < kGradTol);
  CHECK(finite_difference_check([](Tape& t, const Var& v) { return weighted_sum(t, slice(v, 0, 1, 2), 3); }, x) < kGradTol);
  CHECK(finite_difference_check([](Tape& t, const Var& v) { return weighted_sum(t, reshape(v, {3, 8}), 3); }, x) < kGradTol);
  CHECK(finite_difference_check([](Tape& t, const Var& v) { return weighted_sum(t, transpose(v), 3); }, x) < kGradTol);
}

TEST_CASE("embedding lookup", "[tensor][embedding]") {
  Tape tape;
  Tensor I3 = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  Var table = tape.leaf(I3);
  std::vector<int> two{2};
  CHECK(embedding_lookup(table, two).value() == Tensor::matrix({{0, 0, 1}}));

  std::vector<int> ids{1, 1};
  Var out = embedding_lookup(table, ids);
  Var w = tape.constant(Tensor::matrix({{1, 2, 3}, {10, 20, 30}}));
  tape.backward(sum(mul(out, w)));
  CHECK(tape.grad(table).at(1, 0) == 11);
  CHECK(tape.grad(table).at(1, 2) == 33);
  CHECK(tape.grad(table).at(0, 0) == 0);

  std::vector<int> bad{3};
  try {
    (void)embedding_lookup(table, bad);
    FAIL("expected an index error");
  } catch (const IndexError& e) {
    CHECK(std::string(e.what()).find("id 3") != std::string::npos);
  }

  Rng rng(3);
  Tensor tab = random_tensor({5, 4}, rng);
  std::vector<int> seq{0, 3, 3, 1};
  CHECK(finite_difference_check([&](Tape& t, const Var& v) { return weighted_sum(t, embedding_lookup(v, seq), 2); }, tab) <
        kGradTol);
}

TEST_CASE("positional weighted sum gradient", "[tensor][gradcheck]") {
  Rng rng(30);
  Tensor w = random_tensor({3, 2}, rng), vals = random_tensor({6, 4}, rng);
  std::vector<Tensor*> xs{&w, &vals};
  CHECK(finite_difference_check(
            [](Tape& t, std::span<const Var> v) { return weighted_sum(t, positional_weighted_sum(v[0], v[1]), 5); }, xs)
            .max_relative_error < kGradTol);
}

namespace {

// Independent log-sum-exp oracle for the masked cross-entropy.
double cross_entropy_oracle(const Tensor& logits, const std::vector<int>& targets, const std::vector<double>& mask) {
  const std::size_t V = logits.shape()[1];
  long double total = 0.0L;
  int count = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (mask[i] == 0.0) continue;
    long double m = -1e300L;
    for (std::size_t j = 0; j < V; ++j) m = std::max<long double>(m, logits.at(i, j));
    long double z = 0.0L;
    for (std::size_t j = 0; j < V; ++j) z += std::exp(static_cast<long double>(logits.at(i, j)) - m);
    total += m + std::log(z) - logits.at(i, static_cast<std::size_t>(targets[i]));
    ++count;
  }
  return static_cast<double>(total / count);
}

}  // namespace

TEST_CASE("masked cross entropy", "[tensor][loss]") {
  Tape tape;
  Tensor onehot(Shape{1, 4});
  onehot.at(0, 2) = 30.0;
  std::vector<int> tgt{2};
  std::vector<double> m1{1.0};
  CHECK(masked_cross_entropy(tape.constant(onehot), tgt, m1).value()[0] < 1e-12);

  std::vector<int> tgt2{1, 3};
  std::vector<double> m2{1.0, 1.0};
  CHECK(masked_cross_entropy(tape.constant(Tensor(Shape{2, 4})), tgt2, m2).value()[0] == Approx(std::log(4.0)).margin(1e-15));

  std::vector<double> m0{0.0, 0.0};
  CHECK_THROWS_AS(masked_cross_entropy(tape.constant(Tensor(Shape{2, 4})), tgt2, m0), ContractError);

  Rng rng(77);
  Tensor logits = random_tensor({6, 5}, rng, -4, 4);
  std::vector<int> targets{0, 4, 2, 2, 1, 3};
  std::vector<double> mask{1, 1, 0, 1, 0, 1};
  const double got = masked_cross_entropy(tape.constant(logits), targets, mask).value()[0];
  CHECK(std::abs(got - cross_entropy_oracle(logits, targets, mask)) < 1e-10);
  CHECK(finite_difference_check([&](Tape&, const Var& v) { return masked_cross_entropy(v, targets, mask); }, logits) <
        kGradTol);
}

TEST_CASE("dropout", "[tensor][dropout]") {
  Rng rng(1);
  Tape tape;
  Var x = tape.constant(Tensor(Shape{10, 10}, 2.0));
  CHECK(dropout(x, 0.0, rng, true).id() == x.id());
  CHECK(dropout(x, 0.9, rng, false).value() == x.value());
  CHECK_THROWS_AS(dropout(x, 1.0, rng, true), ConfigError);

  const std::size_t n = 1000000;
  Var big = tape.constant(Tensor(Shape{n}, 1.0));
  const Tensor& y = dropout(big, 0.5, rng, true).value();
  std::size_t survivors = 0;
  double mean = 0.0;
  for (double v : y.data()) {
    survivors += v != 0.0;
    mean += v;
  }
  mean /= static_cast<double>(n);
  const double frac = static_cast<double>(survivors) / static_cast<double>(n);
  CHECK(frac >= 0.498);
  CHECK(frac <= 0.502);
  CHECK(std::abs(mean - 1.0) < 0.01);
}

TEST_CASE("l2 normalize", "[tensor][l2]") {
  Tape tape;
  const Tensor& y = l2_normalize(tape.constant(Tensor::vector({3, 4})), 0).value();
  CHECK(y[0] == Approx(0.6).margin(1e-15));
  CHECK(y[1] == Approx(0.8).margin(1e-15));
  CHECK(l2_normalize(tape.constant(Tensor::vector({0, 1, 0})), 0).value() == Tensor::vector({0, 1, 0}));
  const Tensor& z = l2_normalize(tape.constant(Tensor::vector({0, 0, 0})), 0).value();
  CHECK(z == Tensor::vector({0, 0, 0}));

  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Var x = tape.constant(random_tensor({4, 5}, rng, -10, 10));
    for (std::size_t axis : {0u, 1u}) {
      const Tensor& once = l2_normalize(x, axis).value();
      const Tensor& twice = l2_normalize(tape.constant(once), axis).value();
      for (std::size_t i = 0; i < once.size(); ++i) REQUIRE(std::abs(once[i] - twice[i]) < 1e-12);
    }
  }
  Tensor x = random_tensor({3, 4}, rng);
  CHECK(finite_difference_check([](Tape& t, const Var& v) { return weighted_sum(t, l2_normalize(v, 1), 4); }, x) < kGradTol);
}

TEST_CASE("backward basics", "[tensor][backward]") {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(2.0));
  Var y = tape.leaf(Tensor::scalar(3.0));
  tape.backward(mul(x, y));
  CHECK(tape.grad(x)[0] == 3.0);
  CHECK(tape.grad(y)[0] == 2.0);

  Tape t2;
  Var v = t2.leaf(Tensor(Shape{2, 3}, 0.5));
  t2.backward(sum(v));
  for (double g : t2.grad(v).data()) CHECK(g == 1.0);

  Tape t3;
  Var w = t3.leaf(Tensor(Shape{2}));
  CHECK_THROWS_AS(t3.backward(w), ContractError);
}

TEST_CASE("untouched trainable leaves still get a zero gradient", "[tensor][backward]") {
  Tape tape;
  Var used = tape.leaf(Tensor(Shape{2, 2}, 1.0));
  Var unused = tape.leaf(Tensor(Shape{3, 1}, 1.0));
  tape.backward(sum(used));
  CHECK(tape.grad(unused).shape() == Shape{3, 1});
  CHECK(tape.grad(unused) == Tensor(Shape{3, 1}));
}

TEST_CASE("backward is deterministic", "[tensor][backward]") {
  Rng rng(99);
  Tensor a = random_tensor({6, 5}, rng), b = random_tensor({5, 4}, rng);
  auto run = [&] {
    Tape tape;
    Var x = tape.bind(a), y = tape.bind(b);
    Var loss = sum(tanh(matmul(softmax(x, 1), y)));
    tape.backward(loss);
    return std::make_pair(tape.grad(x), tape.grad(y));
  };
  const auto g1 = run();
  const auto g2 = run();
  CHECK(g1.first == g2.first);
  CHECK(g1.second == g2.second);
}

TEST_CASE("finite difference checker", "[tensor][gradcheck]") {
  CHECK(finite_difference_check([](Tape&, const Var& v) { return mul(v, v); }, Tensor::scalar(3.0)) < 1e-8);
  CHECK(finite_difference_check([](Tape& t, const Var&) { return t.constant(Tensor::scalar(4.0)); }, Tensor::scalar(1.0)) ==
        0.0);
  Rng rng(1);
  CHECK_THROWS_AS(finite_difference_check([&](Tape& t, const Var& v) { return sum(dropout(v, 0.5, rng, true)); },
                                          Tensor(Shape{8}, 1.0)),
                  ContractError);
}
