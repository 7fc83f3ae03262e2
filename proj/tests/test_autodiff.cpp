#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "kws/autodiff.hpp"
#include "kws/random.hpp"
#include "test_util.hpp"

namespace {

using namespace kws;
using ad::Shape;
using ad::Tensor;

Tensor random_tensor(Shape shape, std::uint64_t seed, bool grad = true, double lo = -1.0, double hi = 1.0) {
  const auto n = ad::numel(shape);
  return Tensor::from(std::move(shape), testutil::random_values(n, seed, lo, hi), grad);
}

// Weighted sum against fixed random coefficients, so every output element
// carries a distinct, non-trivial gradient.
Tensor probe(const Tensor& y, std::uint64_t seed = 99) {
  return ad::sum(ad::mul(y, random_tensor(y.shape(), seed, false, -2.0, 2.0)));
}

TEST(Tensor, Construction) {
  const auto t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.shape(), (Shape{2, 3}));
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.at(4), 5.0);
  EXPECT_FALSE(t.requires_grad());
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_EQ(Tensor::scalar(2.5).item(), 2.5);
  EXPECT_THROW(t.item(), UsageError);
}

TEST(Primitives, AddZeroIsIdentity) {
  const auto x = random_tensor({3, 4}, 1);
  const auto y = ad::add(x, Tensor::zeros({3, 4}));
  EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
  const auto z = ad::add(x, Tensor::scalar(0.0));
  EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), z.data().begin()));
}

TEST(Primitives, MatmulIdentity) {
  const auto a = random_tensor({3, 5}, 2);
  const auto eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto y = ad::matmul(eye, a);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), y.data().begin()));
}

TEST(Primitives, MatmulValues) {
  const auto a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
  const auto c = ad::matmul(a, b);
  EXPECT_EQ(std::vector<double>(c.data().begin(), c.data().end()), (std::vector<double>{58, 64, 139, 154}));
}

TEST(Primitives, ShapeErrorsNameTheOp) {
  try {
    ad::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("(2, 3)"), std::string::npos);
  }
  EXPECT_THROW(ad::add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), ShapeError);
  EXPECT_THROW(ad::reshape(Tensor::zeros({2, 3}), {4}), ShapeError);
  EXPECT_THROW(ad::slice(Tensor::zeros({2, 3}), 1, 2, 2), ShapeError);
  EXPECT_THROW(ad::concat({Tensor::zeros({2, 3}), Tensor::zeros({3, 3})}, 1), ShapeError);
}

TEST(Primitives, Broadcasting) {
  const auto a = Tensor::from({2, 1}, {1, 2});
  const auto b = Tensor::from({3}, {10, 20, 30});
  const auto c = ad::add(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 3}));
  EXPECT_EQ(std::vector<double>(c.data().begin(), c.data().end()), (std::vector<double>{11, 21, 31, 12, 22, 32}));
}

TEST(Primitives, SoftmaxProperties) {
  const auto s = ad::softmax(Tensor::from({3}, {1, 2, 3}), 0);
  EXPECT_NEAR(s.at(0) + s.at(1) + s.at(2), 1.0, 1e-15);
  EXPECT_LT(s.at(0), s.at(1));
  EXPECT_LT(s.at(1), s.at(2));

  const auto x = random_tensor({5, 7}, 3, false, -10, 10);
  const auto p = ad::softmax(x, 1);
  const auto q = ad::softmax(ad::add(x, Tensor::scalar(123.0)), 1);
  for (std::size_t r = 0; r < 5; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      total += p.at(r * 7 + c);
      EXPECT_NEAR(p.at(r * 7 + c), q.at(r * 7 + c), 1e-12);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  const auto big = ad::softmax(Tensor::from({2}, {1000.0, 0.0}), 0);
  EXPECT_TRUE(std::isfinite(big.at(0)));
  EXPECT_EQ(big.at(0), 1.0);
}

TEST(Primitives, SliceConcatPermute) {
  const auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto s = ad::slice(x, 1, 1, 2);
  EXPECT_EQ(std::vector<double>(s.data().begin(), s.data().end()), (std::vector<double>{2, 3, 5, 6}));
  const auto c = ad::concat({x, s}, 1);
  EXPECT_EQ(c.shape(), (Shape{2, 5}));
  EXPECT_EQ(c.at(3), 2.0);
  const auto t = ad::transpose(x);
  EXPECT_EQ(std::vector<double>(t.data().begin(), t.data().end()), (std::vector<double>{1, 4, 2, 5, 3, 6}));
  const auto m = ad::mean(x, 0);
  EXPECT_EQ(std::vector<double>(m.data().begin(), m.data().end()), (std::vector<double>{2.5, 3.5, 4.5}));
}

TEST(Backward, SumGivesOnes) {
  auto x = random_tensor({4, 3}, 4);
  ad::backward(ad::sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  auto x = random_tensor({4, 3}, 5);
  ad::backward(ad::sum(ad::mul(x, x)));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x.at(i));
}

TEST(Backward, NonScalarIsUsageError) {
  auto x = random_tensor({2}, 6);
  EXPECT_THROW(ad::backward(ad::mul(x, x)), UsageError);
}

TEST(Backward, AccumulatesAcrossUsesAndCalls) {
  auto x = random_tensor({3}, 7);
  // x used twice: d/dx (sum(x*3) + sum(x*x)) == 3 + 2x, same as the rewritten single use.
  ad::backward(ad::add(ad::sum(ad::scale(x, 3.0)), ad::sum(ad::mul(x, x))));
  std::vector<double> first(x.grad().begin(), x.grad().end());
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(first[i], 3 + 2 * x.at(i), 1e-15);
  ad::backward(ad::sum(x));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(x.grad()[i], first[i] + 1.0, 1e-15);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto x = random_tensor({3}, 8);
  ad::NoGradGuard guard;
  const auto y = ad::sum(ad::mul(x, x));
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node().inputs.empty());
}

TEST(Forward, Deterministic) {
  const auto x = random_tensor({6, 5}, 9);
  const auto w = random_tensor({5, 4}, 10);
  const auto a = ad::softmax(ad::tanh(ad::matmul(x, w)), 1);
  const auto b = ad::softmax(ad::tanh(ad::matmul(x, w)), 1);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(GradCheck, SigmoidOfLinearMap) {
  auto w = random_tensor({4, 5}, 11);
  auto x = random_tensor({5, 1}, 12);
  const double err = ad::grad_check([&] { return ad::sum(ad::sigmoid(ad::matmul(w, x))); }, {w, x});
  EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, ConstantFunction) {
  auto w = random_tensor({3}, 13);
  EXPECT_EQ(ad::grad_check([&] { return Tensor::scalar(4.0); }, {w}), 0.0);
}

TEST(GradCheck, DetectsWrongGradient) {
  auto x = random_tensor({3}, 14);
  // A node whose backward is deliberately wrong.
  const auto bad = [&] {
    return ad::make_result("bad", {1}, {x.at(0) * x.at(0)}, {x}, [](ad::Node& self) {
      if (auto* g = ad::input_grad(self, 0)) (*g)[0] += self.grad[0] * 1.0;
    });
  };
  EXPECT_GT(ad::grad_check(bad, {x}), 1e-2);
}

// Each primitive against central differences on random shapes up to 8 per axis.
class PrimitiveGrad : public ::testing::Test {
 protected:
  Shape random_shape(std::size_t rank) {
    Shape s(rank);
    for (auto& d : s) d = 1 + rng.below(8);
    return s;
  }
  void expect_ok(const std::function<Tensor()>& f, std::vector<Tensor> params) {
    EXPECT_LT(ad::grad_check(f, std::move(params)), 1e-6);
  }
  Rng rng{2024};
};

TEST_F(PrimitiveGrad, Elementwise) {
  for (int trial = 0; trial < 5; ++trial) {
    const auto shape = random_shape(1 + rng.below(3));
    auto a = random_tensor(shape, 20 + trial), b = random_tensor(shape, 40 + trial);
    auto pos = random_tensor(shape, 60 + trial, true, 0.5, 2.0);
    expect_ok([&] { return probe(ad::add(a, b)); }, {a, b});
    expect_ok([&] { return probe(ad::sub(a, b)); }, {a, b});
    expect_ok([&] { return probe(ad::mul(a, b)); }, {a, b});
    expect_ok([&] { return probe(ad::sigmoid(a)); }, {a});
    expect_ok([&] { return probe(ad::tanh(a)); }, {a});
    expect_ok([&] { return probe(ad::exp(a)); }, {a});
    expect_ok([&] { return probe(ad::log(pos)); }, {pos});
    expect_ok([&] { return probe(ad::scale(a, -1.7)); }, {a});
    // relu and max have kinks; random inputs sit away from them almost surely
    expect_ok([&] { return probe(ad::relu(a)); }, {a});
    expect_ok([&] { return probe(ad::maximum(a, b)); }, {a, b});
  }
}

TEST_F(PrimitiveGrad, BroadcastBinary) {
  auto a = random_tensor({4, 1, 3}, 70), b = random_tensor({5, 1}, 71);
  expect_ok([&] { return probe(ad::add(a, b)); }, {a, b});
  expect_ok([&] { return probe(ad::mul(a, b)); }, {a, b});
  expect_ok([&] { return probe(ad::sub(b, a)); }, {a, b});
  auto c = random_tensor({3}, 72);
  expect_ok([&] { return probe(ad::broadcast_to(c, {2, 4, 3})); }, {c});
}

TEST_F(PrimitiveGrad, MatmulAndShapes) {
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t m = 1 + rng.below(8), k = 1 + rng.below(8), n = 1 + rng.below(8);
    auto a = random_tensor({m, k}, 80 + trial), b = random_tensor({k, n}, 90 + trial);
    expect_ok([&] { return probe(ad::matmul(a, b)); }, {a, b});
    expect_ok([&] { return probe(ad::transpose(a)); }, {a});
    expect_ok([&] { return probe(ad::reshape(a, {m * k})); }, {a});
  }
  auto x = random_tensor({2, 3, 4}, 100);
  expect_ok([&] { return probe(ad::permute(x, {2, 0, 1})); }, {x});
  expect_ok([&] { return probe(ad::slice(x, 1, 1, 2)); }, {x});
  auto y = random_tensor({2, 5, 4}, 101);
  expect_ok([&] { return probe(ad::concat({x, y, x}, 1)); }, {x, y});
}

TEST_F(PrimitiveGrad, Reductions) {
  auto x = random_tensor({3, 4, 5}, 110);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    expect_ok([&] { return probe(ad::sum(x, axis)); }, {x});
    expect_ok([&] { return probe(ad::mean(x, axis, true)); }, {x});
    expect_ok([&] { return probe(ad::softmax(x, axis)); }, {x});
  }
  expect_ok([&] { return ad::mean(ad::mul(x, x)); }, {x});
}

TEST_F(PrimitiveGrad, Composite) {
  auto w = random_tensor({6, 4}, 120), x = random_tensor({3, 6}, 121), b = random_tensor({4}, 122);
  expect_ok(
      [&] {
        const auto h = ad::tanh(ad::add(ad::matmul(x, w), b));
        return ad::sum(ad::log(ad::sum(ad::exp(h), 1)));
      },
      {w, x, b});
}

TEST(GradCheck, Subsampling) {
  auto w = random_tensor({30, 30}, 130);
  const double err = ad::grad_check([&] { return probe(ad::tanh(w)); }, {w}, {1e-5, 50, 3});
  EXPECT_LT(err, 1e-6);
}

}  // namespace
