#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "rayfusion/nn.hpp"
#include "rayfusion/tensor.hpp"
#include "test_support.hpp"

using namespace rayfusion;
using rftest::random_tensor;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<double> vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Runs `op` on fresh leaves, backprops a random probe and checks every leaf
// on up to 20 coordinates.
void expect_gradients(const std::vector<Tensor>& leaves, const std::function<Tensor(const std::vector<Tensor>&)>& op,
                      std::uint64_t seed = 1, double tol = 1e-6) {
  Rng rng(seed);
  for (Tensor leaf : leaves) leaf.zero_grad();
  const Tensor out = op(leaves);
  const Tensor w = random_tensor(out.shape(), rng);
  rftest::probe(out, w).backward();
  for (Tensor leaf : leaves) {
    if (!leaf.requires_grad()) continue;
    ASSERT_TRUE(leaf.has_grad());
    const auto r = rftest::check_coordinates(
        leaf, [&] { return rftest::probe(op(leaves), w).item(); }, std::min<std::size_t>(20, leaf.numel()), rng);
    EXPECT_LT(r.max_rel, tol);
  }
}

}  // namespace

TEST(Matmul, IdentityAndSelector) {
  const Tensor i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(vec(matmul(i2, a)), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_EQ(vec(matmul(Tensor::from({1, 2}, {1, 0}), Tensor::from({2, 1}, {0, 5}))), (std::vector<double>{0}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(3);
  const Tensor a = random_tensor({3, 3}, rng), b = random_tensor({3, 3}, rng);
  const Tensor c = matmul(a, b);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 3 + j];
      EXPECT_NEAR(c[i * 3 + j], s, 1e-12);
    }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(Matmul, BatchedGradient) {
  Rng rng(4);
  expect_gradients({random_tensor({2, 3, 4}, rng, true), random_tensor({2, 4, 2}, rng, true)},
                   [](const auto& x) { return matmul(x[0], x[1]); });
  expect_gradients({random_tensor({3, 4}, rng, true), random_tensor({4, 5}, rng, true)},
                   [](const auto& x) { return matmul(x[0], x[1]); });
}

TEST(Ops, ElementwiseGradients) {
  Rng rng(5);
  const auto a = random_tensor({3, 4}, rng, true), b = random_tensor({3, 4}, rng, true), row = random_tensor({4}, rng, true);
  expect_gradients({a, b}, [](const auto& x) { return add(x[0], x[1]); });
  expect_gradients({a, row}, [](const auto& x) { return sub(x[0], x[1]); });
  expect_gradients({a, row}, [](const auto& x) { return mul(x[0], x[1]); });
  expect_gradients({a}, [](const auto& x) { return scale(x[0], -2.5); });
  expect_gradients({a}, [](const auto& x) { return sigmoid(x[0]); });
}

TEST(Ops, KinkedGradientsAwayFromZero) {
  const Tensor x = Tensor::from({4}, {-1.5, -0.3, 0.4, 2.0}, true);
  expect_gradients({x}, [](const auto& v) { return relu(v[0]); });
  const Tensor y = Tensor::from({4}, {-1.5, -0.3, 0.4, 2.0}, true);
  expect_gradients({y}, [](const auto& v) { return abs(v[0]); });
}

TEST(Ops, ShapeGradients) {
  Rng rng(6);
  const auto a = random_tensor({3, 4}, rng, true), b = random_tensor({3, 2}, rng, true);
  expect_gradients({a}, [](const auto& x) { return transpose(x[0]); });
  expect_gradients({a}, [](const auto& x) { return reshape(x[0], {2, 6}); });
  expect_gradients({a, b}, [](const auto& x) { return concat({x[0], x[1]}); });
  expect_gradients({a}, [](const auto& x) { return slice_last(x[0], 1, 3); });
  expect_gradients({a}, [](const auto& x) { return gather_rows(x[0], {2, 0, 2}); });
  expect_gradients({a, random_tensor({3}, rng, true)}, [](const auto& x) { return mul_rows(x[0], x[1]); });
}

TEST(Ops, ReductionGradients) {
  Rng rng(7);
  const auto a = random_tensor({3, 4}, rng, true);
  expect_gradients({a}, [](const auto& x) { return sum(x[0]); });
  expect_gradients({a}, [](const auto& x) { return mean(x[0]); });
  expect_gradients({a}, [](const auto& x) { return mean(x[0], 0); });
}

TEST(Ops, LinearOverLeadingDims) {
  Rng rng(8);
  const auto x = random_tensor({2, 3, 4}, rng, true), w = random_tensor({4, 5}, rng, true), b = random_tensor({5}, rng, true);
  expect_gradients({x, w, b}, [](const auto& v) { return linear(v[0], v[1], v[2]); });
}

TEST(Backward, SumAndSquare) {
  const Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  sum(x).backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 1, 1}));
  const Tensor s = Tensor::scalar(3.0, true);
  mul(s, s).backward();
  EXPECT_DOUBLE_EQ(s.grad()[0], 6.0);
}

TEST(Backward, RepeatedCallsAccumulate) {
  const Tensor x = Tensor::from({2}, {1, 2}, true);
  const Tensor loss = sum(scale(x, 2.0));
  loss.backward();
  loss.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4.0);
}

TEST(Backward, NonScalarLossRejected) { EXPECT_THROW(Tensor::zeros({2}, true).backward(), DimensionError); }

TEST(Backward, NoGradGuardBuildsNoGraph) {
  const Tensor x = Tensor::from({2}, {1, 2}, true);
  NoGradGuard g;
  EXPECT_FALSE(sum(x).requires_grad());
}

TEST(Softmax, Examples) {
  const Tensor a = softmax(Tensor::from({2}, {0, 0}));
  EXPECT_DOUBLE_EQ(a[0], 0.5);
  const Tensor b = softmax(Tensor::from({2}, {0, -kInf}));
  EXPECT_EQ(b[0], 1.0);
  EXPECT_EQ(b[1], 0.0);
  const Tensor c = softmax(Tensor::from({3}, {1, 2, 3}));
  // exp(k) / (e + e^2 + e^3)
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(c[k], std::exp(k + 1.0) / z, 1e-15);
  EXPECT_NEAR(c[0], 0.09003057, 1e-8);
  EXPECT_NEAR(c[1], 0.24472847, 1e-8);
  EXPECT_NEAR(c[2], 0.66524096, 1e-8);
}

TEST(Softmax, AllMaskedRowThrows) {
  EXPECT_THROW(softmax(Tensor::from({2, 2}, {0, 1, -kInf, -kInf})), DegenerateMaskError);
}

TEST(Softmax, RowsSumToOneAndMaskedAreZero) {
  Rng rng(9);
  std::vector<double> v(6 * 5);
  for (auto& x : v) x = rng.uniform() < 0.3 ? -kInf : rng.uniform(-5, 5);
  for (int r = 0; r < 6; ++r) v[static_cast<std::size_t>(r * 5)] = 0.0;
  const Tensor s = softmax(Tensor::from({6, 5}, v));
  for (int r = 0; r < 6; ++r) {
    double total = 0.0;
    for (int c = 0; c < 5; ++c) {
      const std::size_t i = static_cast<std::size_t>(r * 5 + c);
      if (v[i] == -kInf) {
        EXPECT_EQ(s[i], 0.0);
      }
      total += s[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Softmax, GradientWithMask) {
  Rng rng(10);
  const Tensor x = random_tensor({3, 4}, rng, true);
  std::vector<double> m(12, 0.0);
  m[1] = m[6] = m[11] = -kInf;
  const Tensor mask = Tensor::from({3, 4}, m);
  expect_gradients({x}, [&](const auto& v) { return softmax(add(v[0], mask)); });
  expect_gradients({random_tensor({2, 3, 4}, rng, true)}, [](const auto& v) { return softmax(v[0], 1); });
}

TEST(LayerNorm, Examples) {
  const Tensor g = Tensor::full({2}, 1.0), b = Tensor::zeros({2});
  const Tensor c = layernorm(Tensor::from({1, 2}, {3, 3}), g, b);
  EXPECT_EQ(c[0], 0.0);
  EXPECT_EQ(c[1], 0.0);
  const Tensor n = layernorm(Tensor::from({1, 2}, {1, -1}), g, b);
  EXPECT_NEAR(n[0], 1.0, 1e-4);
  EXPECT_NEAR(n[1], -1.0, 1e-4);
}

TEST(LayerNorm, MomentsAndGradient) {
  Rng rng(11);
  const Tensor x = random_tensor({4, 8}, rng, true, -3, 3);
  const Tensor y = layernorm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}));
  for (int r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (int c = 0; c < 8; ++c) m += y[r * 8 + c];
    m /= 8;
    for (int c = 0; c < 8; ++c) v += (y[r * 8 + c] - m) * (y[r * 8 + c] - m);
    EXPECT_LT(std::fabs(m), 1e-12);
    EXPECT_NEAR(v / 8, 1.0, 1e-4);
  }
  expect_gradients({x, random_tensor({8}, rng, true), random_tensor({8}, rng, true)},
                   [](const auto& v) { return layernorm(v[0], v[1], v[2]); });
}

TEST(Mlp, ZeroWeightsGiveZero) {
  ParamStore store(1);
  Mlp mlp(store, "m", {{3, 4, 2}});
  for (auto& p : store.params()) std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.0);
  Rng rng(1);
  const Tensor y = mlp.forward(random_tensor({5, 3}, rng));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Mlp, SingleLayerIsMatmulPlusBias) {
  ParamStore store(2);
  Mlp mlp(store, "m", {{3, 2}});
  Rng rng(2);
  const Tensor x = random_tensor({4, 3}, rng);
  const Tensor a = mlp.forward(x);
  const Tensor b = add(matmul(x, mlp.weights()[0]), mlp.biases()[0]);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Mlp, TwoLayerReluMatchesScalarLoop) {
  ParamStore store(3);
  Mlp mlp(store, "m", {{3, 4, 2}});
  const auto& w0 = mlp.weights()[0];
  const auto& b0 = mlp.biases()[0];
  const auto& w1 = mlp.weights()[1];
  const auto& b1 = mlp.biases()[1];
  Rng rng(3);
  const Tensor x = random_tensor({5, 3}, rng);
  const Tensor y = mlp.forward(x);
  for (int n = 0; n < 5; ++n) {
    double h[4];
    for (int j = 0; j < 4; ++j) {
      h[j] = b0[j];
      for (int i = 0; i < 3; ++i) h[j] += x[n * 3 + i] * w0[i * 4 + j];
      h[j] = std::max(0.0, h[j]);
    }
    for (int k = 0; k < 2; ++k) {
      double o = b1[k];
      for (int j = 0; j < 4; ++j) o += h[j] * w1[j * 2 + k];
      EXPECT_NEAR(y[n * 2 + k], o, 1e-12);
    }
  }
  EXPECT_NEAR(mlp_forward(mlp.spec(), store, "m", x)[3], y[3], 0.0);
}

TEST(Mlp, WidthMismatchThrows) {
  ParamStore store(4);
  Mlp mlp(store, "m", {{3, 2}});
  EXPECT_THROW(mlp.forward(Tensor::zeros({1, 4})), DimensionError);
  EXPECT_THROW(MlpSpec{{3}}.validate(), std::invalid_argument);
}

TEST(ParamStore, InitDependsOnNameNotOrder) {
  ParamStore a(9), b(9);
  a.add_uniform("x", {3}, 1.0);
  const Tensor ay = a.add_uniform("y", {3}, 1.0);
  const Tensor by = b.add_uniform("y", {3}, 1.0);
  EXPECT_EQ(vec(ay), vec(by));
  EXPECT_THROW(a.add_constant("x", {1}, 0.0), std::invalid_argument);
}

TEST(AdamW, ZeroGradNoDecayIsNoOp) {
  ParamStore store(1);
  Tensor w = store.add_constant("w", {2}, 0.7);
  w.mutable_grad();
  AdamW opt({0.9, 0.999, 1e-8, 0.0});
  opt.step(store, 0.1);
  EXPECT_EQ(w[0], 0.7);
  EXPECT_EQ(w[1], 0.7);
}

TEST(AdamW, DescendsAndConverges) {
  ParamStore store(1);
  Tensor w = store.add_constant("w", {1}, 1.0);
  AdamW opt({0.9, 0.999, 1e-8, 0.0});
  store.zero_grad();
  mul(w, w).backward();
  opt.step(store, 0.1);
  EXPECT_LT(std::fabs(w[0]), 1.0);

  ParamStore q(2);
  Tensor v = q.add_constant("v", {3}, 2.0);
  AdamW opt2({0.9, 0.999, 1e-8, 0.0});
  double loss = 0.0;
  for (int s = 0; s < 200; ++s) {
    q.zero_grad();
    const Tensor l = sum(mul(v, v));
    loss = l.item();
    l.backward();
    opt2.step(q, 0.1 * (1.0 - s / 200.0));
  }
  EXPECT_LT(loss, 1e-6);
}

TEST(AdamW, MissingGradIsSkippedAndCounted) {
  ParamStore store(1);
  Tensor w = store.add_constant("w", {1}, 1.0);
  AdamW opt;
  opt.step(store, 0.1);
  EXPECT_EQ(opt.skipped(), 1u);
  EXPECT_EQ(w[0], 1.0);
}

TEST(Checkpoint, RoundTripAndErrors) {
  ParamStore a(5);
  a.add_uniform("p.w", {2, 3}, 1.0);
  a.add_uniform("p.b", {3}, 1.0);
  const auto bytes = encode_checkpoint(param_records(a));
  ParamStore b(6);
  b.add_uniform("p.w", {2, 3}, 1.0);
  b.add_uniform("p.b", {3}, 1.0);
  load_params(b, decode_checkpoint(bytes));
  EXPECT_EQ(vec(a.get("p.w")), vec(b.get("p.w")));
  EXPECT_EQ(encode_checkpoint(param_records(b)), bytes);

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), BadMagicError);
  EXPECT_THROW(decode_checkpoint({bytes.begin(), bytes.begin() + 20}), TruncationError);
  ParamStore c(7);
  c.add_uniform("p.w", {3, 2}, 1.0);
  EXPECT_THROW(load_params(c, decode_checkpoint(bytes)), DimensionError);
}

TEST(Determinism, ForwardIsBitIdentical) {
  auto run = [] {
    ParamStore s(42);
    Mlp m(s, "m", {{4, 8, 3}});
    Rng rng(1);
    return vec(softmax(m.forward(random_tensor({6, 4}, rng))));
  };
  EXPECT_EQ(run(), run());
}
