#include <gtest/gtest.h>

#include <cmath>

#include "saferedir/numerics/grad_check.hpp"
#include "test_util.hpp"

using namespace saferedir;
using srtest::random_array;

TEST(Array, ShapeMustMatchData) {
  EXPECT_THROW(Array<double>({2, 3}, std::vector<double>(5)), DimensionError);
  Array<double> a({2, 3});
  EXPECT_EQ(a.size(), shape_size(a.shape()));
  EXPECT_THROW(a.reshaped({4, 2}), DimensionError);
}

TEST(Matmul, IdentityAndOrthogonalRows) {
  auto I = Array<double>::from_rows({{1, 0}, {0, 1}});
  auto M = Array<double>::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(I, M), M);
  auto r = matmul(Array<double>::from_rows({{1, 0}}), Array<double>::from_rows({{0}, {1}}));
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  EXPECT_EQ(r[0], 0.0);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(11);
  auto a = random_array({5, 7}, rng), b = random_array({7, 3}, rng);
  auto c = matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 7; ++k) s += a(i, k) * b(k, j);
      EXPECT_LE(std::abs(c(i, j) - s), 1e-12);
    }
}

TEST(Matmul, InnerMismatchThrows) {
  EXPECT_THROW(matmul(Array<double>({2, 3}), Array<double>({2, 3})), DimensionError);
}

TEST(Softmax, Examples) {
  auto s = softmax(Array<double>({2}, {0, 0}), 0);
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
  auto big = softmax(Array<double>({2}, {1000, 0}), 0);
  EXPECT_TRUE(big.all_finite());
  EXPECT_NEAR(big[0], 1.0, 1e-15);
  EXPECT_NEAR(big[1], 0.0, 1e-15);
  auto v = softmax(Array<double>({3}, {1, 2, 3}), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) EXPECT_LE(std::abs(v[i] - std::exp(i + 1.0) / z), 1e-14);
}

TEST(Softmax, SumsToOneAlongEveryAxis) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_array({3, 4, 5}, rng, 10.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      auto s = softmax(x, axis);
      std::size_t outer, n, inner;
      detail::split_axis(x.shape(), axis, outer, n, inner);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          double sum = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const double v = s[o * n * inner + j * inner + in];
            EXPECT_GE(v, 0.0);
            sum += v;
          }
          EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    }
  }
}

TEST(Pointwise, LayerNormSiluCosine) {
  auto ln = layer_norm(Array<double>({1, 4}, {3, 3, 3, 3}), Array<double>(), Array<double>(), 1);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(ln[i], 0.0);
  EXPECT_EQ(silu(0.0), 0.0);
  Rng rng(5);
  auto v = random_array({1, 9}, rng);
  EXPECT_NEAR(cosine_sim(v, v, 1)[0], 1.0, 1e-15);
  EXPECT_EQ(cosine_sim(v, Array<double>({1, 9}), 1)[0], 0.0);
  auto x = random_array({6, 10}, rng, 3.0);
  auto y = layer_norm(x, Array<double>(), Array<double>(), 1);
  for (std::size_t r = 0; r < 6; ++r) {
    double m = 0, var = 0;
    for (std::size_t j = 0; j < 10; ++j) m += y(r, j) / 10;
    for (std::size_t j = 0; j < 10; ++j) var += (y(r, j) - m) * (y(r, j) - m) / 10;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-5);
  }
  auto a = random_array({20, 7}, rng), b = random_array({20, 7}, rng);
  auto c = cosine_sim(a, b, 1);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_LE(c[i], 1.0);
    EXPECT_GE(c[i], -1.0);
  }
}

TEST(Pointwise, L2NormIsAbsolutelyHomogeneous) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    auto x = random_array({4, 6}, rng);
    const double c = rng.uniform(-5, 5);
    Array<double> cx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) cx[i] = c * x[i];
    auto n1 = l2_norm(x, 1), n2 = l2_norm(cx, 1);
    for (std::size_t i = 0; i < n1.size(); ++i) EXPECT_NEAR(n2[i], std::abs(c) * n1[i], 1e-12);
  }
}

TEST(GradCheck, Square) {
  EXPECT_LE(grad_check_scalar([](double w) { return w * w; }, 3.0, 6.0), 1e-9);
}

TEST(GradCheck, UnusedParameterHasZeroError) {
  Parameter<double> used("used", Array<double>({1}, {3.0}));
  Parameter<double> unused("unused", Array<double>({3}, {1.0, 2.0, 3.0}));
  auto rep = grad_check({&used, &unused}, [&](Graph<double>& g) {
    Var w = g.param(used);
    g.param(unused);
    return ad::mul(g, w, w);
  });
  EXPECT_EQ(rep.per_tensor.at("unused"), 0.0);
  EXPECT_LE(rep.per_tensor.at("used"), 1e-9);
}

TEST(GradCheck, NonFiniteLossAborts) {
  Parameter<double> p("p", Array<double>({1}, {0.0}));
  EXPECT_THROW(grad_check({&p}, [&](Graph<double>& g) {
    Var w = g.param(p);
    return ad::div_last(g, g.constant(Array<double>({1}, {1.0})), w);
  }), NumericError);
}

// Every differentiable primitive against central differences.
namespace {

Parameter<double> rp(const std::string& name, Shape s, Rng& rng, double sd = 1.0) {
  return Parameter<double>(name, random_array(std::move(s), rng, sd));
}

void expect_ok(const GradCheckReport& rep) {
  EXPECT_LE(rep.max_rel_err, 1e-6) << "worst: " << rep.worst;
}

// Random linear readout so every output coordinate matters.
Var readout(Graph<double>& g, Var v, std::uint64_t seed) {
  Rng rng(seed);
  Array<double> w = random_array(g.shape(v), rng);
  return ad::sum_all(g, ad::mul(g, v, g.constant(std::move(w))));
}

}  // namespace

TEST(Primitives, ElementwiseAndLinear) {
  Rng rng(1);
  auto x = rp("x", {3, 4, 5}, rng), y = rp("y", {3, 4, 5}, rng), w = rp("w", {5, 6}, rng), b = rp("b", {6}, rng);
  expect_ok(grad_check({&x, &y, &w, &b}, [&](Graph<double>& g) {
    Var a = ad::add(g, g.param(x), ad::scale(g, g.param(y), 0.7));
    a = ad::sub(g, ad::mul(g, a, g.param(y)), ad::add_scalar(g, g.param(x), 0.3));
    a = ad::silu(g, a);
    a = ad::sigmoid(g, ad::linear(g, a, g.param(w), g.param(b)));
    return readout(g, ad::reshape(g, a, {12, 6}), 9);
  }, {1e-5, 0}));
}

TEST(Primitives, BatchedMatmul) {
  Rng rng(2);
  auto a = rp("a", {2, 3, 4}, rng), b = rp("b", {2, 4, 5}, rng), c = rp("c", {2, 5, 4}, rng);
  expect_ok(grad_check({&a, &b, &c}, [&](Graph<double>& g) {
    Var p = ad::bmm(g, g.param(a), g.param(b));
    Var q = ad::bmm(g, g.param(a), g.param(c), true);
    return ad::add(g, readout(g, p, 1), readout(g, q, 2));
  }, {1e-5, 0}));
}

TEST(Primitives, SoftmaxAndLayerNorm) {
  Rng rng(3);
  auto x = rp("x", {4, 7}, rng), gn = rp("g", {7}, rng), bn = rp("b", {7}, rng);
  expect_ok(grad_check({&x, &gn, &bn}, [&](Graph<double>& g) {
    Var s = ad::softmax_last(g, g.param(x));
    Var n = ad::layer_norm_last(g, g.param(x), g.param(gn), g.param(bn));
    return ad::add(g, readout(g, s, 3), readout(g, n, 4));
  }, {1e-5, 0}));
}

TEST(Primitives, ConvolutionGroupNormPooling) {
  Rng rng(4);
  auto x = rp("x", {2, 4, 5, 5}, rng), w = rp("w", {8, 4, 3, 3}, rng, 0.3), b = rp("b", {8}, rng);
  auto gg = rp("gg", {8}, rng), gb = rp("gb", {8}, rng);
  expect_ok(grad_check({&x, &w, &b, &gg, &gb}, [&](Graph<double>& g) {
    Var h = ad::conv2d(g, g.param(x), g.param(w), g.param(b), 2, 1);
    h = ad::group_norm(g, h, g.param(gg), g.param(gb), 4);
    Var s = ad::sigmoid(g, ad::global_avg_pool(g, h));
    h = ad::channel_scale(g, h, s);
    return readout(g, h, 5);
  }, {1e-5, 40}));
}

TEST(Primitives, TokenOps) {
  Rng rng(5);
  auto t = rp("t", {2, 3, 4}, rng), f = rp("f", {2, 5}, rng), s = rp("s", {2, 3}, rng);
  expect_ok(grad_check({&t, &f, &s}, [&](Graph<double>& g) {
    Var bt = ad::broadcast_tokens(g, g.param(f), 3);
    Var c = ad::concat_last(g, g.param(t), bt);
    Var m = ad::mul_last(g, c, g.param(s));
    Var n = ad::add_scalar(g, ad::l2norm_last(g, m), 0.5);
    Var d = ad::div_last(g, m, n);
    Var r = ad::gather_rows(g, d, {1, 0, 1});
    return readout(g, r, 6);
  }, {1e-5, 0}));
}

TEST(Primitives, MultiHeadAttention) {
  Rng rng(6);
  auto q = rp("q", {2, 8}, rng), k = rp("k", {2, 3, 8}, rng), v = rp("v", {2, 3, 8}, rng);
  expect_ok(grad_check({&q, &k, &v}, [&](Graph<double>& g) {
    Var w = ad::softmax_last(g, ad::head_scores(g, g.param(q), g.param(k), 2));
    return readout(g, ad::head_mix(g, w, g.param(v), 2), 7);
  }, {1e-5, 0}));
}

TEST(Primitives, WeightedSumAndMean) {
  Rng rng(7);
  auto a = rp("a", {3}, rng), b = rp("b", {2, 2}, rng);
  expect_ok(grad_check({&a, &b}, [&](Graph<double>& g) {
    Var sa = ad::mean_all(g, ad::square(g, g.param(a)));
    Var sb = ad::sum_all(g, g.param(b));
    return ad::weighted_sum(g, {sa, sb}, {2.0, -0.5});
  }, {1e-5, 0}));
}

TEST(Graph, InferenceModeRecordsNothing) {
  Parameter<double> p("p", Array<double>({2}, {1.0, 2.0}));
  Graph<double> g(false);
  Var v = ad::sum_all(g, ad::square(g, g.param(p)));
  EXPECT_FALSE(g.requires_grad(v));
  EXPECT_EQ(g.value(v)[0], 5.0);
}
