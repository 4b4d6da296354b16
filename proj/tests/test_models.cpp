#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "feddwa/models.hpp"

using namespace feddwa;

namespace {

Dataset make_random_data(std::size_t n, std::size_t f, std::size_t c, Rng& rng) {
  std::vector<double> x(n * f);
  std::vector<int> y(n);
  for (double& v : x) v = rng.normal();
  for (int& v : y) v = int(rng.below(c));
  return Dataset(f, c, std::move(x), std::move(y));
}

// Direct per-sample loss with explicit indexing, no shared code with the model.
double reference_loss(const ParamVector& p, const Dataset& d, const ModelSpec& s) {
  const std::size_t f = s.input_dim, c = s.num_classes, h = s.hidden_dim;
  double total = 0.0;
  for (std::size_t r = 0; r < d.size(); ++r) {
    auto x = d.row(r);
    std::vector<double> z(c, 0.0);
    if (s.kind == ModelKind::softmax) {
      for (std::size_t k = 0; k < c; ++k) {
        z[k] = p[c * f + k];
        for (std::size_t j = 0; j < f; ++j) z[k] += p[k * f + j] * x[j];
      }
    } else {
      std::vector<double> a(h);
      for (std::size_t u = 0; u < h; ++u) {
        double v = p[h * f + u];
        for (std::size_t j = 0; j < f; ++j) v += p[u * f + j] * x[j];
        a[u] = std::tanh(v);
      }
      const std::size_t w2 = h * f + h, b2 = w2 + c * h;
      for (std::size_t k = 0; k < c; ++k) {
        z[k] = p[b2 + k];
        for (std::size_t u = 0; u < h; ++u) z[k] += p[w2 + k * h + u] * a[u];
      }
    }
    long double se = 0.0L;
    for (double v : z) se += std::exp((long double)v);
    total += double(std::log(se)) - z[std::size_t(d.label(r))];
  }
  return total / double(d.size());
}

ModelSpec softmax_spec(std::size_t f, std::size_t c) { return {ModelKind::softmax, f, c, 0, 0.5}; }
ModelSpec mlp_spec(std::size_t f, std::size_t c, std::size_t h) { return {ModelKind::mlp, f, c, h, 0.5}; }

}  // namespace

TEST(ModelSpecTest, LayoutSizes) {
  EXPECT_EQ(softmax_spec(784, 10).num_params(), 7850u);
  EXPECT_EQ(mlp_spec(20, 10, 32).num_params(), 20u * 32 + 32 + 32 * 10 + 10);
  EXPECT_THROW(mlp_spec(3, 2, 0).validate(), StructuralError);
  EXPECT_THROW((ModelSpec{ModelKind::softmax, 0, 2}).validate(), StructuralError);
}

TEST(ModelsTest, LossMatchesReference) {
  Rng rng(1);
  for (auto spec : {softmax_spec(5, 4), mlp_spec(5, 4, 6)}) {
    auto data = make_random_data(30, 5, 4, rng);
    auto p = init_params(spec, rng);
    EXPECT_NEAR(loss(p, data, spec), reference_loss(p, data, spec), 1e-12);
    EXPECT_NEAR(loss_and_grad(p, data, spec).loss, reference_loss(p, data, spec), 1e-12);
  }
}

TEST(ModelsTest, ZeroParamsGiveLogC) {
  Rng rng(2);
  auto spec = softmax_spec(3, 10);
  auto data = make_random_data(8, 3, 10, rng);
  ParamVector p(spec.layout());
  EXPECT_NEAR(loss(p, data, spec), std::log(10.0), 1e-12);
}

TEST(ModelsTest, SoftmaxOneSampleGradientClosedForm) {
  // dL/dW = (softmax(z) - e_y) x', dL/db = softmax(z) - e_y.
  auto spec = softmax_spec(2, 3);
  Dataset d(2, 3, {1.0, -2.0}, {1});
  auto p = ParamVector(spec.layout(), {0.1, 0.2, -0.3, 0.4, 0.0, 0.5, 0.1, -0.1, 0.2});
  const double z0 = 0.1 * 1 + 0.2 * -2 + 0.1;
  const double z1 = -0.3 * 1 + 0.4 * -2 - 0.1;
  const double z2 = 0.0 * 1 + 0.5 * -2 + 0.2;
  const double se = std::exp(z0) + std::exp(z1) + std::exp(z2);
  const double q[3] = {std::exp(z0) / se, std::exp(z1) / se - 1.0, std::exp(z2) / se};
  auto g = grad(p, d, spec);
  for (int k = 0; k < 3; ++k) {
    EXPECT_NEAR(g[k * 2 + 0], q[k] * 1.0, 1e-15);
    EXPECT_NEAR(g[k * 2 + 1], q[k] * -2.0, 1e-15);
    EXPECT_NEAR(g[6 + k], q[k], 1e-15);
  }
}

TEST(ModelsTest, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (auto spec : {softmax_spec(4, 3), mlp_spec(4, 3, 5)}) {
    auto data = make_random_data(12, 4, 3, rng);
    auto p = init_params(spec, rng);
    auto g = grad(p, data, spec);
    for (int dir = 0; dir < 10; ++dir) {
      ParamVector v(p.layout_ptr());
      for (double& e : v.values()) e = rng.normal();
      const double h = 1e-5;
      const double fd = (loss(axpy(h, v, p), data, spec) - loss(axpy(-h, v, p), data, spec)) / (2 * h);
      const double an = dot(g, v);
      EXPECT_NEAR(fd, an, 1e-4 * std::max(1.0, std::abs(an)));
    }
  }
}

TEST(ModelsTest, BatchRowsSelectSubset) {
  Rng rng(4);
  auto spec = mlp_spec(3, 2, 4);
  auto data = make_random_data(10, 3, 2, rng);
  auto p = init_params(spec, rng);
  std::vector<std::size_t> rows{2, 5, 7};
  auto sub = data.subset(rows);
  EXPECT_NEAR(loss(p, data, spec, rows), loss(p, sub, spec), 1e-15);
  auto g1 = grad(p, data, spec, rows);
  auto g2 = grad(p, sub, spec);
  for (std::size_t k = 0; k < g1.size(); ++k) EXPECT_NEAR(g1[k], g2[k], 1e-15);
}

TEST(ModelsTest, LargeLogitsStayFinite) {
  auto spec = softmax_spec(1, 2);
  Dataset d(1, 2, {1.0}, {0});
  auto p = ParamVector(spec.layout(), {1000.0, -1000.0, 0.0, 0.0});
  EXPECT_NEAR(loss(p, d, spec), 0.0, 1e-12);
  auto q = ParamVector(spec.layout(), {-1000.0, 1000.0, 0.0, 0.0});
  EXPECT_NEAR(loss(q, d, spec), 2000.0, 1e-9);
  EXPECT_TRUE(grad(q, d, spec).all_finite());
}

TEST(ModelsTest, PredictTiesGoToLowestClass) {
  auto spec = softmax_spec(1, 3);
  ParamVector p(spec.layout());
  const double x[1] = {1.0};
  EXPECT_EQ(predict(p, x, spec), 0);
  p[2] = 1.0;  // class 2 weight
  p[1] = 1.0;  // class 1 weight, tied with class 2
  EXPECT_EQ(predict(p, x, spec), 1);
}

TEST(ModelsTest, AccuracyAndErrors) {
  auto spec = softmax_spec(1, 2);
  auto p = ParamVector(spec.layout(), {1.0, -1.0, 0.0, 0.0});
  Dataset d(1, 2, {1.0, -1.0, 2.0, 3.0}, {0, 1, 0, 1});
  EXPECT_DOUBLE_EQ(accuracy(p, d, spec), 0.75);
  EXPECT_THROW(accuracy(p, Dataset(), spec), StructuralError);
  EXPECT_THROW(Dataset(1, 2, {1.0}, {2}), StructuralError);
  EXPECT_THROW(Dataset(2, 2, {1.0}, {0}), StructuralError);
  Dataset wrong(3, 2, {1, 2, 3}, {0});
  EXPECT_THROW(loss(p, wrong, spec), StructuralError);
}

TEST(ModelsTest, InitWithinScaleAndDeterministic) {
  auto spec = mlp_spec(6, 3, 4);
  spec.init_scale = 0.05;
  Rng a(10), b(10);
  auto p = init_params(spec, a);
  EXPECT_TRUE(p == init_params(spec, b));
  for (double v : p.values()) EXPECT_LE(std::abs(v), 0.05);
}
