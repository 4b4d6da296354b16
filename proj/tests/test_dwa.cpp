#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "feddwa/baselines.hpp"
#include "feddwa/datagen.hpp"
#include "feddwa/dwa.hpp"
#include "feddwa/experiment.hpp"

using namespace feddwa;

namespace {

double objective(const std::vector<double>& p, const std::vector<double>& d) {
  double s = 0;
  for (std::size_t j = 0; j < p.size(); ++j) s += p[j] * p[j] * d[j];
  return s;
}

std::vector<ParamVector> random_models(std::size_t n, std::size_t dim, Rng& rng) {
  std::vector<ParamVector> out;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> v(dim);
    for (double& e : v) e = rng.normal();
    out.push_back(ParamVector::flat(v));
  }
  return out;
}

void expect_row(const std::vector<double>& got, const std::vector<double>& want, double tol = 1e-15) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t j = 0; j < got.size(); ++j) EXPECT_NEAR(got[j], want[j], tol) << "entry " << j;
}

}  // namespace

TEST(Weights, Examples) {
  expect_row(weights_from_sq_dists(std::vector<double>{3, 3, 3, 3}), {0.25, 0.25, 0.25, 0.25});
  expect_row(weights_from_sq_dists(std::vector<double>{1, 4}), {0.8, 0.2});
  expect_row(weights_from_sq_dists(std::vector<double>{1, 2, 4}), {4.0 / 7, 2.0 / 7, 1.0 / 7});
}

TEST(Weights, ZeroDistancesSplitEvenly) {
  expect_row(weights_from_sq_dists(std::vector<double>{0, 0, 0}), {1.0 / 3, 1.0 / 3, 1.0 / 3});
  expect_row(weights_from_sq_dists(std::vector<double>{0, 5, 0, 1}), {0.5, 0, 0.5, 0});
  EXPECT_THROW(weights_from_sq_dists(std::vector<double>{1, -1}), StructuralError);
  EXPECT_THROW(weights_from_sq_dists(std::vector<double>{}), StructuralError);
}

TEST(Weights, TinyDistanceIsClampedToFiniteWeights) {
  auto p = weights_from_sq_dists(std::vector<double>{1e-300, 1.0, 1.0});
  for (double v : p) EXPECT_TRUE(std::isfinite(v));
  EXPECT_GT(p[0], 0.999999);
  EXPECT_NEAR(p[0] + p[1] + p[2], 1.0, 1e-12);
}

TEST(Weights, ScaleInvariantAndMonotone) {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.below(8);
    std::vector<double> d(n), dc(n);
    for (std::size_t j = 0; j < n; ++j) d[j] = rng.uniform(0.01, 10.0);
    const double c = rng.uniform(0.001, 1000.0);
    for (std::size_t j = 0; j < n; ++j) dc[j] = c * d[j];
    auto p = weights_from_sq_dists(d);
    auto q = weights_from_sq_dists(dc);
    expect_row(p, q, 1e-14);
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = 0; b < n; ++b) {
        if (d[a] < d[b]) {
          EXPECT_GT(p[a], p[b]);
        }
      }
    }
  }
}

TEST(Weights, BeatsRandomSimplexPointsAndSatisfiesKkt) {
  Rng rng(2);
  auto models = random_models(6, 10, rng);
  auto guidance = random_models(1, 10, rng).front();
  std::vector<double> d;
  for (const auto& m : models) d.push_back(sq_dist(guidance, m));
  auto p = compute_weights(guidance, models);
  const double best = objective(p, d);
  for (int s = 0; s < 100000; ++s) {
    auto q = rng.dirichlet(1.0, 6);
    ASSERT_LE(best, objective(q, d) + 1e-9);
  }
  const double lambda = p[0] * d[0];
  for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(p[j] * d[j], lambda, 1e-9 * std::max(1.0, lambda));
}

TEST(TopK, Examples) {
  expect_row(top_k(std::vector<double>{0.5, 0.3, 0.2}, 3), {0.5, 0.3, 0.2}, 0.0);
  expect_row(top_k(std::vector<double>{0.5, 0.3, 0.2}, 2), {0.625, 0.375, 0.0});
  expect_row(top_k(std::vector<double>{0.4, 0.4, 0.2}, 1), {1.0, 0.0, 0.0}, 0.0);
  expect_row(top_k(std::vector<double>{0.2, 0.4, 0.4}, 1), {0.0, 1.0, 0.0}, 0.0);
  EXPECT_THROW(top_k(std::vector<double>{1.0}, 2), StructuralError);
  EXPECT_THROW(top_k(std::vector<double>{1.0}, 0), StructuralError);
}

TEST(TopK, RowsStayOnSimplex) {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 2 + rng.below(10);
    auto row = rng.dirichlet(0.5, n);
    const std::size_t k = 1 + rng.below(n);
    auto out = top_k(row, k);
    double s = 0;
    std::size_t nz = 0;
    for (double v : out) {
      EXPECT_GE(v, 0.0);
      s += v;
      nz += v > 0.0;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
    EXPECT_LE(nz, k);
  }
}

TEST(Aggregate, IdentityUniformAndSymmetry) {
  Rng rng(4);
  auto models = random_models(4, 7, rng);
  auto id = WeightMatrix::identity(1, {0, 1, 2, 3});
  auto out = aggregate_personalized(id, models);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_TRUE(out[i] == models[i]);

  WeightMatrix uni(1, {0, 1, 2, 3});
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) uni.at(i, j) = 0.25;
  }
  auto avg = fedavg_round(models);
  for (const auto& m : aggregate_personalized(uni, models)) {
    for (std::size_t k = 0; k < m.size(); ++k) EXPECT_NEAR(m[k], avg[k], 1e-15);
  }

  models[2] = models[1];
  WeightMatrix w(1, {0, 1, 2, 3});
  const std::vector<double> r0{0.1, 0.2, 0.3, 0.4}, r1{0.4, 0.3, 0.2, 0.1};
  w.set_row(0, r0);
  w.set_row(1, r1);
  w.set_row(2, r0);
  w.set_row(3, r1);
  auto before = aggregate_personalized(w, models);
  std::swap(models[1], models[2]);
  auto after = aggregate_personalized(w, models);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_TRUE(before[i] == after[i]);
}

TEST(CrossDistance, DiagonalMatchesSqDist) {
  Rng rng(5);
  auto models = random_models(5, 6, rng);
  auto g = random_models(1, 6, rng).front();
  auto w = cross_distance_matrix(g, models);
  for (Eigen::Index j = 0; j < 5; ++j) {
    EXPECT_NEAR(w(j, j), sq_dist(g, models[std::size_t(j)]), 1e-12);
    for (Eigen::Index k = 0; k < 5; ++k) EXPECT_EQ(w(j, k), w(k, j));
  }
  std::vector<ParamVector> same(3, g);
  EXPECT_EQ(cross_distance_matrix(g, same).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Oracle, IdentityIsUniformAndUnique) {
  auto sol = oracle_solve_full(Eigen::MatrixXd::Identity(3, 3));
  expect_row(sol.weights, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-12);
  EXPECT_TRUE(sol.unique);
}

TEST(Oracle, DegenerateDiagonalIsNotUnique) {
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(3, 3);
  w(2, 2) = 1.0;
  auto sol = oracle_solve_full(w);
  EXPECT_FALSE(sol.unique);
  EXPECT_NEAR(sol.objective, 0.0, 1e-12);
  EXPECT_NEAR(sol.weights[2], 0.0, 1e-9);
}

TEST(Oracle, DiagonalAgreesWithClosedForm) {
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 2 + rng.below(7);
    std::vector<double> d(n);
    for (double& v : d) v = rng.uniform(0.1, 5.0);
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(Eigen::Index(n), Eigen::Index(n));
    for (std::size_t j = 0; j < n; ++j) w(Eigen::Index(j), Eigen::Index(j)) = d[j];
    auto sol = oracle_solve_full(w);
    EXPECT_TRUE(sol.unique);
    expect_row(sol.weights, weights_from_sq_dists(d), 1e-8);
  }
}

TEST(Oracle, FullMatrixIsSimplexOptimal) {
  Rng rng(7);
  auto models = random_models(4, 3, rng);
  auto g = random_models(1, 3, rng).front();
  auto w = cross_distance_matrix(g, models);
  auto sol = oracle_solve_full(w);
  Eigen::Map<const Eigen::VectorXd> p(sol.weights.data(), 4);
  EXPECT_NEAR(p.sum(), 1.0, 1e-12);
  for (int s = 0; s < 20000; ++s) {
    auto q = rng.dirichlet(1.0, 4);
    Eigen::Map<const Eigen::VectorXd> qv(q.data(), 4);
    ASSERT_LE(sol.objective, qv.dot(w * qv) + 1e-9);
  }
}

TEST(Oracle, RejectsIndefiniteOrAsymmetric) {
  Eigen::MatrixXd w(2, 2);
  w << 1, 0, 0, -1;
  EXPECT_THROW(oracle_solve_full(w), StructuralError);
  w << 1, 0.5, 0, 1;
  EXPECT_THROW(oracle_solve_full(w), StructuralError);
}

TEST(Decomposition, ExamplesAndIdentity) {
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    auto v = random_models(3, 9, rng);
    const double eta = rng.uniform(0.0, 2.0);
    auto terms = decompose_distance(v[0], eta, v[1], v[2]);
    const double direct = sq_dist(axpy(-eta, v[1], v[0]), v[2]);
    EXPECT_NEAR(terms.total(), direct, 1e-10 * direct);
  }
  auto v = random_models(3, 4, rng);
  auto t0 = decompose_distance(v[0], 0.0, v[1], v[2]);
  EXPECT_EQ(t0.model_gap, sq_dist(v[0], v[2]));
  EXPECT_EQ(t0.gradient_alignment, 0.0);
  EXPECT_EQ(t0.step_norm, 0.0);
  auto t1 = decompose_distance(v[0], 0.5, v[1], v[0]);
  EXPECT_EQ(t1.model_gap, 0.0);
  EXPECT_EQ(t1.gradient_alignment, 0.0);
  EXPECT_DOUBLE_EQ(t1.step_norm, 0.25 * sq_norm(v[1]));
}

class GuidanceTest : public ::testing::Test {
 protected:
  void SetUp() override {
    ClusterTaskSpec task;
    task.num_groups = 1;
    task.clients_per_group = 2;
    Rng rng(9);
    data_ = synth_clusters(task, rng);
    spec_ = {ModelKind::softmax, data_.num_features, data_.num_classes, 0, 0.3};
    trained_ = init_params(spec_, rng);
    client_ = ClientState{0, data_.shards[0].train, data_.shards[0].test, init_params(spec_, rng),
                          0.2, 10, 1, std::nullopt};
  }
  FederatedData data_;
  ModelSpec spec_;
  ParamVector trained_;
  ClientState client_;
};

TEST_F(GuidanceTest, OneStepIsFullBatchGradientStep) {
  GuidanceConfig cfg;
  Rng rng(1);
  auto g = guidance_model(client_, trained_, cfg, spec_, rng);
  auto expected = axpy(-0.2, grad(trained_, client_.train, spec_), trained_);
  EXPECT_TRUE(g == expected);

  cfg.adapt_steps = 2;
  auto g2 = guidance_model(client_, trained_, cfg, spec_, rng);
  auto e2 = axpy(-0.2, grad(expected, client_.train, spec_), expected);
  EXPECT_TRUE(g2 == e2);

  client_.lr = 0.0;
  EXPECT_TRUE(guidance_model(client_, trained_, cfg, spec_, rng) == trained_);
}

TEST_F(GuidanceTest, LastIterationFallsBackToCurrent) {
  set_quiet(true);
  GuidanceConfig cfg;
  cfg.mode = GuidanceMode::last_iteration;
  Rng rng(1);
  EXPECT_TRUE(guidance_model(client_, trained_, cfg, spec_, rng) == client_.model);
  client_.last_trained = trained_;
  EXPECT_TRUE(guidance_model(client_, init_params(spec_, rng), cfg, spec_, rng) == trained_);
  cfg.mode = GuidanceMode::current;
  EXPECT_TRUE(guidance_model(client_, trained_, cfg, spec_, rng) == client_.model);
}

TEST_F(GuidanceTest, OneStepSelfWeightBelowOne) {
  GuidanceConfig cfg;
  Rng rng(1);
  auto g = guidance_model(client_, trained_, cfg, spec_, rng);
  std::vector<ParamVector> models{trained_, client_.model};
  auto p = compute_weights(g, models);
  EXPECT_LT(p[0], 1.0);
  EXPECT_GT(p[0], 0.0);
}

TEST(FedDwaMethod, RoundRowsAreStochasticAndSparse) {
  ClusterTaskSpec task;
  task.num_groups = 2;
  task.clients_per_group = 4;
  Rng rng(10);
  auto data = synth_clusters(task, rng);
  ModelSpec spec{ModelKind::softmax, data.num_features, data.num_classes, 0, 0.05};
  TrainingConfig cfg;
  cfg.rounds = 3;
  cfg.lr = 0.1;
  cfg.batch_size = 10;
  cfg.fraction = 0.75;
  auto fed = make_federation(data, spec, cfg);
  DwaConfig dwa;
  dwa.top_k = 3;
  FedDwa method(dwa);
  auto result = run(fed, method);
  for (const auto& rep : result.reports) {
    ASSERT_TRUE(rep.weights.has_value());
    const auto& w = *rep.weights;
    EXPECT_EQ(w.ids(), rep.participants);
    EXPECT_TRUE(w.row_stochastic(1e-9));
    const double m = double(w.size());
    EXPECT_EQ(rep.server_madds, m * m * double(spec.num_params()));
    if (rep.round > 1) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        std::size_t nz = 0;
        for (double v : w.row(i)) nz += v > 0.0;
        EXPECT_LE(nz, 3u);
      }
    }
  }
  DwaConfig zero_k;
  zero_k.top_k = 0;
  EXPECT_THROW(FedDwa{zero_k}, ConfigError);
}

namespace {

ExperimentResult iid_run(const char* method, std::uint64_t seed) {
  set_quiet(true);
  json j = json::parse(R"({"clients": 20, "method": {"k": 20},
    "partition": {"setting": "dirichlet", "alpha": 1e6}})");
  j["method"]["name"] = method;
  j["seed"] = seed;
  return run_experiment(config_from_json(j), false);
}

}  // namespace

TEST(IidClients, AccuracyCloseToFedAvg) {
  double gap = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    gap += iid_run("fedavg", seed).run.final_mean_accuracy - iid_run("feddwa", seed).run.final_mean_accuracy;
  }
  EXPECT_LE(std::abs(gap) / 3.0, 0.02);
}

TEST(IidClients, ConvergedRowsNearUniform) {
  const auto res = iid_run("feddwa", 1);
  const auto& w = *res.run.reports.back().weights;
  const double u = 1.0 / double(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    double tv = 0.0;
    for (double v : w.row(i)) tv += std::abs(v - u);
    EXPECT_LE(tv / 2.0, 0.1) << "client " << w.ids()[i];
  }
}
