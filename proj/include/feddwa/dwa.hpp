#ifndef FEDDWA_DWA_HPP
#define FEDDWA_DWA_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "feddwa/errors.hpp"
#include "feddwa/fedcore.hpp"
#include "feddwa/models.hpp"
#include "feddwa/numkit.hpp"

namespace feddwa {

// ---------------------------------------------------------------------------
// Guidance models
// ---------------------------------------------------------------------------

enum class GuidanceMode { one_step_ahead, last_iteration, current };
enum class AdaptBatch { full, minibatch };

struct GuidanceConfig {
  GuidanceMode mode = GuidanceMode::one_step_ahead;
  std::size_t adapt_steps = 1;
  AdaptBatch adapt_batch = AdaptBatch::full;

  void validate() const {
    if (mode == GuidanceMode::one_step_ahead && adapt_steps == 0) {
      throw ConfigError("method.guidance.adapt_steps", "must be at least 1");
    }
  }
};

// The model the server compares every upload against when weighting for
// `client`.
//
//   one_step_ahead  trained minus adapt_steps full-batch gradient steps at the
//                   client's learning rate (or adapt_steps minibatch epochs)
//   last_iteration  the client's upload from its previous participation,
//                   falling back to `current` the first time
//   current         the personalized model the client received this round
inline ParamVector guidance_model(const ClientState& client, const ParamVector& trained,
                                  const GuidanceConfig& cfg, const ModelSpec& spec, Rng& rng) {
  cfg.validate();
  switch (cfg.mode) {
    case GuidanceMode::one_step_ahead: {
      if (cfg.adapt_batch == AdaptBatch::minibatch) {
        return sgd(trained, client.train, spec, client.lr, client.batch_size, cfg.adapt_steps, rng);
      }
      ParamVector w = trained;
      for (std::size_t s = 0; s < cfg.adapt_steps; ++s) {
        w = axpy(-client.lr, grad(w, client.train, spec), w);
      }
      return w;
    }
    case GuidanceMode::last_iteration:
      if (client.last_trained) return *client.last_trained;
      notice(detail::concat("client ", client.id,
                            ": no previous upload for last-iteration guidance, using current model"));
      return client.model;
    case GuidanceMode::current:
      return client.model;
  }
  throw StructuralError("unknown guidance mode");
}

// ---------------------------------------------------------------------------
// Aggregation weights
// ---------------------------------------------------------------------------

// Distances below this fraction of the row's mean are clamped before inversion.
inline constexpr double kDistanceClamp = 1e-12;

// Minimizer of sum_j p_j^2 d_j over the simplex: p_j proportional to 1/d_j.
// If some distances are exactly zero the weight is split evenly across them.
inline std::vector<double> weights_from_sq_dists(std::span<const double> d) {
  if (d.empty()) throw StructuralError("weights_from_sq_dists: empty row");
  for (double v : d) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw StructuralError("weights_from_sq_dists: distances must be finite and non-negative");
    }
  }
  const std::size_t n = d.size();
  std::vector<double> p(n, 0.0);

  const auto zeros = std::size_t(std::count(d.begin(), d.end(), 0.0));
  if (zeros > 0) {
    for (std::size_t j = 0; j < n; ++j) p[j] = d[j] == 0.0 ? 1.0 / double(zeros) : 0.0;
    return p;
  }

  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / double(n);
  const double floor = kDistanceClamp * mean;
  std::vector<double> clamped(d.begin(), d.end());
  for (double& v : clamped) v = std::max(v, floor);
  const double dmin = *std::min_element(clamped.begin(), clamped.end());
  // Inverting relative to the smallest distance keeps every term in (0, 1].
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    p[j] = dmin / clamped[j];
    total += p[j];
  }
  for (double& v : p) v /= total;
  return p;
}

// One row of the weight matrix: squared distances from `guidance` to each
// uploaded model, turned into weights.
inline std::vector<double> compute_weights(const ParamVector& guidance,
                                           std::span<const ParamVector> models) {
  if (models.empty()) throw StructuralError("compute_weights: no models");
  std::vector<double> d(models.size());
  for (std::size_t j = 0; j < models.size(); ++j) d[j] = sq_dist(guidance, models[j]);
  return weights_from_sq_dists(d);
}

// Keeps the K largest entries (lower index wins ties) and renormalizes.
inline std::vector<double> top_k(std::span<const double> row, std::size_t k) {
  const std::size_t n = row.size();
  if (k == 0 || k > n) {
    throw StructuralError(detail::concat("top_k: K=", k, " outside [1, ", n, "]"));
  }
  if (k == n) return {row.begin(), row.end()};
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
  double kept = 0.0;
  for (std::size_t r = 0; r < k; ++r) kept += row[order[r]];
  if (!(kept > 0.0)) throw StructuralError("top_k: selected weights sum to zero");
  std::vector<double> out(n, 0.0);
  for (std::size_t r = 0; r < k; ++r) out[order[r]] = row[order[r]] / kept;
  return out;
}

// w_i = sum_j p_ij * models[j] for every row i.
inline std::vector<ParamVector> aggregate_personalized(const WeightMatrix& weights,
                                                       std::span<const ParamVector> models) {
  if (models.size() != weights.size()) {
    throw StructuralError(detail::concat("aggregate_personalized: ", weights.size(),
                                         "x", weights.size(), " weights for ", models.size(),
                                         " models"));
  }
  std::vector<ParamVector> out;
  out.reserve(models.size());
  for (std::size_t i = 0; i < weights.size(); ++i) out.push_back(weighted_sum(weights.row(i), models));
  return out;
}

// ---------------------------------------------------------------------------
// Full cross-distance problem (diagnostic only)
// ---------------------------------------------------------------------------

// [W]_{jk} = <g - m_j, g - m_k>
inline Eigen::MatrixXd cross_distance_matrix(const ParamVector& guidance,
                                             std::span<const ParamVector> models) {
  const auto n = Eigen::Index(models.size());
  std::vector<ParamVector> diffs;
  diffs.reserve(models.size());
  for (const auto& m : models) diffs.push_back(subtract(guidance, m));
  Eigen::MatrixXd w(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index k = j; k < n; ++k) {
      w(j, k) = dot(diffs[std::size_t(j)], diffs[std::size_t(k)]);
      w(k, j) = w(j, k);
    }
  }
  return w;
}

struct OracleSolution {
  std::vector<double> weights;
  double objective = 0.0;
  bool unique = true;
  bool closed_form = false;  // W^{-1}1 / 1'W^{-1}1 was feasible and used
};

namespace detail {

// Euclidean projection onto the probability simplex (sort-based).
inline Eigen::VectorXd project_simplex(const Eigen::VectorXd& v) {
  std::vector<double> u(v.data(), v.data() + v.size());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cum = 0.0, theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cum += u[j];
    const double t = (cum - 1.0) / double(j + 1);
    if (u[j] - t > 0.0) theta = t;
  }
  return (v.array() - theta).max(0.0).matrix();
}

}  // namespace detail

// Minimizes p'Wp over the simplex by projected gradient descent from the
// uniform point. When W is invertible and W^{-1}1/(1'W^{-1}1) is feasible, that
// closed form is returned instead. `unique` is false when another feasible
// point at least 1e-6 away attains the same objective within 1e-10.
inline OracleSolution oracle_solve_full(const Eigen::MatrixXd& w, double tol = 1e-9) {
  const Eigen::Index n = w.rows();
  if (n == 0 || w.cols() != n) throw StructuralError("oracle_solve_full: W must be square and nonempty");
  const double scale = std::max(1.0, w.cwiseAbs().maxCoeff());
  if ((w - w.transpose()).cwiseAbs().maxCoeff() > tol * scale) {
    throw StructuralError("oracle_solve_full: W is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(w);
  const auto& lambda = eig.eigenvalues();
  const double lmax = lambda.maxCoeff();
  if (lambda.minCoeff() < -tol * scale) {
    throw StructuralError(detail::concat("oracle_solve_full: W is indefinite (eigenvalue ",
                                         lambda.minCoeff(), ")"));
  }
  auto objective = [&](const Eigen::VectorXd& p) { return p.dot(w * p); };

  Eigen::VectorXd p = Eigen::VectorXd::Constant(n, 1.0 / double(n));
  if (lmax > 0.0) {
    const double step = 1.0 / (2.0 * lmax);
    for (int it = 0; it < 200000; ++it) {
      Eigen::VectorXd next = detail::project_simplex(p - step * 2.0 * (w * p));
      const double change = (next - p).cwiseAbs().maxCoeff();
      p = std::move(next);
      if (change < 1e-15) break;
    }
  }

  OracleSolution sol;
  if (lambda.minCoeff() > 1e-12 * std::max(lmax, 1e-300)) {
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(n);
    const Eigen::VectorXd x = w.ldlt().solve(ones);
    Eigen::VectorXd q = x / ones.dot(x);
    if (q.minCoeff() >= -1e-12) {
      q = q.cwiseMax(0.0);
      q /= q.sum();
      if (objective(q) <= objective(p) + 1e-12) {
        p = q;
        sol.closed_form = true;
      }
    }
  }
  sol.objective = objective(p);
  sol.weights.assign(p.data(), p.data() + n);

  // Minimizers differ from p only along null(W) directions that keep 1'p = 1.
  const double null_tol = 1e-10 * std::max(1.0, lmax);
  std::vector<Eigen::Index> null_idx;
  for (Eigen::Index k = 0; k < n; ++k) {
    if (lambda(k) <= null_tol) null_idx.push_back(k);
  }
  if (!null_idx.empty()) {
    Eigen::MatrixXd z(n, Eigen::Index(null_idx.size()));
    for (std::size_t c = 0; c < null_idx.size(); ++c) z.col(Eigen::Index(c)) = eig.eigenvectors().col(null_idx[c]);
    const Eigen::RowVectorXd a = Eigen::VectorXd::Ones(n).transpose() * z;
    Eigen::MatrixXd kernel;
    if (a.norm() < 1e-12) {
      kernel = Eigen::MatrixXd::Identity(z.cols(), z.cols());
    } else {
      Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
      kernel = lu.kernel();
    }
    const Eigen::MatrixXd dirs = z * kernel;
    for (Eigen::Index c = 0; c < dirs.cols() && sol.unique; ++c) {
      if (dirs.col(c).norm() < 1e-12) continue;
      const Eigen::VectorXd dir = dirs.col(c).normalized();
      for (double sign : {1.0, -1.0}) {
        const Eigen::VectorXd v = sign * dir;
        double t_max = std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < n; ++j) {
          if (v(j) < 0.0) t_max = std::min(t_max, p(j) / -v(j));
        }
        const double t = std::min(t_max, 1.0);
        if (!(t > 1e-6)) continue;
        const Eigen::VectorXd q = p + t * v;
        if (q.minCoeff() >= -1e-12 && std::abs(objective(q) - sol.objective) <= 1e-10 &&
            (q - p).norm() > 1e-6) {
          sol.unique = false;
          break;
        }
      }
    }
  }
  return sol;
}

// ---------------------------------------------------------------------------
// Distance decomposition
// ---------------------------------------------------------------------------

struct DistanceTerms {
  double model_gap = 0.0;    // ||w_i - w_j||^2
  double gradient_alignment = 0.0;  // 2 eta (w_j - w_i)' g_i
  double step_norm = 0.0;    // eta^2 ||g_i||^2

  double total() const { return model_gap + gradient_alignment + step_norm; }
};

// Splits ||trained - eta*grad - model_j||^2 into its three exact terms.
inline DistanceTerms decompose_distance(const ParamVector& trained, double eta,
                                        const ParamVector& grad_i, const ParamVector& model_j) {
  detail::require_same_layout(trained, grad_i, "decompose_distance");
  detail::require_same_layout(trained, model_j, "decompose_distance");
  DistanceTerms t;
  t.model_gap = sq_dist(trained, model_j);
  t.gradient_alignment = 2.0 * eta * dot(subtract(model_j, trained), grad_i);
  t.step_norm = eta * eta * sq_norm(grad_i);
  return t;
}

// ---------------------------------------------------------------------------
// The method
// ---------------------------------------------------------------------------

struct DwaConfig {
  std::size_t top_k = 5;
  GuidanceConfig guidance;
  // Round 1: every participant starts from the shared w^0, so the server
  // aggregates uniformly (FedAvg's first round) instead of weighting.
  bool uniform_first_round = true;
};

// Participants train locally and upload their model plus a guidance model;
// the server weights uploads per client and returns one personalized model
// to each. Weights are computed among the round's participants only.
class FedDwa : public Method {
 public:
  explicit FedDwa(DwaConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.top_k == 0) throw ConfigError("method.k", "must be at least 1");
    cfg_.guidance.validate();
  }

  std::string name() const override { return "feddwa"; }
  std::size_t uplink_models() const override { return 2; }
  std::size_t downlink_models() const override { return 1; }
  const DwaConfig& config() const noexcept { return cfg_; }

  RoundOutput run_round(Federation& fed, std::size_t round,
                        std::span<const std::size_t> participants) override {
    const std::size_t m = participants.size();
    std::vector<ParamVector> trained, guidance;
    trained.reserve(m);
    guidance.reserve(m);
    for (std::size_t i : participants) {
      const auto& client = fed.clients[i];
      Rng batches = fed.stream("batch", round, i);
      trained.push_back(local_train(client, client.model, fed.spec, batches));
      Rng adapt = fed.stream("guidance", round, i);
      guidance.push_back(guidance_model(client, trained.back(), cfg_.guidance, fed.spec, adapt));
    }

    WeightMatrix weights(round, {participants.begin(), participants.end()});
    const std::size_t k = std::min(cfg_.top_k, m);
    for (std::size_t a = 0; a < m; ++a) {
      if (round == 1 && cfg_.uniform_first_round) {
        const std::vector<double> uniform(m, 1.0 / double(m));
        weights.set_row(a, uniform);
      } else {
        weights.set_row(a, top_k(compute_weights(guidance[a], trained), k));
      }
    }

    auto personalized = aggregate_personalized(weights, trained);
    for (std::size_t a = 0; a < m; ++a) {
      auto& client = fed.clients[participants[a]];
      client.last_trained = std::move(trained[a]);
      client.model = std::move(personalized[a]);
    }
    // m rows of m squared distances over d coordinates.
    const double d = double(fed.spec.num_params());
    return {std::move(weights), double(m) * double(m) * d};
  }

  double evaluate(const Federation& fed, std::size_t client, std::size_t) const override {
    const auto& c = fed.clients[client];
    return accuracy(c.model, c.test, fed.spec);
  }

 private:
  DwaConfig cfg_;
};

}  // namespace feddwa

#endif  // FEDDWA_DWA_HPP
