#ifndef FEDDWA_FEDCORE_HPP
#define FEDDWA_FEDCORE_HPP

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "feddwa/datagen.hpp"
#include "feddwa/errors.hpp"
#include "feddwa/models.hpp"
#include "feddwa/numkit.hpp"

namespace feddwa {

struct TrainingConfig {
  std::size_t rounds = 100;
  double fraction = 1.0;  // participation per round
  double lr = 0.01;
  std::size_t batch_size = 20;
  std::size_t local_epochs = 1;
  bool size_weighted = false;  // FedAvg weights proportional to |D_i| instead of uniform
  std::uint64_t seed = 1;

  void validate() const {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("train.fraction", "must lie in (0, 1]");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr", "must be finite and >= 0");
    if (batch_size == 0) throw ConfigError("train.batch_size", "must be positive");
    if (local_epochs == 0) throw ConfigError("train.local_epochs", "must be positive");
  }
};

struct ClientState {
  std::size_t id = 0;
  Dataset train;
  Dataset test;
  ParamVector model;  // personalized model held for this client (w_i^t)
  double lr = 0.01;
  std::size_t batch_size = 20;
  std::size_t local_epochs = 1;
  std::optional<ParamVector> last_trained;  // upload from the previous participation
};

// ---------------------------------------------------------------------------
// Local training
// ---------------------------------------------------------------------------

// Mini-batch SGD: `epochs` passes over a fresh shuffle of `data`; the final
// partial batch is kept. With mu > 0 the objective gains (mu/2)||w - anchor||^2.
inline ParamVector sgd(const ParamVector& start, const Dataset& data, const ModelSpec& spec,
                       double lr, std::size_t batch_size, std::size_t epochs, Rng& rng,
                       double mu = 0.0, const ParamVector* anchor = nullptr) {
  if (data.empty()) throw StructuralError("sgd: client has no training data");
  if (batch_size == 0) throw StructuralError("sgd: batch size must be positive");
  ParamVector w = start;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    for (std::size_t begin = 0, b = 0; begin < order.size(); begin += batch_size, ++b) {
      const std::size_t end = std::min(order.size(), begin + batch_size);
      std::span<const std::size_t> rows(order.data() + begin, end - begin);
      auto lg = loss_and_grad(w, data, spec, rows);
      if (!std::isfinite(lg.loss)) {
        throw RuntimeFailure(detail::concat("non-finite loss at epoch ", e + 1, ", batch ", b + 1));
      }
      auto wv = w.values();
      auto gv = lg.grad.values();
      if (mu != 0.0 && anchor != nullptr) {
        auto av = anchor->values();
        for (std::size_t k = 0; k < wv.size(); ++k) wv[k] -= lr * (gv[k] + mu * (wv[k] - av[k]));
      } else {
        for (std::size_t k = 0; k < wv.size(); ++k) wv[k] -= lr * gv[k];
      }
    }
  }
  if (!w.all_finite()) throw RuntimeFailure("local training produced non-finite parameters");
  return w;
}

inline ParamVector local_train(const ClientState& client, const ParamVector& start,
                               const ModelSpec& spec, Rng& rng) {
  try {
    return sgd(start, client.train, spec, client.lr, client.batch_size, client.local_epochs, rng);
  } catch (const RuntimeFailure& e) {
    throw RuntimeFailure(detail::concat("client ", client.id, ": ", e.what()));
  }
}

// Uniform sample without replacement of max(1, round(fraction * n)) ids,
// returned in ascending order.
inline std::vector<std::size_t> select_participants(std::size_t n, double fraction, Rng& rng) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw StructuralError("select_participants: fraction must lie in (0, 1]");
  }
  if (n == 0) return {};
  std::size_t k = std::size_t(std::llround(fraction * double(n)));
  k = std::clamp<std::size_t>(k, 1, n);
  auto ids = rng.sample_without_replacement(n, k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

// ---------------------------------------------------------------------------
// Accounting
// ---------------------------------------------------------------------------

enum class Direction { uplink, downlink };

class TrafficLedger {
 public:
  struct Entry {
    std::uint64_t uplink = 0;
    std::uint64_t downlink = 0;
  };

  explicit TrafficLedger(std::uint64_t model_bytes = 0) : model_bytes_(model_bytes) {}

  std::uint64_t model_bytes() const noexcept { return model_bytes_; }

  void record(std::size_t round, std::size_t client, Direction dir, std::size_t n_models) {
    if (n_models == 0) return;
    auto& e = entries_[{round, client}];
    const std::uint64_t bytes = std::uint64_t(n_models) * model_bytes_;
    (dir == Direction::uplink ? e.uplink : e.downlink) += bytes;
  }

  Entry entry(std::size_t round, std::size_t client) const {
    auto it = entries_.find({round, client});
    return it == entries_.end() ? Entry{} : it->second;
  }

  Entry round_total(std::size_t round) const {
    Entry t;
    for (auto it = entries_.lower_bound({round, 0}); it != entries_.end() && it->first.first == round;
         ++it) {
      t.uplink += it->second.uplink;
      t.downlink += it->second.downlink;
    }
    return t;
  }

  Entry total() const {
    Entry t;
    for (const auto& [key, e] : entries_) {
      t.uplink += e.uplink;
      t.downlink += e.downlink;
    }
    return t;
  }

  bool empty() const noexcept { return entries_.empty(); }

 private:
  std::uint64_t model_bytes_;
  std::map<std::pair<std::size_t, std::size_t>, Entry> entries_;
};

// Aggregation weights of one round. Rows and columns are indexed by the
// round's participants, in ascending client id.
class WeightMatrix {
 public:
  WeightMatrix() = default;
  WeightMatrix(std::size_t round, std::vector<std::size_t> ids)
      : round_(round), ids_(std::move(ids)), p_(ids_.size() * ids_.size(), 0.0) {}

  static WeightMatrix identity(std::size_t round, std::vector<std::size_t> ids) {
    WeightMatrix w(round, std::move(ids));
    for (std::size_t i = 0; i < w.size(); ++i) w.at(i, i) = 1.0;
    return w;
  }

  std::size_t size() const noexcept { return ids_.size(); }
  std::size_t round() const noexcept { return round_; }
  const std::vector<std::size_t>& ids() const noexcept { return ids_; }

  double& at(std::size_t i, std::size_t j) { return p_[i * ids_.size() + j]; }
  double at(std::size_t i, std::size_t j) const { return p_[i * ids_.size() + j]; }

  std::span<const double> row(std::size_t i) const { return {p_.data() + i * size(), size()}; }

  void set_row(std::size_t i, std::span<const double> values) {
    if (values.size() != size()) throw StructuralError("WeightMatrix::set_row: wrong row length");
    std::copy(values.begin(), values.end(), p_.begin() + std::ptrdiff_t(i * size()));
  }

  // Non-negative entries and rows summing to one within `tol`.
  bool row_stochastic(double tol = 1e-9) const {
    for (std::size_t i = 0; i < size(); ++i) {
      double s = 0.0;
      for (double v : row(i)) {
        if (v < 0.0 || !std::isfinite(v)) return false;
        s += v;
      }
      if (std::abs(s - 1.0) > tol) return false;
    }
    return true;
  }

 private:
  std::size_t round_ = 0;
  std::vector<std::size_t> ids_;
  std::vector<double> p_;
};

struct RoundReport {
  std::size_t round = 0;
  std::vector<std::size_t> participants;
  std::vector<double> accuracy;  // every client, participant or not
  double mean_accuracy = 0.0;
  std::optional<WeightMatrix> weights;
  std::uint64_t uplink_bytes = 0;
  std::uint64_t downlink_bytes = 0;
  double server_madds = 0.0;  // aggregation-side multiply-adds
  double wall_seconds = 0.0;
};

// ---------------------------------------------------------------------------
// Federation and methods
// ---------------------------------------------------------------------------

// Shared state of one simulated deployment. All randomness after setup is
// drawn from substreams keyed by (purpose, round, client), so methods that
// train the same clients in the same rounds see the same batches.
struct Federation {
  ModelSpec spec;
  TrainingConfig config;
  std::vector<ClientState> clients;
  ParamVector global;  // w^0 at setup; the server model for single-model methods
  Rng root;

  Rng stream(std::string_view purpose, std::uint64_t round, std::uint64_t client) const {
    return root.substream(purpose, round, client);
  }

  std::size_t num_clients() const noexcept { return clients.size(); }
  std::uint64_t model_bytes() const { return std::uint64_t(spec.num_params()) * sizeof(double); }
};

// Every client starts from the same w^0.
inline Federation make_federation(const FederatedData& data, const ModelSpec& spec,
                                  const TrainingConfig& config) {
  config.validate();
  spec.validate();
  if (data.num_features != spec.input_dim) {
    throw ConfigError("model", detail::concat("data has ", data.num_features,
                                              " features but the model expects ", spec.input_dim));
  }
  Federation fed{spec, config, {}, {}, Rng(config.seed)};
  Rng init = fed.stream("init", 0, 0);
  fed.global = init_params(spec, init);
  for (std::size_t i = 0; i < data.num_clients(); ++i) {
    const auto& shard = data.shards[i];
    if (shard.train.empty() || shard.test.empty()) {
      throw ConfigError("data", detail::concat("client ", i, " has an empty train or test shard"));
    }
    fed.clients.push_back(ClientState{i, shard.train, shard.test, fed.global, config.lr,
                                      config.batch_size, config.local_epochs, std::nullopt});
  }
  return fed;
}

class Method {
 public:
  struct RoundOutput {
    std::optional<WeightMatrix> weights;
    double server_madds = 0.0;
  };

  virtual ~Method() = default;
  virtual std::string name() const = 0;
  // Models each participant sends / receives per round.
  virtual std::size_t uplink_models() const = 0;
  virtual std::size_t downlink_models() const = 0;
  virtual RoundOutput run_round(Federation& fed, std::size_t round,
                                std::span<const std::size_t> participants) = 0;
  // Test accuracy of the model client `client` would use after `round`.
  virtual double evaluate(const Federation& fed, std::size_t client, std::size_t round) const = 0;

  std::size_t traffic_multiplier() const { return uplink_models() + downlink_models(); }
};

struct RunResult {
  std::vector<RoundReport> reports;
  TrafficLedger ledger;
  std::optional<std::size_t> best_round;  // 1-based; empty when no rounds ran
  double best_mean_accuracy = 0.0;
  double final_mean_accuracy = 0.0;
  double server_madds = 0.0;
};

using RoundCallback = std::function<void(const RoundReport&)>;

// Runs config.rounds rounds of `method`. Errors are rethrown as
// RuntimeFailure naming the round.
inline RunResult run(Federation& fed, Method& method, const RoundCallback& on_round = {}) {
  RunResult result;
  result.ledger = TrafficLedger(fed.model_bytes());
  for (std::size_t t = 1; t <= fed.config.rounds; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    RoundReport rep;
    rep.round = t;
    try {
      Rng part = fed.stream("participation", t, 0);
      rep.participants = select_participants(fed.num_clients(), fed.config.fraction, part);
      auto out = method.run_round(fed, t, rep.participants);
      for (std::size_t i : rep.participants) {
        result.ledger.record(t, i, Direction::downlink, method.downlink_models());
        result.ledger.record(t, i, Direction::uplink, method.uplink_models());
      }
      rep.weights = std::move(out.weights);
      rep.server_madds = out.server_madds;
      rep.accuracy.resize(fed.num_clients());
      for (std::size_t i = 0; i < fed.num_clients(); ++i) rep.accuracy[i] = method.evaluate(fed, i, t);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw RuntimeFailure(detail::concat("round ", t, ": ", e.what()));
    }
    rep.mean_accuracy = rep.accuracy.empty()
                            ? 0.0
                            : std::accumulate(rep.accuracy.begin(), rep.accuracy.end(), 0.0) /
                                  double(rep.accuracy.size());
    const auto traffic = result.ledger.round_total(t);
    rep.uplink_bytes = traffic.uplink;
    rep.downlink_bytes = traffic.downlink;
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!result.best_round || rep.mean_accuracy > result.best_mean_accuracy) {
      result.best_round = t;
      result.best_mean_accuracy = rep.mean_accuracy;
    }
    result.final_mean_accuracy = rep.mean_accuracy;
    result.server_madds += rep.server_madds;
    if (on_round) on_round(rep);
    result.reports.push_back(std::move(rep));
  }
  return result;
}

}  // namespace feddwa

#endif  // FEDDWA_FEDCORE_HPP
