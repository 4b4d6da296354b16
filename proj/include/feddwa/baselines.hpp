#ifndef FEDDWA_BASELINES_HPP
#define FEDDWA_BASELINES_HPP

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "feddwa/dwa.hpp"
#include "feddwa/errors.hpp"
#include "feddwa/fedcore.hpp"
#include "feddwa/models.hpp"
#include "feddwa/numkit.hpp"

namespace feddwa {

enum class MethodKind { fedavg, fedprox, local, fedavg_ft, feddwa };

struct MethodConfig {
  MethodKind kind = MethodKind::feddwa;
  double mu = 1.0;             // fedprox
  std::size_t ft_epochs = 1;   // fedavg_ft
  DwaConfig dwa;               // feddwa
};

// Server model as the (uniform or size-proportional) mean of the uploads.
inline ParamVector fedavg_round(std::span<const ParamVector> trained,
                                std::span<const std::size_t> sizes = {},
                                bool size_weighted = false) {
  if (trained.empty()) throw StructuralError("fedavg_round: no participants");
  std::vector<double> p(trained.size(), 1.0 / double(trained.size()));
  if (size_weighted) {
    if (sizes.size() != trained.size()) throw StructuralError("fedavg_round: sizes do not match models");
    double total = 0.0;
    for (auto s : sizes) total += double(s);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = double(sizes[i]) / total;
  }
  return weighted_sum(p, trained);
}

// Local SGD on f_i(w) + (mu/2)||w - start||^2.
inline ParamVector fedprox_local(const ClientState& client, const ParamVector& start, double mu,
                                 const ModelSpec& spec, Rng& rng) {
  if (!(mu >= 0.0)) throw StructuralError("fedprox_local: mu must be non-negative");
  try {
    return sgd(start, client.train, spec, client.lr, client.batch_size, client.local_epochs, rng,
               mu, &start);
  } catch (const RuntimeFailure& e) {
    throw RuntimeFailure(detail::concat("client ", client.id, ": ", e.what()));
  }
}

// Test accuracy of a throwaway copy of `global` fine-tuned for ft_epochs on
// the client's training data. `global` is not modified.
inline double fedavg_ft_accuracy(const ParamVector& global, const ClientState& client,
                                 std::size_t ft_epochs, const ModelSpec& spec, Rng& rng) {
  if (ft_epochs == 0) throw StructuralError("fedavg_ft: ft_epochs must be at least 1");
  const ParamVector tuned =
      sgd(global, client.train, spec, client.lr, client.batch_size, ft_epochs, rng);
  return accuracy(tuned, client.test, spec);
}

inline std::vector<double> fedavg_ft_eval(const Federation& fed, std::size_t ft_epochs,
                                          std::size_t round) {
  std::vector<double> acc(fed.num_clients());
  for (std::size_t i = 0; i < fed.num_clients(); ++i) {
    Rng rng = fed.stream("finetune", round, i);
    acc[i] = fedavg_ft_accuracy(fed.global, fed.clients[i], ft_epochs, fed.spec, rng);
  }
  return acc;
}

// Participants train their own models; nothing is exchanged.
inline void local_only_round(Federation& fed, std::size_t round,
                             std::span<const std::size_t> participants) {
  for (std::size_t i : participants) {
    auto& client = fed.clients[i];
    Rng batches = fed.stream("batch", round, i);
    client.model = local_train(client, client.model, fed.spec, batches);
  }
}

// FedAvg; with mu > 0 the local step is FedProx's proximal SGD.
class FedAvg : public Method {
 public:
  explicit FedAvg(double mu = 0.0, std::string name = "fedavg") : mu_(mu), name_(std::move(name)) {
    if (!(mu_ >= 0.0)) throw ConfigError("method.mu", "must be non-negative");
  }

  std::string name() const override { return name_; }
  std::size_t uplink_models() const override { return 1; }
  std::size_t downlink_models() const override { return 1; }

  RoundOutput run_round(Federation& fed, std::size_t round,
                        std::span<const std::size_t> participants) override {
    std::vector<ParamVector> trained;
    std::vector<std::size_t> sizes;
    trained.reserve(participants.size());
    for (std::size_t i : participants) {
      const auto& client = fed.clients[i];
      Rng batches = fed.stream("batch", round, i);
      trained.push_back(mu_ > 0.0 ? fedprox_local(client, fed.global, mu_, fed.spec, batches)
                                  : local_train(client, fed.global, fed.spec, batches));
      sizes.push_back(client.train.size());
    }
    fed.global = fedavg_round(trained, sizes, fed.config.size_weighted);
    for (std::size_t i : participants) fed.clients[i].model = fed.global;
    return {std::nullopt, double(trained.size()) * double(fed.spec.num_params())};
  }

  double evaluate(const Federation& fed, std::size_t client, std::size_t) const override {
    return accuracy(fed.global, fed.clients[client].test, fed.spec);
  }

 private:
  double mu_;
  std::string name_;
};

class FedProx : public FedAvg {
 public:
  explicit FedProx(double mu) : FedAvg(mu, "fedprox") {}
};

// FedAvg training; each client is evaluated on a fine-tuned copy of the
// global model.
class FedAvgFT : public FedAvg {
 public:
  explicit FedAvgFT(std::size_t ft_epochs) : FedAvg(0.0, "fedavg_ft"), ft_epochs_(ft_epochs) {
    if (ft_epochs_ == 0) throw ConfigError("method.ft_epochs", "must be at least 1");
  }

  double evaluate(const Federation& fed, std::size_t client, std::size_t round) const override {
    Rng rng = fed.stream("finetune", round, client);
    return fedavg_ft_accuracy(fed.global, fed.clients[client], ft_epochs_, fed.spec, rng);
  }

 private:
  std::size_t ft_epochs_;
};

class LocalOnly : public Method {
 public:
  std::string name() const override { return "local"; }
  std::size_t uplink_models() const override { return 0; }
  std::size_t downlink_models() const override { return 0; }

  RoundOutput run_round(Federation& fed, std::size_t round,
                        std::span<const std::size_t> participants) override {
    local_only_round(fed, round, participants);
    return {};
  }

  double evaluate(const Federation& fed, std::size_t client, std::size_t) const override {
    const auto& c = fed.clients[client];
    return accuracy(c.model, c.test, fed.spec);
  }
};

inline std::unique_ptr<Method> make_method(const MethodConfig& cfg) {
  switch (cfg.kind) {
    case MethodKind::fedavg: return std::make_unique<FedAvg>();
    case MethodKind::fedprox: return std::make_unique<FedProx>(cfg.mu);
    case MethodKind::local: return std::make_unique<LocalOnly>();
    case MethodKind::fedavg_ft: return std::make_unique<FedAvgFT>(cfg.ft_epochs);
    case MethodKind::feddwa: return std::make_unique<FedDwa>(cfg.dwa);
  }
  throw StructuralError("unknown method");
}

}  // namespace feddwa

#endif  // FEDDWA_BASELINES_HPP
