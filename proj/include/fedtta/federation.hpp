#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <fedtta/autodiff.hpp>
#include <fedtta/baselines.hpp>
#include <fedtta/data.hpp>
#include <fedtta/fedtta.hpp>
#include <fedtta/metrics.hpp>
#include <fedtta/mlp.hpp>
#include <fedtta/rng.hpp>

namespace fedtta {

enum class Method { fedavg, fedprox, tent, fedtta, fedtta_prox, fedtta_pp };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::fedavg: return "fedavg";
    case Method::fedprox: return "fedprox";
    case Method::tent: return "tent";
    case Method::fedtta: return "fedtta";
    case Method::fedtta_prox: return "fedtta_prox";
    case Method::fedtta_pp: return "fedtta_pp";
  }
  return "?";
}

inline Method method_from_name(const std::string& name) {
  if (name == "fedavg") return Method::fedavg;
  if (name == "fedprox") return Method::fedprox;
  if (name == "tent") return Method::tent;
  if (name == "fedtta") return Method::fedtta;
  if (name == "fedtta_prox") return Method::fedtta_prox;
  if (name == "fedtta_pp" || name == "fedtta++") return Method::fedtta_pp;
  throw std::invalid_argument("unknown method: " + name);
}

inline bool method_uses_adaptation_model(Method m) {
  return m == Method::fedtta || m == Method::fedtta_prox || m == Method::fedtta_pp;
}

struct FederationConfig {
  int rounds = 100;
  int clients_per_round = 0;  // 0 = all training clients participate
  int local_iters = 20;       // tau
  std::size_t batch = 64;
  double eta_inner = 0.5;
  double eta_outer = 0.1;
  double eta_adapt = 0.01;
  double mu = 0.0;
  double lambda = 0.0;          // hetero distillation weight
  int test_steps = 1;           // E, fedtta_pp and tent
  std::optional<int> patience;  // entropy early stopping, fedtta_pp
  std::uint64_t seed = 1;
  MlpSpec prediction;
  MlpSpec adaptation;

  void validate() const {
    if (rounds < 0 || local_iters < 0 || test_steps < 1 || batch < 1)
      throw std::invalid_argument("FederationConfig: counts out of range");
    if (eta_inner < 0 || eta_outer < 0 || eta_adapt < 0 || mu < 0 || lambda < 0)
      throw std::invalid_argument("FederationConfig: negative rates");
    if (patience && *patience < 1)
      throw std::invalid_argument("FederationConfig: patience must be >= 1");
    prediction.validate();
  }
};

// deterministic per-(round, client) stream, independent of execution order
inline std::uint64_t client_round_seed(std::uint64_t run_seed, int round, int client_id) {
  return mix64(run_seed, static_cast<std::uint64_t>(round) + 1,
               static_cast<std::uint64_t>(client_id) + 0x636c6965);
}

// seeded sample without replacement; order is the seeded shuffle
inline std::vector<int> select_clients(int round, std::span<const int> all_ids, std::size_t m,
                                       std::uint64_t seed) {
  if (m > all_ids.size())
    throw std::invalid_argument("select_clients: more clients requested than available");
  std::vector<int> ids(all_ids.begin(), all_ids.end());
  Rng rng(mix64(seed, static_cast<std::uint64_t>(round) + 1, 0x73656c65));
  rng.shuffle(ids);
  ids.resize(m);
  return ids;
}

// coordinate-wise unweighted mean; summation in list order, so callers fix
// the order (ascending client id) to keep aggregation order-independent
inline ModelParams aggregate_average(std::span<const ModelParams> updates) {
  if (updates.empty()) throw std::invalid_argument("aggregate_average: empty update list");
  for (const ModelParams& u : updates)
    if (u.spec != updates.front().spec)
      throw std::invalid_argument("aggregate_average: mismatched model specs");

  const double inv = 1.0 / static_cast<double>(updates.size());
  ModelParams out;
  out.spec = updates.front().spec;
  for (std::size_t l = 0; l < updates.front().weights.size(); ++l) {
    std::vector<double> w(updates.front().weights[l].size(), 0.0);
    std::vector<double> b(updates.front().biases[l].size(), 0.0);
    for (const ModelParams& u : updates) {
      for (std::size_t i = 0; i < w.size(); ++i) w[i] += u.weights[l].at(i);
      for (std::size_t i = 0; i < b.size(); ++i) b[i] += u.biases[l].at(i);
    }
    for (auto& v : w) v *= inv;
    for (auto& v : b) v *= inv;
    out.weights.emplace_back(updates.front().weights[l].shape(), std::move(w));
    out.biases.emplace_back(updates.front().biases[l].shape(), std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// parallel execution
// ---------------------------------------------------------------------------

inline unsigned worker_count() {
  if (const char* env = std::getenv("FEDTTA_WORKERS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<unsigned>(n);
  }
  return 1;
}

// index-parallel map; results land in slot order, so output is identical for
// any worker count
inline void parallel_for(std::size_t n, unsigned workers,
                         const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const unsigned active = static_cast<unsigned>(std::min<std::size_t>(workers, n));
  std::vector<std::thread> pool;
  std::exception_ptr first_error;
  std::mutex error_mutex;
  pool.reserve(active);
  for (unsigned w = 0; w < active; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += active) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// inference procedures
// ---------------------------------------------------------------------------

// each method's own way of producing logits for an unlabeled dataset
inline Tensor method_inference(Method method, const FederationConfig& cfg, const ModelParams& psi,
                               const std::optional<ModelParams>& phi, const Tensor& x) {
  switch (method) {
    case Method::fedavg:
    case Method::fedprox:
      return forward_prediction(psi, x);
    case Method::tent: {
      ModelParams adapted = tent_adapt(psi, x, cfg.test_steps, cfg.eta_inner);
      return forward_prediction(adapted, x);
    }
    case Method::fedtta:
    case Method::fedtta_prox: {
      AdaptConfig ac{cfg.eta_inner, 1, std::nullopt};
      AdaptResult r = test_adapt(psi, *phi, x, ac);
      return forward_prediction(r.personalized, x);
    }
    case Method::fedtta_pp: {
      AdaptConfig ac{cfg.eta_inner, cfg.test_steps, cfg.patience};
      AdaptResult r = test_adapt(psi, *phi, x, ac);
      return forward_prediction(r.personalized, x);
    }
  }
  throw std::invalid_argument("method_inference: unknown method");
}

// ---------------------------------------------------------------------------
// training engine
// ---------------------------------------------------------------------------

struct RoundMetrics {
  int round = 0;
  double mean_validation_accuracy = 0.0;
  std::vector<EvalRecord> per_client;
};

struct TrainResult {
  Method method = Method::fedavg;
  ModelParams best_psi;
  std::optional<ModelParams> best_phi;
  int best_round = -1;
  double best_validation_accuracy = 0.0;
  std::vector<RoundMetrics> rounds;
  ModelParams final_psi;
  std::optional<ModelParams> final_phi;
};

namespace detail {

struct LocalUpdate {
  int client_id = 0;
  ModelParams psi;
  std::optional<ModelParams> phi;
};

inline LocalUpdate run_local(Method method, const FederationConfig& cfg, const ModelParams& psi_r,
                             const std::optional<ModelParams>& phi_r, const ClientDataset& client,
                             int round) {
  const std::uint64_t seed = client_round_seed(cfg.seed, round, client.id());
  switch (method) {
    case Method::fedavg:
    case Method::tent: {
      BaselineTrainConfig b{cfg.eta_outer, 0.0, cfg.local_iters, cfg.batch, seed};
      return {client.id(), fedavg_local_train(psi_r, client, b), std::nullopt};
    }
    case Method::fedprox: {
      BaselineTrainConfig b{cfg.eta_outer, cfg.mu, cfg.local_iters, cfg.batch, seed};
      return {client.id(), fedprox_local_train(psi_r, client, b), std::nullopt};
    }
    case Method::fedtta:
    case Method::fedtta_prox:
    case Method::fedtta_pp: {
      const double mu = method == Method::fedtta ? 0.0 : cfg.mu;
      MetaTrainConfig m{cfg.eta_inner, cfg.eta_outer, cfg.eta_adapt, mu,
                        cfg.local_iters, cfg.batch, seed};
      MetaModels out = local_meta_train(psi_r, *phi_r, client, m);
      return {client.id(), out.psi, out.phi};
    }
  }
  throw std::invalid_argument("run_local: unknown method");
}

}  // namespace detail

// accuracy of the method's own inference procedure on one client's
// validation split (training clients) or full dataset (test clients)
inline std::optional<EvalRecord> evaluate_client(Method method, const FederationConfig& cfg,
                                                 const ModelParams& psi,
                                                 const std::optional<ModelParams>& phi,
                                                 const ClientDataset& client, int round) {
  EvalRecord rec;
  rec.client_id = client.id();
  rec.round = round;
  rec.method = method_name(method);
  if (client.role() == ClientRole::training) {
    if (client.validation_size() == 0) return std::nullopt;
    Tensor logits = method_inference(method, cfg, psi, phi, client.validation_features());
    EvalLabelScope scope;
    rec.accuracy = top1_accuracy(logits, client.validation_labels());
    rec.split = "validation";
  } else {
    Tensor logits = method_inference(method, cfg, psi, phi, client.features());
    EvalLabelScope scope;
    rec.accuracy = top1_accuracy(logits, client.all_labels());
    rec.split = "test";
  }
  return rec;
}

// Round-based federation: select, run local training from the identical
// round-start parameters, aggregate both models in ascending client-id
// order, evaluate every training client's validation split under the
// method's own inference procedure, and keep the checkpoint with the best
// validation accuracy (earliest round on ties).
inline TrainResult run_training(Method method, const FederationConfig& cfg,
                                std::span<const ClientDataset> training_clients) {
  cfg.validate();
  if (training_clients.empty()) throw std::invalid_argument("run_training: no training clients");
  for (const ClientDataset& c : training_clients)
    if (c.role() != ClientRole::training)
      throw std::invalid_argument("run_training: non-training client in the training set");

  const std::size_t m = cfg.clients_per_round == 0
                            ? training_clients.size()
                            : static_cast<std::size_t>(cfg.clients_per_round);
  if (m > training_clients.size())
    throw std::invalid_argument("run_training: clients_per_round exceeds available clients");

  std::vector<int> all_ids;
  for (const ClientDataset& c : training_clients) all_ids.push_back(c.id());
  std::vector<std::size_t> index_of_id(*std::max_element(all_ids.begin(), all_ids.end()) + 1);
  for (std::size_t i = 0; i < training_clients.size(); ++i)
    index_of_id[static_cast<std::size_t>(training_clients[i].id())] = i;

  const unsigned workers = worker_count();

  TrainResult result;
  result.method = method;
  ModelParams psi = ModelParams::init(cfg.prediction, mix64(cfg.seed, 0x707369));
  std::optional<ModelParams> phi;
  if (method_uses_adaptation_model(method))
    phi = ModelParams::init(cfg.adaptation, mix64(cfg.seed, 0x706869));

  for (int round = 0; round < cfg.rounds; ++round) {
    std::vector<int> selected = select_clients(round, all_ids, m, cfg.seed);

    std::vector<detail::LocalUpdate> updates(selected.size());
    try {
      parallel_for(selected.size(), workers, [&](std::size_t i) {
        const ClientDataset& client =
            training_clients[index_of_id[static_cast<std::size_t>(selected[i])]];
        updates[i] = detail::run_local(method, cfg, psi, phi, client, round);
      });
    } catch (const TensorError& e) {
      throw TensorError("round " + std::to_string(round) + ": " + e.what());
    }

    // barrier aggregation in ascending client-id order
    std::sort(updates.begin(), updates.end(),
              [](const auto& a, const auto& b) { return a.client_id < b.client_id; });
    std::vector<ModelParams> psis, phis;
    for (const auto& u : updates) {
      psis.push_back(u.psi);
      if (u.phi) phis.push_back(*u.phi);
    }
    psi = aggregate_average(psis);
    if (phi) phi = aggregate_average(phis);

    // validation across all training clients
    RoundMetrics metrics;
    metrics.round = round;
    std::vector<std::optional<EvalRecord>> records(training_clients.size());
    parallel_for(training_clients.size(), workers, [&](std::size_t i) {
      records[i] = evaluate_client(method, cfg, psi, phi, training_clients[i], round);
    });
    for (auto& r : records)
      if (r) metrics.per_client.push_back(std::move(*r));
    metrics.mean_validation_accuracy = mean_accuracy(metrics.per_client);
    result.rounds.push_back(std::move(metrics));

    if (result.best_round < 0 ||
        result.rounds.back().mean_validation_accuracy > result.best_validation_accuracy) {
      result.best_validation_accuracy = result.rounds.back().mean_validation_accuracy;
      result.best_round = round;
      result.best_psi = psi;
      result.best_phi = phi;
    }
  }

  result.final_psi = psi;
  result.final_phi = phi;
  if (result.best_round < 0) {  // zero-round run: report the initial models
    result.best_psi = psi;
    result.best_phi = phi;
    result.best_round = 0;
  }
  return result;
}

// test clients evaluated from the best-validation checkpoint
inline std::vector<EvalRecord> evaluate_test_clients(Method method, const FederationConfig& cfg,
                                                     const TrainResult& trained,
                                                     std::span<const ClientDataset> test_clients) {
  const unsigned workers = worker_count();
  std::vector<std::optional<EvalRecord>> records(test_clients.size());
  parallel_for(test_clients.size(), workers, [&](std::size_t i) {
    records[i] = evaluate_client(method, cfg, trained.best_psi, trained.best_phi, test_clients[i],
                                 trained.best_round);
  });
  std::vector<EvalRecord> out;
  for (auto& r : records)
    if (r) out.push_back(std::move(*r));
  return out;
}

}  // namespace fedtta
