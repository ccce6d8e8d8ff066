#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <fedtta/autodiff.hpp>
#include <fedtta/data.hpp>
#include <fedtta/federation.hpp>
#include <fedtta/fedtta.hpp>
#include <fedtta/metrics.hpp>
#include <fedtta/mlp.hpp>
#include <fedtta/rng.hpp>

namespace fedtta {

// three capability tiers; all share the input dimension and class count, so
// only logits ever need to agree across clients
enum class FamilyKind { small, medium, big };

struct ModelFamily {
  std::string name;
  MlpSpec prediction;
  MlpSpec adaptation;

  static ModelFamily make(FamilyKind kind, std::size_t dim, std::size_t classes) {
    switch (kind) {
      case FamilyKind::small:
        return {"small", MlpSpec{{dim, 64, classes}}, MlpSpec{{classes, 32, 32, 1}}};
      case FamilyKind::medium:
        return {"medium", MlpSpec{{dim, 128, classes}}, MlpSpec{{classes, 64, 64, 1}}};
      case FamilyKind::big:
        return {"big", MlpSpec{{dim, 256, classes}}, MlpSpec{{classes, 128, 128, 1}}};
    }
    throw std::invalid_argument("ModelFamily: unknown kind");
  }

  static ModelFamily from_name(const std::string& name, std::size_t dim, std::size_t classes) {
    if (name == "small") return make(FamilyKind::small, dim, classes);
    if (name == "medium") return make(FamilyKind::medium, dim, classes);
    if (name == "big") return make(FamilyKind::big, dim, classes);
    throw std::invalid_argument("ModelFamily: unknown name " + name);
  }
};

// server-held averaged logits on the public dataset
struct EnsembleKnowledge {
  Tensor f_base;  // [m_p, C]
  Tensor f_per;   // [m_p, C]

  void validate(std::size_t m_p, std::size_t classes) const {
    const Shape want{m_p, classes};
    if (f_base.shape() != want || f_per.shape() != want)
      throw TensorError("EnsembleKnowledge: logits shaped " + shape_string(f_base.shape()) +
                        "/" + shape_string(f_per.shape()) + ", expected " +
                        shape_string(want));
    if (!f_base.all_finite() || !f_per.all_finite())
      throw TensorError("EnsembleKnowledge: non-finite logits");
  }
};

// unweighted mean in list order; callers pass ascending client-id order
inline Tensor ensemble_mean_logits(std::span<const Tensor> logits) {
  if (logits.empty()) throw std::invalid_argument("ensemble_mean_logits: empty list");
  for (const Tensor& t : logits)
    if (t.shape() != logits.front().shape())
      throw TensorError("ensemble_mean_logits: mismatched shapes");
  std::vector<double> out(logits.front().size(), 0.0);
  for (const Tensor& t : logits)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += t.at(i);
  const double inv = 1.0 / static_cast<double>(logits.size());
  for (auto& v : out) v *= inv;
  return Tensor(logits.front().shape(), std::move(out));
}

// Two-term distillation loss: the personalized student (one inner step on the
// public data, second-order differentiable) mimics the personalized ensemble,
// and the base student mimics the base ensemble with weight lambda. Per-row
// KL divergences are averaged over the public dataset. lambda == 0 keeps the
// personalized term only.
inline Tensor kd_loss(const ModelParams& psi_student, const ModelParams& phi_student,
                      const Tensor& public_x, const EnsembleKnowledge& teacher, double lambda,
                      double eta_inner) {
  if (lambda < 0.0) throw std::invalid_argument("kd_loss: negative lambda");
  if (teacher.f_base.attached() || teacher.f_per.attached())
    throw TensorError("kd_loss: teacher logits must be detached");
  InnerAdaptResult inner = inner_adapt(psi_student, phi_student, public_x, eta_inner);
  Tensor personalized_logits = forward_prediction(inner.psi_tilde, public_x);
  Tensor loss = mean(kl_divergence(softmax(personalized_logits), softmax(teacher.f_per)));
  if (lambda != 0.0) {
    Tensor base_term = mean(kl_divergence(softmax(inner.logits), softmax(teacher.f_base)));
    loss = add(loss, scalar_mul(base_term, lambda));
  }
  return loss;
}

struct HeteroConfig {
  int rounds = 10;
  int kd_steps = 20;  // Digest iterations
  double lambda = 0.0;
  double eta_inner = 0.1;
  double eta_outer = 0.1;
  double eta_digest = 0.3;  // Digest step size for the prediction model
  double eta_adapt = 0.01;
  double mu = 0.0;
  int local_iters = 20;  // Revisit iterations
  std::size_t batch = 64;
  int test_steps = 1;           // onboarding adaptation steps
  std::optional<int> patience;  // onboarding early stopping
  std::uint64_t seed = 1;

  void validate() const {
    if (rounds < 0 || kd_steps < 0 || local_iters < 0 || test_steps < 1 || batch < 1)
      throw std::invalid_argument("HeteroConfig: counts out of range");
    if (lambda < 0 || mu < 0 || eta_inner < 0 || eta_outer < 0 || eta_adapt < 0 || eta_digest < 0)
      throw std::invalid_argument("HeteroConfig: negative rates");
  }
};

struct HeteroClient {
  int id = 0;
  ModelFamily family;
  ClientDataset data;
  ModelParams psi;
  ModelParams phi;
};

inline HeteroClient make_hetero_client(int id, const ModelFamily& family, ClientDataset data,
                                       std::uint64_t run_seed) {
  HeteroClient c{id, family, std::move(data), {}, {}};
  c.psi = ModelParams::init(family.prediction, mix64(run_seed, 0x707369, static_cast<std::uint64_t>(id)));
  c.phi = ModelParams::init(family.adaptation, mix64(run_seed, 0x706869, static_cast<std::uint64_t>(id)));
  return c;
}

// Digest: kd_steps gradient steps on the distillation loss, updating both
// local models through the inner step
inline void hetero_digest(ModelParams& psi, ModelParams& phi, const Tensor& public_x,
                          const EnsembleKnowledge& teacher, const HeteroConfig& cfg) {
  for (int step = 0; step < cfg.kd_steps; ++step) {
    Graph graph;
    ModelParams psi_leaf = psi.attached(graph);
    ModelParams phi_leaf = phi.attached(graph);
    Tensor loss = kd_loss(psi_leaf, phi_leaf, public_x, teacher, cfg.lambda, cfg.eta_inner);
    if (!std::isfinite(loss.value()))
      throw TensorError("hetero_digest: non-finite distillation loss at step " +
                        std::to_string(step));
    std::vector<Tensor> wrt = psi_leaf.tensors();
    const std::size_t psi_count = wrt.size();
    for (const Tensor& t : phi_leaf.tensors()) wrt.push_back(t);
    auto grads = graph.gradients(loss, wrt, /*create_graph=*/false, /*allow_unreachable=*/true);
    psi = sgd_step(psi, std::span<const Tensor>(grads.data(), psi_count), cfg.eta_digest).detached();
    if (cfg.eta_adapt != 0.0)
      phi = sgd_step(phi, std::span<const Tensor>(grads.data() + psi_count, grads.size() - psi_count),
                     cfg.eta_adapt)
                .detached();
  }
}

struct CommunicateResult {
  Tensor base_logits;  // f(D_p; psi)
  Tensor per_logits;   // f(D_p; psi adapted one step on D_p)
};

// Communicate: logits of the base model and of its one-step personalized
// counterpart on the public dataset; only these cross the client boundary
inline CommunicateResult hetero_communicate(const ModelParams& psi, const ModelParams& phi,
                                            const Tensor& public_x, double eta_inner) {
  CommunicateResult out;
  out.base_logits = forward_prediction(psi, public_x);
  Graph graph;
  ModelParams psi_leaf = psi.attached(graph);
  InnerAdaptResult inner =
      inner_adapt(psi_leaf, phi.detached(), public_x, eta_inner, /*track_meta_gradient=*/false);
  out.per_logits = forward_prediction(inner.psi_tilde.detached(), public_x);
  return out;
}

inline EnsembleKnowledge aggregate_knowledge(std::span<const CommunicateResult> results) {
  std::vector<Tensor> base, per;
  for (const auto& r : results) {
    base.push_back(r.base_logits);
    per.push_back(r.per_logits);
  }
  return {ensemble_mean_logits(base), ensemble_mean_logits(per)};
}

struct HeteroRoundMetrics {
  int round = 0;
  double mean_validation_accuracy = 0.0;
};

struct HeteroResult {
  EnsembleKnowledge knowledge;
  std::vector<HeteroRoundMetrics> rounds;
};

// Ensemble-distillation training: one Communicate/Aggregate bootstrap from
// the initial models seeds the knowledge, then each round runs Digest,
// Revisit, Communicate on every client and the server re-averages. Clients
// keep their own (heterogeneous) models throughout; parameters never leave
// the client.
inline HeteroResult run_hetero_training(std::vector<HeteroClient>& clients,
                                        const UnlabeledDataset& public_data,
                                        const HeteroConfig& cfg) {
  cfg.validate();
  if (clients.empty()) throw std::invalid_argument("run_hetero_training: no clients");
  const Tensor& dp = public_data.features;
  const unsigned workers = worker_count();

  auto communicate_all = [&] {
    std::vector<CommunicateResult> results(clients.size());
    parallel_for(clients.size(), workers, [&](std::size_t i) {
      results[i] = hetero_communicate(clients[i].psi, clients[i].phi, dp, cfg.eta_inner);
    });
    return results;
  };

  HeteroResult result;
  result.knowledge = aggregate_knowledge(communicate_all());
  result.knowledge.validate(public_data.size(), clients.front().data.classes());

  for (int round = 0; round < cfg.rounds; ++round) {
    parallel_for(clients.size(), workers, [&](std::size_t i) {
      HeteroClient& c = clients[i];
      hetero_digest(c.psi, c.phi, dp, result.knowledge, cfg);
      MetaTrainConfig meta{cfg.eta_inner, cfg.eta_outer, cfg.eta_adapt, cfg.mu,
                           cfg.local_iters, cfg.batch,
                           client_round_seed(cfg.seed, round, c.id)};
      MetaModels out = local_meta_train(c.psi, c.phi, c.data, meta);
      c.psi = out.psi;
      c.phi = out.phi;
    });
    result.knowledge = aggregate_knowledge(communicate_all());
    result.knowledge.validate(public_data.size(), clients.front().data.classes());

    HeteroRoundMetrics metrics;
    metrics.round = round;
    std::vector<double> accs(clients.size(), -1.0);
    parallel_for(clients.size(), workers, [&](std::size_t i) {
      const HeteroClient& c = clients[i];
      if (c.data.validation_size() == 0) return;
      AdaptConfig ac{cfg.eta_inner, 1, std::nullopt};
      AdaptResult adapted = test_adapt(c.psi, c.phi, c.data.validation_features(), ac);
      Tensor logits = forward_prediction(adapted.personalized, c.data.validation_features());
      EvalLabelScope scope;
      accs[i] = top1_accuracy(logits, c.data.validation_labels()).fraction();
    });
    double total = 0.0;
    int counted = 0;
    for (double a : accs)
      if (a >= 0.0) {
        total += a;
        ++counted;
      }
    metrics.mean_validation_accuracy = counted ? total / counted : 0.0;
    result.rounds.push_back(metrics);
  }
  return result;
}

struct OnboardResult {
  ModelParams psi;
  ModelParams phi;
  AdaptResult adaptation;
  Tensor predictions;  // logits of the personalized model on the new data
};

// Test phase of the distillation protocol: a new client picks any family,
// distills the ensemble knowledge on the public dataset, then personalizes on
// its own unlabeled data
inline OnboardResult new_client_onboard(const ModelFamily& family, const Tensor& new_x,
                                        const UnlabeledDataset& public_data,
                                        const EnsembleKnowledge& knowledge,
                                        const HeteroConfig& cfg, std::uint64_t init_seed) {
  OnboardResult out;
  out.psi = ModelParams::init(family.prediction, mix64(init_seed, 0x6f6e7073));
  out.phi = ModelParams::init(family.adaptation, mix64(init_seed, 0x6f6e7068));
  hetero_digest(out.psi, out.phi, public_data.features, knowledge, cfg);
  AdaptConfig ac{cfg.eta_inner, cfg.test_steps, cfg.patience};
  out.adaptation = test_adapt(out.psi, out.phi, new_x, ac);
  out.predictions = forward_prediction(out.adaptation.personalized, new_x);
  return out;
}

}  // namespace fedtta
