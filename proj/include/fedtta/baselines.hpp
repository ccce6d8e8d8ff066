#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <fedtta/autodiff.hpp>
#include <fedtta/data.hpp>
#include <fedtta/fedtta.hpp>
#include <fedtta/mlp.hpp>

namespace fedtta {

struct BaselineTrainConfig {
  double eta = 0.1;
  double mu = 0.0;  // proximal coefficient, fedprox only
  int local_iters = 20;
  std::size_t batch = 64;
  std::uint64_t seed = 1;
};

namespace detail {

// tau SGD steps on cross-entropy, optionally with the fedprox proximal term
// (mu/2)||psi - psi_r||^2. mu == 0 skips the term so fedavg and fedprox with
// mu = 0 run the identical graph.
inline ModelParams baseline_local_train(const ModelParams& psi_r, const ClientDataset& client,
                                        const BaselineTrainConfig& cfg) {
  if (cfg.local_iters == 0) return psi_r;
  const Tensor& x_all = client.train_features();
  std::span<const int> y_all = client.train_labels();
  BatchCycler cycler(y_all.size(), cfg.batch, cfg.seed);

  ModelParams psi = psi_r.detached();
  for (int iter = 0; iter < cfg.local_iters; ++iter) {
    const std::vector<std::size_t> rows = cycler.next();
    Tensor xb = gather_rows(x_all, rows);
    std::vector<int> yb;
    yb.reserve(rows.size());
    for (std::size_t r : rows) yb.push_back(y_all[r]);

    Graph graph;
    ModelParams leaf = psi.attached(graph);
    Tensor loss = cross_entropy(forward_prediction(leaf, xb), yb);
    if (cfg.mu != 0.0) {
      Tensor prox = Tensor::scalar(0.0);
      const std::vector<Tensor> current = leaf.tensors();
      const std::vector<Tensor> anchor = psi_r.tensors();
      for (std::size_t i = 0; i < current.size(); ++i) {
        Tensor diff = subtract(current[i], anchor[i].detached());
        prox = add(prox, sum(mul(diff, diff)));
      }
      loss = add(loss, scalar_mul(prox, cfg.mu / 2.0));
    }
    if (!std::isfinite(loss.value()))
      throw TensorError("baseline_local_train: client " + std::to_string(client.id()) +
                        " iteration " + std::to_string(iter) + ": non-finite loss");
    auto grads = grad(loss, leaf.tensors());
    psi = sgd_step(psi, grads, cfg.eta).detached();
  }
  return psi;
}

}  // namespace detail

inline ModelParams fedavg_local_train(const ModelParams& psi_r, const ClientDataset& client,
                                      const BaselineTrainConfig& cfg) {
  BaselineTrainConfig plain = cfg;
  plain.mu = 0.0;
  return detail::baseline_local_train(psi_r, client, plain);
}

inline ModelParams fedprox_local_train(const ModelParams& psi_r, const ClientDataset& client,
                                       const BaselineTrainConfig& cfg) {
  return detail::baseline_local_train(psi_r, client, cfg);
}

// entropy minimization on unlabeled data: `steps` gradient steps on the mean
// prediction entropy, updating every prediction-model parameter (the MLPs
// here have no normalization layers to restrict to)
inline ModelParams tent_adapt(const ModelParams& psi0, const Tensor& x_unlabeled, int steps,
                              double eta) {
  if (steps < 0) throw std::invalid_argument("tent_adapt: negative step count");
  ModelParams psi = psi0.detached();
  for (int step = 0; step < steps; ++step) {
    Graph graph;
    ModelParams leaf = psi.attached(graph);
    Tensor h = mean(entropy(softmax(forward_prediction(leaf, x_unlabeled))));
    auto grads = grad(h, leaf.tensors());
    psi = sgd_step(psi, grads, eta).detached();
  }
  return psi;
}

}  // namespace fedtta
