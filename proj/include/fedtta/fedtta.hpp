#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <fedtta/autodiff.hpp>
#include <fedtta/data.hpp>
#include <fedtta/metrics.hpp>
#include <fedtta/mlp.hpp>
#include <fedtta/rng.hpp>

namespace fedtta {

// cycles batches of size `batch` over a seeded permutation, reshuffling each
// time the data is exhausted
class BatchCycler {
 public:
  BatchCycler(std::size_t count, std::size_t batch, std::uint64_t seed)
      : batch_(std::min(batch, count)), rng_(mix64(seed, 0x62617463)) {
    if (count == 0) throw std::invalid_argument("BatchCycler: no samples");
    order_.resize(count);
    std::iota(order_.begin(), order_.end(), 0);
    rng_.shuffle(order_);
  }

  std::vector<std::size_t> next() {
    if (pos_ >= order_.size()) {
      rng_.shuffle(order_);
      pos_ = 0;
    }
    const std::size_t take = std::min(batch_, order_.size() - pos_);
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(pos_ + take));
    pos_ += take;
    return out;
  }

 private:
  std::size_t batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// early stopping on the prediction entropy
// ---------------------------------------------------------------------------

// Stop when no new global minimum has appeared for `patience` consecutive
// steps; plateau ties do not reset the counter. Without a patience the
// sequence always runs to its configured end.
class EntropyStopper {
 public:
  explicit EntropyStopper(std::optional<int> patience) : patience_(patience) {
    if (patience_ && *patience_ < 1)
      throw std::invalid_argument("EntropyStopper: patience must be >= 1");
  }

  // feed the entropy observed at the next step; returns true when adaptation
  // should stop after this step
  bool observe(double value) {
    const int step = next_step_++;
    if (value < best_value_) {
      best_value_ = value;
      best_step_ = step;
    }
    return patience_ && (step - best_step_) >= *patience_;
  }

  int best_step() const { return best_step_; }
  double best_value() const { return best_value_; }
  int steps_observed() const { return next_step_; }

 private:
  std::optional<int> patience_;
  int next_step_ = 0;
  int best_step_ = 0;
  double best_value_ = std::numeric_limits<double>::infinity();
};

struct StopAnalysis {
  int selected_step = 0;  // argmin entropy, earliest on ties
  int stop_step = 0;      // last step that would have run
};

inline StopAnalysis analyze_entropy_trace(std::span<const double> entropies,
                                          std::optional<int> patience) {
  if (entropies.empty()) throw std::invalid_argument("analyze_entropy_trace: empty trace");
  EntropyStopper stopper(patience);
  for (std::size_t i = 0; i < entropies.size(); ++i) {
    if (stopper.observe(entropies[i]))
      return {stopper.best_step(), static_cast<int>(i)};
  }
  return {stopper.best_step(), static_cast<int>(entropies.size()) - 1};
}

// ---------------------------------------------------------------------------
// meta-training ops
// ---------------------------------------------------------------------------

struct InnerAdaptResult {
  ModelParams psi_tilde;
  Tensor logits;    // Z = f(X; psi), reused by the proximal term
  Tensor per_loss;  // l_per scalar
};

// one gradient step on l_per(phi, f(X; psi)). With track_meta_gradient the
// step is recorded, so psi_tilde stays differentiable with respect to both
// psi and phi; test-time adaptation switches it off and freezes phi.
inline InnerAdaptResult inner_adapt(const ModelParams& psi, const ModelParams& phi,
                                    const Tensor& x, double eta_inner,
                                    bool track_meta_gradient = true) {
  if (eta_inner < 0.0) throw std::invalid_argument("inner_adapt: negative eta_inner");
  InnerAdaptResult r;
  r.logits = forward_prediction(psi, x);
  r.per_loss = personalization_loss(phi, r.logits);
  if (!std::isfinite(r.per_loss.value()))
    throw TensorError("inner_adapt: non-finite personalization loss " +
                      std::to_string(r.per_loss.value()));
  if (eta_inner == 0.0) {
    r.psi_tilde = psi;
    return r;
  }
  if (!r.per_loss.attached())
    throw TensorError("inner_adapt: psi must be attached to a graph to take a step");
  std::vector<Tensor> wrt = psi.tensors();
  auto grads = r.per_loss.graph()->gradients(r.per_loss, wrt, track_meta_gradient);
  r.psi_tilde = sgd_step(psi, grads, eta_inner);
  return r;
}

// L = CE(f(X; psi_tilde), Y) [+ mu * mean KL(softmax(Z) || softmax(Z_server))].
// The proximal reference logits come from the frozen round-start model and
// must be detached; at mu == 0 the term is skipped entirely so the graph is
// identical to the plain objective.
inline Tensor meta_loss(const ModelParams& psi_tilde, const Tensor& x,
                        std::span<const int> labels, double mu, const Tensor& z_current,
                        const Tensor& z_server) {
  Tensor loss = cross_entropy(forward_prediction(psi_tilde, x), labels);
  if (mu != 0.0) {
    if (!z_server.defined()) throw TensorError("meta_loss: proximal term without server logits");
    if (z_server.attached())
      throw TensorError("meta_loss: server logits must be detached from the graph");
    Tensor kl = mean(kl_divergence(softmax(z_current), softmax(z_server)));
    loss = add(loss, scalar_mul(kl, mu));
  }
  return loss;
}

struct MetaTrainConfig {
  double eta_inner = 0.5;
  double eta_outer = 0.1;
  double eta_adapt = 0.01;
  double mu = 0.0;
  int local_iters = 20;
  std::size_t batch = 64;
  std::uint64_t seed = 1;
};

struct MetaModels {
  ModelParams psi;
  ModelParams phi;
};

namespace detail {

inline Tensor gather_batch(const Tensor& x, std::span<const std::size_t> rows) {
  return gather_rows(x, rows);
}

}  // namespace detail

// tau meta-iterations on the client's train split: inner step on l_per, outer
// update of psi and phi through it with exact second-order gradients. The
// proximal reference is the frozen round-start model psi_r.
inline MetaModels local_meta_train(const ModelParams& psi_r, const ModelParams& phi_r,
                                   const ClientDataset& client, const MetaTrainConfig& cfg) {
  if (cfg.local_iters == 0) return {psi_r, phi_r};
  const Tensor& x_all = client.train_features();
  std::span<const int> y_all = client.train_labels();

  BatchCycler cycler(y_all.size(), cfg.batch, cfg.seed);
  ModelParams psi = psi_r.detached();
  ModelParams phi = phi_r.detached();

  for (int iter = 0; iter < cfg.local_iters; ++iter) {
    const std::vector<std::size_t> rows = cycler.next();
    Tensor xb = detail::gather_batch(x_all, rows);
    std::vector<int> yb;
    yb.reserve(rows.size());
    for (std::size_t r : rows) yb.push_back(y_all[r]);

    Tensor z_server;
    if (cfg.mu != 0.0) z_server = forward_prediction(psi_r, xb);  // detached by construction

    Graph graph;
    ModelParams psi_leaf = psi.attached(graph);
    ModelParams phi_leaf = phi.attached(graph);

    InnerAdaptResult inner;
    try {
      inner = inner_adapt(psi_leaf, phi_leaf, xb, cfg.eta_inner);
    } catch (const TensorError& e) {
      throw TensorError("local_meta_train: client " + std::to_string(client.id()) + " iteration " +
                        std::to_string(iter) + ": " + e.what());
    }
    Tensor loss = meta_loss(inner.psi_tilde, xb, yb, cfg.mu, inner.logits, z_server);
    if (!std::isfinite(loss.value()))
      throw TensorError("local_meta_train: client " + std::to_string(client.id()) +
                        " iteration " + std::to_string(iter) + ": non-finite meta loss");

    std::vector<Tensor> wrt = psi_leaf.tensors();
    const std::size_t psi_count = wrt.size();
    for (const Tensor& t : phi_leaf.tensors()) wrt.push_back(t);
    // phi legitimately drops out of the objective at eta_inner == 0
    auto grads = graph.gradients(loss, wrt, /*create_graph=*/false, /*allow_unreachable=*/true);

    psi = sgd_step(psi, std::span<const Tensor>(grads.data(), psi_count), cfg.eta_outer).detached();
    if (cfg.eta_adapt != 0.0)
      phi = sgd_step(phi, std::span<const Tensor>(grads.data() + psi_count, grads.size() - psi_count),
                     cfg.eta_adapt)
                .detached();
  }
  return {psi, phi};
}

// ---------------------------------------------------------------------------
// test-time adaptation
// ---------------------------------------------------------------------------

struct AdaptConfig {
  double eta_inner = 0.5;
  int max_steps = 1;            // E
  std::optional<int> patience;  // nullopt: run every step and keep the final model
};

struct AdaptResult {
  ModelParams personalized;
  std::vector<AdaptStepTrace> trace;  // rows for steps 0..stop_step
  int selected_step = 0;              // step of the returned model
  int stop_step = 0;                  // last step that ran
  bool entropy_warning = false;       // stopped on a non-finite entropy
};

namespace detail {

inline AdaptStepTrace trace_row(int step, const ModelParams& psi, const ModelParams& phi,
                                const Tensor& x, std::span<const int> curve_labels) {
  Tensor z = forward_prediction(psi, x);
  AdaptStepTrace row;
  row.step = step;
  row.per_loss = personalization_loss(phi, z).value();
  row.mean_entropy = mean_prediction_entropy(z);
  if (!curve_labels.empty()) row.accuracy = top1_accuracy(z, curve_labels).fraction();
  return row;
}

}  // namespace detail

// Multi-step fine-tuning of the prediction model on the full unlabeled
// client dataset, phi frozen. With a finite patience this is the
// entropy-early-stopped variant: run until the mean prediction entropy sets
// no new minimum for `patience` steps, then return the minimum-entropy
// checkpoint (step 0, the unadapted model, is a candidate). Without a
// patience all max_steps run and the final model is returned — with
// max_steps == 1 that is exactly the one-step adaptation rule.
//
// curve_labels, when provided, decorate the trace with per-step accuracy for
// reporting; they play no part in any adaptation decision.
inline AdaptResult test_adapt(const ModelParams& psi0, const ModelParams& phi,
                              const Tensor& x_unlabeled, const AdaptConfig& cfg,
                              std::span<const int> curve_labels = {}) {
  if (cfg.max_steps < 1) throw std::invalid_argument("test_adapt: max_steps must be >= 1");
  if (x_unlabeled.rank() != 2 || x_unlabeled.shape()[0] == 0)
    throw std::invalid_argument("test_adapt: empty dataset");

  AdaptResult result;
  ModelParams psi = psi0.detached();
  ModelParams phi_frozen = phi.detached();
  EntropyStopper stopper(cfg.patience);

  AdaptStepTrace row0 = detail::trace_row(0, psi, phi_frozen, x_unlabeled, curve_labels);
  result.trace.push_back(row0);
  ModelParams best = psi;
  int best_step = 0;
  stopper.observe(row0.mean_entropy);

  for (int step = 1; step <= cfg.max_steps; ++step) {
    Graph graph;
    ModelParams psi_leaf = psi.attached(graph);
    InnerAdaptResult inner =
        inner_adapt(psi_leaf, phi_frozen, x_unlabeled, cfg.eta_inner, /*track_meta_gradient=*/false);
    psi = inner.psi_tilde.detached();

    AdaptStepTrace row = detail::trace_row(step, psi, phi_frozen, x_unlabeled, curve_labels);
    result.trace.push_back(row);
    result.stop_step = step;

    if (!std::isfinite(row.mean_entropy)) {
      result.entropy_warning = true;
      break;
    }
    const bool should_stop = stopper.observe(row.mean_entropy);
    if (stopper.best_step() == step) {  // new global minimum at this step
      best = psi;
      best_step = step;
    }
    if (should_stop) break;
  }

  if (cfg.patience || result.entropy_warning) {
    result.personalized = best;
    result.selected_step = best_step;
  } else {
    result.personalized = psi;
    result.selected_step = result.stop_step;
  }
  return result;
}

}  // namespace fedtta
