#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <fedtta/autodiff.hpp>
#include <fedtta/rng.hpp>

namespace fedtta {

// Fully connected network: relu on hidden layers, identity on the output.
struct MlpSpec {
  std::vector<std::size_t> widths;  // input, hidden..., output

  void validate() const {
    if (widths.size() < 2) throw std::invalid_argument("MlpSpec: need at least input and output");
    for (std::size_t w : widths)
      if (w < 1) throw std::invalid_argument("MlpSpec: zero layer width");
  }

  std::size_t input_width() const { return widths.front(); }
  std::size_t output_width() const { return widths.back(); }
  std::size_t layer_count() const { return widths.size() - 1; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) n += widths[i] * widths[i + 1] + widths[i + 1];
    return n;
  }

  bool operator==(const MlpSpec&) const = default;

  // prediction net: two hidden layers of 200 units
  static MlpSpec prediction_default(std::size_t dim, std::size_t classes) {
    return MlpSpec{{dim, 200, 200, classes}};
  }
  // adaptation net: three hidden layers of 32 units, scalar output
  static MlpSpec adaptation_default(std::size_t classes) {
    return MlpSpec{{classes, 32, 32, 32, 1}};
  }
};

// Named, ordered parameter collection for one MLP. Tensors may be plain
// values or leaves of a live Graph; the forward functions work with either.
struct ModelParams {
  MlpSpec spec;
  std::vector<Tensor> weights;  // [in, out] per layer
  std::vector<Tensor> biases;   // [out] per layer

  // Glorot-uniform weights, zero biases, reproducible per seed
  static ModelParams init(const MlpSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(mix64(seed, 0x6d6c7000));
    ModelParams p;
    p.spec = spec;
    for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
      const std::size_t fan_in = spec.widths[l], fan_out = spec.widths[l + 1];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      std::vector<double> w(fan_in * fan_out);
      for (auto& v : w) v = rng.uniform(-bound, bound);
      p.weights.emplace_back(Shape{fan_in, fan_out}, std::move(w));
      p.biases.push_back(Tensor::zeros({fan_out}));
    }
    return p;
  }

  std::size_t parameter_count() const { return spec.parameter_count(); }

  // W0, b0, W1, b1, ... — the order used by grad lists and serialization
  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    out.reserve(2 * weights.size());
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.push_back(weights[l]);
      out.push_back(biases[l]);
    }
    return out;
  }

  static ModelParams from_tensors(const MlpSpec& spec, std::span<const Tensor> tensors) {
    ModelParams p;
    p.spec = spec;
    for (std::size_t i = 0; i + 1 < tensors.size(); i += 2) {
      p.weights.push_back(tensors[i]);
      p.biases.push_back(tensors[i + 1]);
    }
    return p;
  }

  ModelParams attached(Graph& g) const {
    ModelParams p;
    p.spec = spec;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      p.weights.push_back(g.leaf(weights[l]));
      p.biases.push_back(g.leaf(biases[l]));
    }
    return p;
  }

  ModelParams detached() const {
    ModelParams p;
    p.spec = spec;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      p.weights.push_back(weights[l].detached());
      p.biases.push_back(biases[l].detached());
    }
    return p;
  }
};

namespace detail {

inline Tensor forward_mlp(const ModelParams& p, const Tensor& x) {
  Tensor h = x;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    h = add(matmul(h, p.weights[l]), p.biases[l]);
    if (l + 1 < p.weights.size()) h = relu(h);
  }
  return h;
}

}  // namespace detail

// logits Z = f(X; psi), X is [B, d]
inline Tensor forward_prediction(const ModelParams& psi, const Tensor& x) {
  if (x.rank() != 2 || x.shape()[1] != psi.spec.input_width())
    throw TensorError("forward_prediction: input " + shape_string(x.shape()) +
                      " does not match model input width " +
                      std::to_string(psi.spec.input_width()));
  return detail::forward_mlp(psi, x);
}

// per-sample scores g(Z; phi), row-wise: [B, C] -> [B]
inline Tensor forward_adaptation(const ModelParams& phi, const Tensor& z) {
  if (z.rank() != 2 || z.shape()[1] != phi.spec.input_width())
    throw TensorError("forward_adaptation: logits " + shape_string(z.shape()) +
                      " do not match adaptation input width " +
                      std::to_string(phi.spec.input_width()));
  if (phi.spec.output_width() != 1)
    throw TensorError("forward_adaptation: adaptation net must output one scalar per sample");
  return reshape(detail::forward_mlp(phi, z), {z.shape()[0]});
}

// l_per = || g(Z; phi) ||_2 over the batch; order-independent up to fixed
// index-order summation
inline Tensor personalization_loss(const ModelParams& phi, const Tensor& z) {
  return l2_norm(forward_adaptation(phi, z));
}

// p - lr * g, elementwise over the parameter list; stays on the graph when
// the inputs are attached, which is how the adapted model remains
// differentiable with respect to the originals
inline ModelParams sgd_step(const ModelParams& p, std::span<const Tensor> grads, double lr) {
  std::vector<Tensor> current = p.tensors();
  if (grads.size() != current.size())
    throw TensorError("sgd_step: " + std::to_string(grads.size()) + " gradients for " +
                      std::to_string(current.size()) + " parameter tensors");
  std::vector<Tensor> next;
  next.reserve(current.size());
  for (std::size_t i = 0; i < current.size(); ++i)
    next.push_back(subtract(current[i], scalar_mul(grads[i], lr)));
  return ModelParams::from_tensors(p.spec, next);
}

inline bool params_bitwise_equal(const ModelParams& a, const ModelParams& b) {
  if (a.spec != b.spec) return false;
  for (std::size_t l = 0; l < a.weights.size(); ++l) {
    for (std::size_t i = 0; i < a.weights[l].size(); ++i)
      if (a.weights[l].at(i) != b.weights[l].at(i)) return false;
    for (std::size_t i = 0; i < a.biases[l].size(); ++i)
      if (a.biases[l].at(i) != b.biases[l].at(i)) return false;
  }
  return true;
}

inline double params_max_abs_diff(const ModelParams& a, const ModelParams& b) {
  double worst = 0.0;
  for (std::size_t l = 0; l < a.weights.size(); ++l) {
    for (std::size_t i = 0; i < a.weights[l].size(); ++i)
      worst = std::max(worst, std::abs(a.weights[l].at(i) - b.weights[l].at(i)));
    for (std::size_t i = 0; i < a.biases[l].size(); ++i)
      worst = std::max(worst, std::abs(a.biases[l].at(i) - b.biases[l].at(i)));
  }
  return worst;
}

}  // namespace fedtta
