#include <doctest.h>

#include <cmath>
#include <vector>

#include <fedtta/mlp.hpp>
#include <fedtta/rng.hpp>

#include "test_util.hpp"

using namespace fedtta;
using testutil::close;
using testutil::random_tensor;

TEST_SUITE_BEGIN("models");

TEST_CASE("init is deterministic and counts parameters") {
  MlpSpec spec{{2, 3, 2}};
  CHECK(spec.parameter_count() == 17);  // 2*3+3 + 3*2+2

  ModelParams a = ModelParams::init(spec, 42);
  ModelParams b = ModelParams::init(spec, 42);
  CHECK(params_bitwise_equal(a, b));

  ModelParams c = ModelParams::init(spec, 43);
  CHECK_FALSE(params_bitwise_equal(a, c));

  for (const Tensor& bias : a.biases)
    for (std::size_t i = 0; i < bias.size(); ++i) CHECK(bias.at(i) == 0.0);
}

TEST_CASE("init weight statistics over a seed sweep") {
  MlpSpec spec{{200, 200}};
  for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    ModelParams p = ModelParams::init(spec, seed);
    double total = 0.0;
    const double bound = std::sqrt(6.0 / 400.0);
    for (std::size_t i = 0; i < p.weights[0].size(); ++i) {
      total += p.weights[0].at(i);
      CHECK(std::abs(p.weights[0].at(i)) <= bound);
    }
    const double sample_mean = total / static_cast<double>(p.weights[0].size());
    CHECK(sample_mean > -0.01);
    CHECK(sample_mean < 0.01);
  }
}

TEST_CASE("forward_prediction on degenerate nets") {
  // all-zero parameters -> zero logits
  MlpSpec spec{{3, 4, 2}};
  ModelParams zero;
  zero.spec = spec;
  zero.weights = {Tensor::zeros({3, 4}), Tensor::zeros({4, 2})};
  zero.biases = {Tensor::zeros({4}), Tensor::zeros({2})};
  Rng rng(5);
  Tensor x = random_tensor(rng, {6, 3});
  Tensor z = forward_prediction(zero, x);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(z.at(i) == 0.0);

  // single linear layer with identity weights -> Z = X
  MlpSpec id_spec{{3, 3}};
  ModelParams id;
  id.spec = id_spec;
  id.weights = {Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1})};
  id.biases = {Tensor::zeros({3})};
  Tensor zi = forward_prediction(id, x);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(zi.at(i) == x.at(i));

  CHECK_THROWS_AS(forward_prediction(id, random_tensor(rng, {2, 4})), TensorError);
}

TEST_CASE("forward_prediction matches a by-hand computation") {
  // 2-4-3 net with fixed parameters, X = [[1, 0]]
  MlpSpec spec{{2, 4, 3}};
  ModelParams p;
  p.spec = spec;
  p.weights = {Tensor({2, 4}, {0.5, -1.0, 0.25, 2.0,
                               1.0, 0.5, -0.5, -2.0}),
               Tensor({4, 3}, {1.0, 0.0, -1.0,
                               0.5, 0.5, 0.5,
                               -1.0, 2.0, 0.0,
                               0.0, 1.0, 1.0})};
  p.biases = {Tensor({4}, {0.1, -0.2, 0.0, 0.3}), Tensor({3}, {0.0, 0.5, -0.5})};

  // hidden pre-activation: [0.6, -1.2, 0.25, 2.3]; relu: [0.6, 0, 0.25, 2.3]
  // out[0] = 0.6*1.0 + 0.25*(-1.0) + 0 = 0.35
  // out[1] = 0.25*2.0 + 2.3*1.0 + 0.5 = 3.3
  // out[2] = 0.6*(-1.0) + 2.3*1.0 - 0.5 = 1.2
  Tensor z = forward_prediction(p, Tensor({1, 2}, {1.0, 0.0}));
  CHECK(close(z.at(0, 0), 0.35, 0.0, 1e-15));
  CHECK(close(z.at(0, 1), 3.3, 0.0, 1e-15));
  CHECK(close(z.at(0, 2), 1.2, 0.0, 1e-15));
}

TEST_CASE("forward_adaptation is a row-wise map") {
  Rng rng(9);
  ModelParams phi = ModelParams::init(MlpSpec{{4, 8, 1}}, 11);
  Tensor z = random_tensor(rng, {5, 4});
  Tensor s = forward_adaptation(phi, z);
  CHECK(s.shape() == Shape{5});

  // permuting rows permutes outputs identically
  std::vector<std::size_t> perm = {3, 1, 4, 0, 2};
  std::vector<double> pz(z.size());
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) pz[i * 4 + j] = z.at(perm[i], j);
  Tensor s_perm = forward_adaptation(phi, Tensor({5, 4}, std::move(pz)));
  for (std::size_t i = 0; i < 5; ++i) CHECK(s_perm.at(i) == s.at(perm[i]));

  // duplicate row -> duplicate scalar
  std::vector<double> dup(2 * 4);
  for (std::size_t j = 0; j < 4; ++j) dup[j] = dup[4 + j] = z.at(0, j);
  Tensor s_dup = forward_adaptation(phi, Tensor({2, 4}, std::move(dup)));
  CHECK(s_dup.at(0) == s_dup.at(1));

  // perturbing one row leaves all other outputs unchanged
  std::vector<double> bumped(z.values().begin(), z.values().end());
  bumped[2 * 4 + 1] += 0.37;
  Tensor s_bumped = forward_adaptation(phi, Tensor({5, 4}, std::move(bumped)));
  for (std::size_t i = 0; i < 5; ++i)
    if (i != 2) CHECK(s_bumped.at(i) == s.at(i));
}

TEST_CASE("forward_adaptation matches a by-hand computation") {
  MlpSpec spec{{2, 2, 1}};
  ModelParams phi;
  phi.spec = spec;
  phi.weights = {Tensor({2, 2}, {1.0, -1.0, 0.5, 0.5}), Tensor({2, 1}, {2.0, 1.0})};
  phi.biases = {Tensor({2}, {0.0, 0.25}), Tensor({1}, {-0.1})};
  // z = [1, 2]: hidden pre = [1*1+2*0.5, -1+1+0.25] = [2.0, 0.25]; relu same
  // out = 2*2 + 0.25*1 - 0.1 = 4.15
  Tensor s = forward_adaptation(phi, Tensor({1, 2}, {1.0, 2.0}));
  CHECK(close(s.at(0), 4.15, 0.0, 1e-15));
}

TEST_CASE("personalization loss") {
  // adaptation net with zero weights outputs zero -> loss 0
  MlpSpec spec{{3, 2, 1}};
  ModelParams zero;
  zero.spec = spec;
  zero.weights = {Tensor::zeros({3, 2}), Tensor::zeros({2, 1})};
  zero.biases = {Tensor::zeros({2}), Tensor::zeros({1})};
  Rng rng(13);
  Tensor z = random_tensor(rng, {4, 3});
  CHECK(personalization_loss(zero, z).value() == 0.0);

  // g outputs [3, 4] -> 5: single linear layer picking coordinates
  MlpSpec pick{{2, 1}};
  ModelParams lin;
  lin.spec = pick;
  lin.weights = {Tensor({2, 1}, {1.0, 0.0})};
  lin.biases = {Tensor({1}, {0.0})};
  Tensor z2({2, 2}, {3.0, 9.0, 4.0, -7.0});
  CHECK(close(personalization_loss(lin, z2).value(), 5.0, 0.0, 1e-15));
}

TEST_CASE("personalization loss is permutation invariant") {
  Rng rng(21);
  ModelParams phi = ModelParams::init(MlpSpec{{6, 16, 16, 1}}, 3);
  Tensor z = random_tensor(rng, {32, 6});
  const double base = personalization_loss(phi, z).value();
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<std::size_t> perm(32);
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(perm);
    std::vector<double> pz(z.size());
    for (std::size_t i = 0; i < 32; ++i)
      for (std::size_t j = 0; j < 6; ++j) pz[i * 6 + j] = z.at(perm[i], j);
    const double permuted = personalization_loss(phi, Tensor({32, 6}, std::move(pz))).value();
    CHECK(close(permuted, base, 0.0, 1e-12));
  }
}

TEST_CASE("gradients of the personalization loss match finite differences") {
  Rng rng(31);
  ModelParams phi_init = ModelParams::init(MlpSpec{{3, 5, 1}}, 17);
  Tensor z_init = random_tensor(rng, {4, 3});

  // parameters: phi tensors followed by Z
  std::vector<Tensor> params = phi_init.tensors();
  params.push_back(z_init);

  auto build = [&](std::span<const Tensor> p) -> Tensor {
    ModelParams phi = ModelParams::from_tensors(phi_init.spec, p.subspan(0, p.size() - 1));
    return personalization_loss(phi, p[p.size() - 1]);
  };

  Graph g;
  std::vector<Tensor> leaves;
  for (const Tensor& p : params) leaves.push_back(g.leaf(p));
  Tensor loss = build(leaves);
  auto ad = grad(loss, leaves);
  auto fd = finite_diff_grad([&](std::span<const Tensor> p) { return build(p).value(); }, params);
  for (std::size_t t = 0; t < ad.size(); ++t)
    for (std::size_t i = 0; i < ad[t].size(); ++i)
      CHECK(close(ad[t].at(i), fd[t].at(i), 1e-5, 1e-8));
}

TEST_CASE("sgd_step arithmetic") {
  ModelParams p = ModelParams::init(MlpSpec{{2, 2}}, 1);
  std::vector<Tensor> grads = {Tensor::full({2, 2}, 2.0), Tensor::full({2}, 1.0)};
  ModelParams q = sgd_step(p, grads, 0.5);
  for (std::size_t i = 0; i < 4; ++i) CHECK(q.weights[0].at(i) == p.weights[0].at(i) - 1.0);
  for (std::size_t i = 0; i < 2; ++i) CHECK(q.biases[0].at(i) == -0.5);
}

TEST_SUITE_END();
