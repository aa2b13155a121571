#pragma once

// Shared helpers for the unit tests: finite differences, random data and
// small models.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "pdl/autodiff.hpp"
#include "pdl/model.hpp"
#include "pdl/tree.hpp"
#include "pdl/treebank.hpp"

namespace pdl::test {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = nd(rng);
  return t;
}

inline double rel_error(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-6});
  return std::abs(a - b) / denom;
}

/// Builds a scalar from graph inputs. Called once for the analytic gradient
/// and twice per coordinate for central differences.
using LossFn = std::function<ad::Var(ad::Graph&, const std::vector<ad::Var>&)>;

/// Largest relative error between backward() and central differences over
/// every coordinate of every input.
inline double gradient_check(std::vector<Tensor> inputs, const LossFn& f, double eps = 1e-5) {
  std::vector<Tensor> analytic;
  {
    ad::Graph g;
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(g.input(t));
    g.backward(f(g, vars));
    for (const auto& v : vars) analytic.push_back(v.grad());
  }
  auto eval = [&] {
    ad::Graph g;
    std::vector<ad::Var> vars;
    for (const auto& t : inputs) vars.push_back(g.input(t));
    return f(g, vars).value().item();
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double keep = inputs[i][j];
      inputs[i][j] = keep + eps;
      const double up = eval();
      inputs[i][j] = keep - eps;
      const double down = eval();
      inputs[i][j] = keep;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[i].empty() ? 0.0 : analytic[i][j];
      if (std::abs(a) < 1e-8 && std::abs(numeric) < 1e-8) continue;
      worst = std::max(worst, rel_error(a, numeric));
    }
  }
  return worst;
}

/// sum(x * w) for fixed random weights w, so every output entry matters.
inline ad::Var weighted_sum(ad::Graph& g, ad::Var x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Tensor w = random_tensor(x.shape(), rng);
  return ad::sum(ad::mul(x, g.constant(std::move(w))));
}

inline ModelConfig tiny_config(ModelMode mode, int vocab, std::uint64_t seed = 1) {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.dim = 16;
  c.vocab = vocab;
  c.max_seq_len = 32;
  c.max_depth = 8;
  c.mode = mode;
  c.seed = seed;
  c.init_std = 0.3;
  return c;
}

/// All binary trees over leaves [first, last].
inline std::vector<BinaryTree> all_trees(int first, int last) {
  if (first == last) return {BinaryTree::leaf(first)};
  std::vector<BinaryTree> out;
  for (int split = first; split < last; ++split)
    for (const auto& l : all_trees(first, split))
      for (const auto& r : all_trees(split + 1, last)) out.push_back(BinaryTree::node(l, r));
  return out;
}

/// Uniform-ish random binary tree over [first, last] (random split points).
inline BinaryTree random_tree(int first, int last, std::mt19937_64& rng) {
  if (first == last) return BinaryTree::leaf(first);
  std::uniform_int_distribution<int> pick(first, last - 1);
  const int split = pick(rng);
  return BinaryTree::node(random_tree(first, split, rng), random_tree(split + 1, last, rng));
}

inline long long catalan(int n) {
  long long c = 1;
  for (int i = 0; i < n; ++i) c = c * 2 * (2 * i + 1) / (i + 2);
  return c;
}

/// A random tree over `words` fresh word ids in [2, vocab).
inline Sequence random_sequence(int words, int vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> id(2, vocab - 1);
  std::vector<int> ids;
  for (int i = 0; i < words; ++i) ids.push_back(id(rng));
  return make_sequence(random_tree(0, words - 1, rng), ids);
}

inline double model_loss_value(const PushdownModel& model, const BatchData& bd, double lambda) {
  ad::Graph g(false);
  return model_loss(model.forward(g, bd.input), bd.targets, lambda).total.value().item();
}

/// Largest relative error between backprop parameter gradients and central
/// differences, over every parameter entry.
inline double model_gradient_error(PushdownModel& model, const BatchData& bd, double lambda, double eps = 1e-5) {
  model.zero_grad();
  {
    ad::Graph g(true);
    g.backward(model_loss(model.forward(g, bd.input), bd.targets, lambda).total);
  }
  double worst = 0.0;
  for (ad::Parameter* p : model.parameters()) {
    for (std::size_t j = 0; j < p->value.size(); ++j) {
      const double keep = p->value[j];
      p->value[j] = keep + eps;
      const double up = model_loss_value(model, bd, lambda);
      p->value[j] = keep - eps;
      const double down = model_loss_value(model, bd, lambda);
      p->value[j] = keep;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = p->grad[j];
      if (std::abs(a) < 1e-8 && std::abs(numeric) < 1e-8) continue;
      worst = std::max(worst, rel_error(a, numeric));
    }
  }
  return worst;
}

}  // namespace pdl::test
