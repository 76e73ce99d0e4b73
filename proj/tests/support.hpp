#pragma once

// Shared fixtures for the test binaries.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "microtune/autodiff.hpp"

namespace microtune::testing {

using linalg::Matrix;
using linalg::Vec;

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Matrix m(rows, cols);
  for (double& x : m.data()) x = dist(rng);
  return m;
}

inline Vec random_vec(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  return random_matrix(1, n, rng, scale).data();
}

inline Image random_image(std::size_t side, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(side, side);
  for (double& p : img.pixels) p = u(rng);
  return img;
}

/// Encoder with grid x grid tokens of dim d, classifier with C classes and
/// every trainable tensor moved away from its initial value.
inline autodiff::Model random_model(std::size_t grid, std::size_t d, std::size_t C, std::mt19937_64& rng,
                                    std::size_t layers = 3) {
  encoder::EncoderConfig cfg;
  cfg.patch = 4;
  cfg.image_side = grid * cfg.patch;
  cfg.dim = d;
  cfg.shared_dim = d;
  cfg.layers = layers;
  cfg.mlp_ratio = 2;
  cfg.layer_scale = 1.0 / std::sqrt(static_cast<double>(d));
  autodiff::Model m;
  m.encoder = encoder::EncoderWeights::toy(cfg, rng());
  for (auto& [name, t] : m.encoder.layer_norm_params()) {
    const bool gamma = name.ends_with("gamma");
    for (double& x : t->data()) x = (gamma ? 1.0 : 0.0) + std::normal_distribution<double>(0.0, 0.2)(rng);
  }
  m.bank.w_llm = random_matrix(C, d, rng);
  m.bank.w_llm_star = m.bank.w_llm;
  for (double& x : m.bank.w_llm_star.data()) x += std::normal_distribution<double>(0.0, 0.1)(rng);
  m.pool.wq = random_matrix(d, d, rng, 0.5 / std::sqrt(static_cast<double>(d)));
  m.pool.wk = random_matrix(d, d, rng, 0.5 / std::sqrt(static_cast<double>(d)));
  m.pool.wv = random_matrix(d, d, rng, 0.5);
  m.pool.empty_token = random_matrix(1, d, rng, 0.5);
  return m;
}

/// Connected graph on n nodes: a random spanning tree plus extra edges, all
/// weights in [0.1, 1].
inline linalg::SparseSymMatrix random_connected_graph(std::size_t n, std::mt19937_64& rng, double extra_density = 0.15) {
  std::uniform_real_distribution<double> w(0.1, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  linalg::SparseSymMatrix g(n);
  for (std::size_t i = 1; i < n; ++i) g.set(std::uniform_int_distribution<std::size_t>(0, i - 1)(rng), i, w(rng));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (u(rng) < extra_density) g.set(i, j, w(rng));
  return g;
}

struct PlantedTokens {
  Matrix tokens;                   // n x d
  std::vector<std::size_t> first;  // ascending indices of cluster A
  std::vector<std::size_t> second;
};

/// Two clusters around random orthogonal unit directions. Every intra-cluster
/// cosine is >= 0.9 and every inter-cluster cosine <= 0.1 (checked; the
/// instance is redrawn otherwise). Cluster A occupies a random subset.
inline PlantedTokens planted_two_clusters(std::size_t n, std::size_t d, std::mt19937_64& rng, double noise = 0.015) {
  std::normal_distribution<double> g(0.0, 1.0);
  for (;;) {
    Vec a(d), b(d);
    for (auto& x : a) x = g(rng);
    for (auto& x : b) x = g(rng);
    const double na = linalg::norm2(a);
    for (auto& x : a) x /= na;
    const double ab = linalg::dot(a, b);
    for (std::size_t j = 0; j < d; ++j) b[j] -= ab * a[j];
    const double nb = linalg::norm2(b);
    for (auto& x : b) x /= nb;

    const std::size_t size_a = std::uniform_int_distribution<std::size_t>(n / 5, n - n / 5)(rng);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int> in_a(n, 0);
    for (std::size_t k = 0; k < size_a; ++k) in_a[order[k]] = 1;

    PlantedTokens p;
    p.tokens = Matrix(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      const Vec& base = in_a[i] ? a : b;
      for (std::size_t j = 0; j < d; ++j) p.tokens(i, j) = base[j] + noise * g(rng);
      (in_a[i] ? p.first : p.second).push_back(i);
    }
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i)
      for (std::size_t j = i + 1; j < n && ok; ++j) {
        const double c = linalg::cosine_sim(p.tokens.row(i), p.tokens.row(j));
        ok = in_a[i] == in_a[j] ? c >= 0.9 : c <= 0.1;
      }
    if (ok) return p;
  }
}

}  // namespace microtune::testing
