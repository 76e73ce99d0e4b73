#include <doctest.h>

#include <cmath>
#include <random>

#include "microtune/pseudolabel.hpp"
#include "oracle.hpp"
#include "support.hpp"

using namespace microtune;
using linalg::Matrix;
using linalg::Vec;
using pseudolabel::BlendMode;

TEST_CASE("multi_crop: a unit scale range gives the full frame") {
  std::mt19937_64 rng(1);
  const Image img = testing::random_image(24, rng);
  const auto set = pseudolabel::multi_crop(img, 3, 1.0, 1.0, rng, 24, 8);
  REQUIRE(set.views.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(set.windows[i].side == 24.0);
    CHECK(set.windows[i].top == 0.0);
    for (std::size_t p = 0; p < img.pixels.size(); ++p) CHECK(std::abs(set.views[i].pixels[p] - img.pixels[p]) < 1e-12);
  }
}

TEST_CASE("multi_crop is deterministic for a fixed stream") {
  std::mt19937_64 src(2);
  const Image img = testing::random_image(32, src);
  std::mt19937_64 a(9), b(9);
  const auto x = pseudolabel::multi_crop(img, 1, 0.5, 0.9, a, 16, 8);
  const auto y = pseudolabel::multi_crop(img, 1, 0.5, 0.9, b, 16, 8);
  CHECK(x.views[0].pixels == y.views[0].pixels);
  CHECK(x.windows[0].top == y.windows[0].top);
}

TEST_CASE("multi_crop keeps every side inside the configured scale band") {
  std::mt19937_64 rng(3);
  const Image img = testing::random_image(56, rng);
  for (int t = 0; t < 20; ++t) {
    const auto set = pseudolabel::multi_crop(img, 8, 0.5, 0.9, rng, 56, 16);
    REQUIRE(set.windows.size() == 8);
    for (const auto& w : set.windows) {
      CHECK(w.side >= 0.5 * 56 - 1e-12);
      CHECK(w.side <= 0.9 * 56 + 1e-12);
      CHECK(w.scale == doctest::Approx(w.side / 56.0));
      CHECK(w.top >= 0.0);
      CHECK(w.top + w.side <= 56.0 + 1e-9);
      CHECK(w.left + w.side <= 56.0 + 1e-9);
    }
    for (const auto& v : set.views) CHECK(v.height == 56);
  }
}

TEST_CASE("multi_crop rejects an image below the minimum side") {
  std::mt19937_64 rng(4);
  CHECK_THROWS_AS(pseudolabel::multi_crop(Image(8, 8), 2, 0.5, 0.9, rng, 8, 16), std::invalid_argument);
}

TEST_CASE("crop_weights: identical crops and a single crop") {
  const Matrix same(4, 3, {1, 2, 3, 1, 2, 3, 1, 2, 3, 1, 2, 3});
  for (double w : pseudolabel::crop_weights(Vec{0.5, -1, 2}, same)) CHECK(std::abs(w - 0.25) < 1e-15);
  CHECK(pseudolabel::crop_weights(Vec{1, 0}, Matrix(1, 2, {0.3, 0.4})) == Vec{1.0});
}

TEST_CASE("crop weights, aggregation and pseudo-logits match the direct formulas") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.01, 10.0);
  for (int t = 0; t < 50; ++t) {
    const std::size_t N = 1 + rng() % 16, d = 2 + rng() % 30, C = 2 + rng() % 8;
    const Vec f = testing::random_vec(d, rng);
    const Matrix crops = testing::random_matrix(N, d, rng);
    const Vec w = pseudolabel::crop_weights(f, crops);
    const auto w_ref = oracle::crop_weights(f, crops);
    double sum = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      CHECK(std::abs(w[i] - static_cast<double>(w_ref[i])) <= 1e-10);
      sum += w[i];
    }
    CHECK(std::abs(sum - 1.0) <= 1e-12);

    // Rescaling every embedding leaves the weights unchanged.
    Matrix scaled = crops;
    for (std::size_t i = 0; i < N; ++i) {
      const double k = u(rng);
      for (double& x : scaled.row(i)) x *= k;
    }
    Vec fs = f;
    const double kf = u(rng);
    for (double& x : fs) x *= kf;
    const Vec w2 = pseudolabel::crop_weights(fs, scaled);
    for (std::size_t i = 0; i < N; ++i) CHECK(std::abs(w2[i] - w[i]) <= 1e-12);

    const Vec agg = pseudolabel::aggregate_views(crops, w);
    const auto agg_ref = oracle::aggregate(crops, w_ref);
    for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(agg[j] - static_cast<double>(agg_ref[j])) <= 1e-10);

    classifier::ClassifierBank bank;
    bank.w_llm = testing::random_matrix(C, d, rng);
    bank.w_llm_star = testing::random_matrix(C, d, rng);
    const Vec p = pseudolabel::clip_pseudo_logits(agg, bank);
    // The frozen head, not the trained one.
    const auto p_ref = oracle::cosine_logits(oracle::to_real(agg), bank.w_llm);
    for (std::size_t c = 0; c < C; ++c) CHECK(std::abs(p[c] - static_cast<double>(p_ref[c])) <= 1e-10);
  }
}

TEST_CASE("aggregate_views: uniform and one-hot weights") {
  const Matrix crops(2, 2, {1, 2, 3, 6});
  CHECK(pseudolabel::aggregate_views(crops, Vec{0.5, 0.5}) == Vec{2, 4});
  CHECK(pseudolabel::aggregate_views(crops, Vec{0, 1}) == Vec{3, 6});
}

TEST_CASE("clip_pseudo_logits: aligned and orthogonal embeddings") {
  classifier::ClassifierBank bank;
  bank.w_llm = Matrix::identity(3);
  bank.w_llm_star = Matrix(3, 3, 1.0);
  CHECK(pseudolabel::clip_pseudo_logits(Vec{0, 0, 4}, bank) == Vec{0, 0, 1});
  bank.w_llm = Matrix(2, 3, {1, 0, 0, 0, 1, 0});
  CHECK(pseudolabel::clip_pseudo_logits(Vec{0, 0, 1}, bank) == Vec{0, 0});
}

TEST_CASE("dynamic_aggregate matches the convex blend with lowest-index ties") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> g(0.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    const std::size_t C = 2 + rng() % 8;
    const Vec p = testing::random_vec(C, rng), tf = testing::random_vec(C, rng);
    const double gamma = t == 0 ? 0.0 : t == 1 ? 1.0 : g(rng);
    const auto d = pseudolabel::dynamic_aggregate(p, tf, gamma);
    const auto ref = oracle::blend(p, tf, gamma);
    for (std::size_t c = 0; c < C; ++c) {
      CHECK(std::abs(d.blended[c] - static_cast<double>(ref.blended[c])) <= 1e-10);
      CHECK(d.blended[c] == gamma * p[c] + (1.0 - gamma) * tf[c]);
    }
    CHECK(d.label == ref.label);
    CHECK(d.pseudo_logits_clip == p);
    CHECK(d.tokenfusion_logits == tf);
  }
  CHECK(pseudolabel::dynamic_aggregate(Vec{1, 3, 3}, Vec{1, 3, 3}, 0.5).label == 1);
}

TEST_CASE("dynamic_aggregate endpoints follow a single source") {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 200; ++t) {
    const Vec p = testing::random_vec(6, rng), tf = testing::random_vec(6, rng);
    CHECK(pseudolabel::dynamic_aggregate(p, tf, 1.0).label == pseudolabel::argmax_lowest(p));
    CHECK(pseudolabel::dynamic_aggregate(p, tf, 0.0).label == pseudolabel::argmax_lowest(tf));
    // Equal sources: the label does not depend on gamma.
    CHECK(pseudolabel::dynamic_aggregate(p, p, 0.3).label == pseudolabel::dynamic_aggregate(p, p, 0.8).label);
  }
}

TEST_CASE("dynamic_aggregate: margin, softmax blend and argument checks") {
  const auto d = pseudolabel::dynamic_aggregate(Vec{0.1, 0.5, 0.2}, Vec{0.1, 0.5, 0.2}, 0.5);
  CHECK(d.margin == doctest::Approx(0.3));

  const Vec p{0.3, 0.1}, t{0.0, 0.2};
  const auto s = pseudolabel::dynamic_aggregate(p, t, 0.5, BlendMode::kSoftmax, 0.1);
  const Vec sp = linalg::softmax(Vec{3.0, 1.0}), st = linalg::softmax(Vec{0.0, 2.0});
  for (std::size_t c = 0; c < 2; ++c) CHECK(std::abs(s.blended[c] - 0.5 * (sp[c] + st[c])) < 1e-15);

  CHECK_THROWS_AS(pseudolabel::dynamic_aggregate(p, t, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(pseudolabel::dynamic_aggregate(p, Vec{1}, 0.5), std::invalid_argument);
  CHECK(pseudolabel::parse_blend_mode("softmax") == BlendMode::kSoftmax);
  CHECK(pseudolabel::to_string(BlendMode::kRaw) == "raw");
}
