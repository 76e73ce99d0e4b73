#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "microtune/classifier.hpp"
#include "support.hpp"

using namespace microtune;
using classifier::DescriptionEmbeddingSet;
using linalg::Vec;

namespace {

DescriptionEmbeddingSet random_set(std::size_t C, std::size_t M, std::size_t d, std::mt19937_64& rng) {
  DescriptionEmbeddingSet s;
  s.dim = d;
  s.per_class.resize(C);
  for (auto& cls : s.per_class)
    for (std::size_t m = 0; m < M; ++m) cls.push_back(testing::random_vec(d, rng));
  return s;
}

std::filesystem::path temp(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST_CASE("one embedding per class becomes the prototype row") {
  std::mt19937_64 rng(1);
  const auto s = random_set(3, 1, 4, rng);
  const auto bank = classifier::init_classifiers(s);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t j = 0; j < 4; ++j) CHECK(bank.w_llm(c, j) == s.per_class[c][0][j]);
}

TEST_CASE("prototype rows are the arithmetic mean of the class embeddings") {
  std::mt19937_64 rng(2);
  const auto s = random_set(5, 3, 6, rng);
  const auto bank = classifier::init_classifiers(s);
  for (std::size_t c = 0; c < 5; ++c)
    for (std::size_t j = 0; j < 6; ++j) {
      const long double mean =
          (static_cast<long double>(s.per_class[c][0][j]) + s.per_class[c][1][j] + s.per_class[c][2][j]) / 3;
      CHECK(std::abs(bank.w_llm(c, j) - static_cast<double>(mean)) < 1e-15);
    }
  // Both heads start identical.
  CHECK(bank.w_llm == bank.w_llm_star);
}

TEST_CASE("normalized averaging uses unit embeddings") {
  DescriptionEmbeddingSet s;
  s.dim = 2;
  s.per_class = {{{10, 0}, {0, 1}}};
  classifier::InitOptions o;
  o.normalize_descriptions = true;
  const auto bank = classifier::init_classifiers(s, o);
  CHECK(bank.w_llm(0, 0) == doctest::Approx(0.5));
  CHECK(bank.w_llm(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("init_classifiers errors: empty class and degenerate prototype") {
  DescriptionEmbeddingSet s;
  s.dim = 2;
  s.per_class = {{{1, 0}}, {}};
  CHECK_THROWS_WITH_AS(classifier::init_classifiers(s), "class 1 has no descriptions", std::invalid_argument);

  s.per_class = {{{1, 2}, {-1, -2 + 1e-12}}};
  CHECK_THROWS_WITH_AS(classifier::init_classifiers(s), "degenerate prototype", linalg::NumericError);
}

TEST_CASE("MCDE round trip keeps f32 values exactly") {
  std::mt19937_64 rng(3);
  auto s = random_set(4, 3, 5, rng);
  // The container stores f32; start from f32-representable values.
  for (auto& cls : s.per_class)
    for (auto& e : cls)
      for (double& x : e) x = static_cast<float>(x);
  const auto path = temp("microtune_roundtrip.mcde");
  classifier::save_descriptions(path, s);
  const auto back = classifier::load_descriptions(path);
  CHECK(back.dim == 5);
  CHECK(back.per_class == s.per_class);
  std::filesystem::remove(path);
}

TEST_CASE("load_descriptions: small file, class-count check and malformed input") {
  DescriptionEmbeddingSet s;
  s.dim = 4;
  s.per_class = {{{1, 0, 0, 0}}, {{0, 1, 0, 0}}};
  const auto path = temp("microtune_small.mcde");
  classifier::save_descriptions(path, s);
  CHECK(classifier::load_descriptions(path).classes() == 2);
  CHECK_THROWS_AS(classifier::load_descriptions(path, 3), std::invalid_argument);

  // Class 1 declares zero descriptions.
  {
    std::ofstream out(path, std::ios::binary);
    auto u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
    out.write("MCDE", 4);
    u32(1);
    u32(2);
    u32(1);
    u32(1);
    const float one = 1.0f;
    out.write(reinterpret_cast<const char*>(&one), 4);
    u32(0);
  }
  CHECK_THROWS_WITH_AS(classifier::load_descriptions(path), "class 1 has no descriptions", std::invalid_argument);

  // Truncated payload.
  {
    std::ofstream out(path, std::ios::binary);
    out.write("MCDE\x01\x00\x00\x00\x02\x00", 10);
  }
  CHECK_THROWS(classifier::load_descriptions(path));
  std::filesystem::remove(path);
  CHECK_THROWS(classifier::load_descriptions(temp("microtune_missing.mcde")));
}
