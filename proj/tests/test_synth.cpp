#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "microtune/synth.hpp"
#include "microtune/trainer.hpp"

using namespace microtune;
using linalg::Matrix;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

struct ProbeSet {
  Eigen::MatrixXd x;  // one row per image
  std::vector<int> y;
};

// Ridge regression onto one-hot targets, solved in the dual so wide
// feature vectors stay cheap. Returns held-out accuracy.
double ridge_probe(const ProbeSet& train, const ProbeSet& test, int classes, double lambda = 1e-2) {
  const Eigen::RowVectorXd mu = train.x.colwise().mean();
  const Eigen::MatrixXd xtr = train.x.rowwise() - mu;
  const Eigen::MatrixXd xte = test.x.rowwise() - mu;
  Eigen::MatrixXd y = Eigen::MatrixXd::Constant(xtr.rows(), classes, -1.0 / classes);
  for (Eigen::Index i = 0; i < xtr.rows(); ++i) y(i, train.y[i]) += 1.0;
  const Eigen::MatrixXd k = xtr * xtr.transpose() + lambda * Eigen::MatrixXd::Identity(xtr.rows(), xtr.rows());
  const Eigen::MatrixXd alpha = k.ldlt().solve(y);
  const Eigen::MatrixXd scores = xte * (xtr.transpose() * alpha);
  int correct = 0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best;
    scores.row(i).maxCoeff(&best);
    correct += best == test.y[i];
  }
  return static_cast<double>(correct) / static_cast<double>(scores.rows());
}

}  // namespace

TEST_CASE("two classes of ten split into 16 train and 4 test records") {
  synth::SynthSpec spec;
  spec.classes = 2;
  spec.per_class = 10;
  const auto dir = scratch("microtune_synth_split");
  const auto d = synth::generate(spec, dir);
  CHECK(d.train.size() == 16);
  CHECK(d.test.size() == 4);
  int test_class0 = 0;
  for (const auto& r : d.test) test_class0 += r.label == 0;
  CHECK(test_class0 == 2);
  CHECK(encoder::read_manifest(dir / "train.tsv").size() == 16);
  CHECK(synth::read_glyphs(dir / "glyphs.tsv").size() == 20);
  fs::remove_all(dir);
}

TEST_CASE("the same seed writes identical files") {
  synth::SynthSpec spec;
  spec.classes = 3;
  spec.per_class = 4;
  const auto a = scratch("microtune_synth_a"), b = scratch("microtune_synth_b");
  synth::generate(spec, a);
  synth::generate(spec, b);
  for (const char* f : {"train.tsv", "test.tsv", "glyphs.tsv"}) CHECK(slurp(a / f) == slurp(b / f));
  const auto ra = encoder::read_manifest(a / "train.tsv"), rb = encoder::read_manifest(b / "train.tsv");
  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const std::string bytes = slurp(ra[i].path);
    CHECK_FALSE(bytes.empty());
    CHECK(bytes == slurp(rb[i].path));
  }
  spec.seed = 8;
  const auto c = scratch("microtune_synth_c");
  synth::generate(spec, c);
  CHECK(slurp(ra[0].path) != slurp(encoder::read_manifest(c / "train.tsv")[0].path));
  for (const auto& dir : {a, b, c}) fs::remove_all(dir);
}

TEST_CASE("glyphs fit inside the image and the codebook is symmetric") {
  synth::SynthSpec spec;
  const auto book = synth::glyph_codebook(spec);
  REQUIRE(book.size() == spec.classes);
  for (const auto& g : book)
    for (std::size_t r = 0; r < spec.glyph; ++r)
      for (std::size_t c = 0; c < spec.glyph; ++c) CHECK(g.at(r, c) == g.at(r, spec.glyph - 1 - c));
  for (std::size_t i = 0; i < book.size(); ++i)
    for (std::size_t j = i + 1; j < book.size(); ++j) CHECK(book[i].pixels != book[j].pixels);
  auto bad = spec;
  bad.glyph = 60;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("class information lives in the glyph region only") {
  synth::SynthSpec spec;
  spec.per_class = 60;
  const auto dir = scratch("microtune_synth_probe");
  const auto d = synth::generate(spec, dir);
  const auto glyphs = synth::read_glyphs(dir / "glyphs.tsv");
  const std::size_t g = spec.glyph, side = spec.image_side;

  ProbeSet local_tr, local_te, rest_tr, rest_te;
  auto add = [&](const synth::GlyphRecord& rec) {
    const Image img = read_pgm(dir / "images" / (rec.id + ".pgm"));
    Eigen::RowVectorXd local(g * g), rest(side * side);
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t c = 0; c < side; ++c) {
        const bool inside = r >= rec.top && r < rec.top + g && c >= rec.left && c < rec.left + g;
        rest[r * side + c] = inside ? 0.0 : img.at(r, c);
        if (inside) local[(r - rec.top) * g + (c - rec.left)] = img.at(r, c);
      }
    auto push = [](ProbeSet& s, const Eigen::RowVectorXd& row, int y) {
      s.x.conservativeResize(s.x.rows() + 1, row.size());
      s.x.row(s.x.rows() - 1) = row;
      s.y.push_back(y);
    };
    push(rec.train ? local_tr : local_te, local, rec.label);
    push(rec.train ? rest_tr : rest_te, rest, rec.label);
  };
  for (const auto& rec : glyphs) add(rec);
  const int C = static_cast<int>(spec.classes);
  const double local_acc = ridge_probe(local_tr, local_te, C);
  const double rest_acc = ridge_probe(rest_tr, rest_te, C);
  MESSAGE("glyph-region probe " << local_acc << ", complement probe " << rest_acc);
  CHECK(local_acc >= 0.95);
  CHECK(rest_acc <= 1.0 / C + 0.1);
  fs::remove_all(dir);
}

TEST_CASE("with the glyph removed the CLS branch is at chance") {
  synth::SynthSpec spec;
  const auto dir = scratch("microtune_synth_masked");
  synth::generate(spec, dir);
  const encoder::EncoderConfig enc_cfg;
  const auto enc = encoder::EncoderWeights::toy(enc_cfg, 2024);
  const synth::DescriptionOptions opts;
  const auto descs = synth::descriptions_from_anchors(synth::aligned_anchors(spec, enc, opts), opts);
  const auto model = trainer::build_model(enc_cfg, 2024, descs);

  trainer::TrainConfig cfg;
  cfg.forward.fusion = tokenfusion::FusionMode::kGlobalOnly;
  trainer::Dataset masked;
  for (const auto& rec : synth::read_glyphs(dir / "glyphs.tsv")) {
    trainer::Sample s;
    s.id = rec.id;
    s.label = rec.label;
    s.image = read_pgm(dir / "images" / (rec.id + ".pgm"));
    for (std::size_t r = rec.top; r < rec.top + spec.glyph; ++r)
      for (std::size_t c = rec.left; c < rec.left + spec.glyph; ++c) s.image.at(r, c) = 0.0;
    masked.samples.push_back(std::move(s));
  }
  const double acc = trainer::evaluate(model, masked, cfg);
  MESSAGE("masked CLS accuracy " << acc);
  CHECK(std::abs(acc - 1.0 / spec.classes) <= 0.1);
  fs::remove_all(dir);
}

TEST_CASE("description anchors are near-orthogonal in the generated set") {
  synth::SynthSpec spec;
  const auto enc = encoder::EncoderWeights::toy(encoder::EncoderConfig{}, 2024);
  const synth::DescriptionOptions opts;
  const auto path = fs::temp_directory_path() / "microtune_synth_descs.mcde";
  classifier::save_descriptions(path, synth::descriptions_from_anchors(synth::aligned_anchors(spec, enc, opts), opts));
  const auto set = classifier::load_descriptions(path, spec.classes);
  const auto bank = classifier::init_classifiers(set);
  for (std::size_t i = 0; i < spec.classes; ++i) {
    CHECK(set.per_class[i].size() == opts.per_class);
    for (const auto& e : set.per_class[i]) CHECK(linalg::norm2(e) == doctest::Approx(1.0).epsilon(1e-6));
    for (std::size_t j = i + 1; j < spec.classes; ++j)
      CHECK(std::abs(linalg::cosine_sim(bank.w_llm.row(i), bank.w_llm.row(j))) <= 0.2);
  }
  fs::remove(path);
}

TEST_CASE("zero noise repeats the anchor and keeps prototypes orthonormal") {
  const Matrix anchors = synth::random_anchors(5, 16, 3);
  synth::DescriptionOptions opts;
  opts.noise = 0.0;
  const auto set = synth::descriptions_from_anchors(anchors, opts);
  for (const auto& cls : set.per_class)
    for (const auto& e : cls) CHECK(e == cls.front());
  const auto bank = classifier::init_classifiers(set);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      CHECK(linalg::dot(bank.w_llm.row(i), bank.w_llm.row(j)) == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-12));
}

TEST_CASE("Lowdin orthonormalization returns orthonormal rows close to the input") {
  const Matrix a(2, 2, {1.0, 0.1, 0.1, 1.0});
  const Matrix q = synth::lowdin_orthonormalize(a);
  CHECK(std::abs(linalg::dot(q.row(0), q.row(1))) < 1e-14);
  CHECK(linalg::norm2(q.row(0)) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(q(0, 0) > 0.99);
}
