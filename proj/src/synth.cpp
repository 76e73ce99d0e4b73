#include "microtune/synth.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "microtune/autodiff.hpp"

namespace microtune::synth {

namespace {

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Lattice of uniform values, interpolated with smoothstep weights.
double value_noise(const Matrix& lattice, double y, double x) {
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const double fy = smoothstep(y - static_cast<double>(y0));
  const double fx = smoothstep(x - static_cast<double>(x0));
  const double top = (1 - fx) * lattice(y0, x0) + fx * lattice(y0, x0 + 1);
  const double bottom = (1 - fx) * lattice(y0 + 1, x0) + fx * lattice(y0 + 1, x0 + 1);
  return (1 - fy) * top + fy * bottom;
}

std::string image_id(std::size_t label, std::size_t index) {
  std::ostringstream os;
  os << 'c' << label << '_' << std::setfill('0') << std::setw(3) << index;
  return os.str();
}

}  // namespace

void SynthSpec::validate() const {
  auto fail = [](const std::string& why) { throw std::invalid_argument("synth: " + why); };
  if (classes < 2) fail("need at least 2 classes");
  if (per_class < 2) fail("need at least 2 images per class");
  if (glyph == 0 || glyph + 2 * border > image_side) fail("glyph does not fit inside the image");
  if (texture_cell == 0) fail("texture_cell must be positive");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) fail("train_fraction must lie in (0, 1)");
  if (class_delta == 0 || class_delta > glyph * glyph / 2) fail("class_delta out of range");
  if (grid_aligned && (border % glyph != 0 || image_side % glyph != 0))
    fail("grid-aligned glyphs need border and image_side to be multiples of the glyph size");
}

std::vector<Image> glyph_codebook(const SynthSpec& spec) {
  const std::size_t g = spec.glyph;
  const std::size_t half = (g + 1) / 2;
  auto rng = make_stream(spec.seed, "glyph-codebook", 0, StreamPurpose::kSynth);
  std::bernoulli_distribution coin(0.5);
  Image base(g, g);
  for (std::size_t r = 0; r < g; ++r)
    for (std::size_t c = 0; c < half; ++c) base.at(r, c) = base.at(r, g - 1 - c) = coin(rng) ? 1.0 : 0.0;

  std::vector<std::pair<std::size_t, std::size_t>> cells;
  for (std::size_t r = 0; r < g; ++r)
    for (std::size_t c = 0; c < half; ++c) cells.emplace_back(r, c);

  std::vector<Image> out;
  for (std::size_t k = 0; k < spec.classes; ++k) {
    Image glyph = base;
    auto picks = cells;
    std::shuffle(picks.begin(), picks.end(), rng);
    for (std::size_t i = 0; i < spec.class_delta; ++i) {
      const auto [r, c] = picks[i];
      const double v = 1.0 - glyph.at(r, c);
      glyph.at(r, c) = glyph.at(r, g - 1 - c) = v;
    }
    out.push_back(std::move(glyph));
  }
  return out;
}

Image render_background(const SynthSpec& spec, const std::string& id) {
  auto rng = make_stream(spec.seed, id, 0, StreamPurpose::kSynth);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, spec.pixel_noise);
  const std::size_t side = spec.image_side;
  const std::size_t cells = side / spec.texture_cell + 2;
  Matrix coarse(cells + 1, cells + 1);
  Matrix fine(2 * cells + 1, 2 * cells + 1);
  for (double& v : coarse.data()) v = unit(rng) - 0.5;
  for (double& v : fine.data()) v = unit(rng) - 0.5;
  const double offset_y = unit(rng);
  const double offset_x = unit(rng);
  const double level = 0.4 + 0.2 * unit(rng);
  const double cell = static_cast<double>(spec.texture_cell);

  Image img(side, side);
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      const double y = static_cast<double>(r) / cell + offset_y;
      const double x = static_cast<double>(c) / cell + offset_x;
      const double v = value_noise(coarse, y, x) + 0.5 * value_noise(fine, 2.0 * y, 2.0 * x);
      img.at(r, c) = std::clamp(level + spec.texture_amplitude * v + noise(rng), 0.0, 1.0);
    }
  }
  return img;
}

void paint_glyph(Image& image, const SynthSpec& spec, const std::vector<Image>& codebook, int label,
                 std::size_t top, std::size_t left) {
  const Image& g = codebook.at(static_cast<std::size_t>(label));
  const double mid = 0.5 + spec.class_level_step * (label - 0.5 * (static_cast<double>(spec.classes) - 1.0));
  const double lo = std::clamp(mid - 0.5 * spec.glyph_contrast, 0.0, 1.0);
  const double hi = std::clamp(mid + 0.5 * spec.glyph_contrast, 0.0, 1.0);
  for (std::size_t r = 0; r < g.height; ++r)
    for (std::size_t c = 0; c < g.width; ++c) image.at(top + r, left + c) = g.at(r, c) > 0.5 ? hi : lo;
}

GeneratedDataset generate(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  spec.validate();
  const auto image_dir = out_dir / "images";
  std::filesystem::create_directories(image_dir);
  const auto codebook = glyph_codebook(spec);
  const std::size_t n_train = static_cast<std::size_t>(std::llround(spec.train_fraction * spec.per_class));
  if (n_train == 0 || n_train >= spec.per_class) throw std::invalid_argument("synth: split leaves an empty side");

  GeneratedDataset data;
  for (std::size_t label = 0; label < spec.classes; ++label) {
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      const std::string id = image_id(label, i);
      Image img = render_background(spec, id);
      auto rng = make_stream(spec.seed, id, 1, StreamPurpose::kSynth);
      const std::size_t span = spec.image_side - 2 * spec.border - spec.glyph;
      std::size_t top, left;
      if (spec.grid_aligned) {
        std::uniform_int_distribution<std::size_t> cell(0, span / spec.glyph);
        top = spec.border + spec.glyph * cell(rng);
        left = spec.border + spec.glyph * cell(rng);
      } else {
        std::uniform_int_distribution<std::size_t> pos(0, span);
        top = spec.border + pos(rng);
        left = spec.border + pos(rng);
      }
      paint_glyph(img, spec, codebook, static_cast<int>(label), top, left);
      const auto rel = std::filesystem::path("images") / (id + ".pgm");
      write_pgm(out_dir / rel, img);
      const bool train = i < n_train;
      (train ? data.train : data.test).push_back({id, rel, static_cast<int>(label)});
      data.glyphs.push_back({id, static_cast<int>(label), top, left, train});
    }
  }
  encoder::write_manifest(out_dir / "train.tsv", data.train);
  encoder::write_manifest(out_dir / "test.tsv", data.test);
  std::ofstream glyphs(out_dir / "glyphs.tsv");
  if (!glyphs) throw std::runtime_error("cannot write " + (out_dir / "glyphs.tsv").string());
  for (const auto& g : data.glyphs)
    glyphs << g.id << '\t' << g.label << '\t' << g.top << '\t' << g.left << '\t' << (g.train ? "train" : "test") << '\n';
  return data;
}

std::vector<GlyphRecord> read_glyphs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<GlyphRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    GlyphRecord g;
    std::string split;
    if (!(is >> g.id >> g.label >> g.top >> g.left >> split)) throw std::runtime_error("malformed line in " + path.string());
    g.train = split == "train";
    out.push_back(std::move(g));
  }
  return out;
}

Matrix lowdin_orthonormalize(const Matrix& rows) {
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMajor> a(rows.data().data(), static_cast<Eigen::Index>(rows.rows()),
                               static_cast<Eigen::Index>(rows.cols()));
  const Eigen::MatrixXd gram = a * a.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
  if (eig.eigenvalues().minCoeff() <= 1e-12 * eig.eigenvalues().maxCoeff())
    throw linalg::NumericError("lowdin_orthonormalize: rows are linearly dependent");
  const Eigen::MatrixXd inv_sqrt =
      eig.eigenvectors() * eig.eigenvalues().cwiseInverse().cwiseSqrt().asDiagonal() * eig.eigenvectors().transpose();
  const RowMajor out = inv_sqrt * a;
  return Matrix(rows.rows(), rows.cols(), Vec(out.data(), out.data() + out.size()));
}

Matrix random_anchors(std::size_t classes, std::size_t dim, std::uint64_t seed) {
  if (classes > dim) throw std::invalid_argument("random_anchors: more classes than dimensions");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(classes, dim);
  for (double& x : m.data()) x = n(rng);
  return lowdin_orthonormalize(m);
}

Matrix aligned_anchors(const SynthSpec& spec, const encoder::EncoderWeights& encoder, const DescriptionOptions& options) {
  spec.validate();
  if (spec.classes > encoder.config.shared_dim) throw std::invalid_argument("aligned_anchors: too many classes");
  autodiff::Model probe;
  probe.encoder = encoder;
  probe.pool = tokenfusion::PoolingParams::identity(encoder.config.dim);
  probe.bank.w_llm = probe.bank.w_llm_star = Matrix::identity(encoder.config.shared_dim);
  const auto codebook = glyph_codebook(spec);
  const std::size_t ds = encoder.config.shared_dim;
  const std::size_t probes = 16;
  auto rng = make_stream(options.seed, "anchor-probes", 0, StreamPurpose::kSynth);
  const std::size_t span = spec.image_side - 2 * spec.border - spec.glyph;
  std::uniform_int_distribution<std::size_t> cell(0, span / spec.glyph);

  // Pooled embeddings of background-only images and every global embedding
  // carry no class information; their dominant directions are removed from
  // the anchors.
  std::uniform_real_distribution<double> zoom(options.crop_min, options.crop_max);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Matrix class_fg(spec.classes, ds);
  Matrix class_cls(spec.classes, ds);
  Matrix blanks(probes, ds);
  Matrix globals(probes * (1 + spec.classes * (1 + 2 * options.probe_crops)), ds);
  std::size_t g = 0;
  for (std::size_t k = 0; k < probes; ++k) {
    const Image bg = render_background(spec, "anchor-probe-" + std::to_string(k));
    const auto f = autodiff::forward_image(probe, bg, {});
    std::copy(f.z_fg.begin(), f.z_fg.end(), blanks.row(k).begin());
    std::copy(f.z_cls.begin(), f.z_cls.end(), globals.row(g++).begin());
    for (std::size_t c = 0; c < spec.classes; ++c) {
      Image img = bg;
      paint_glyph(img, spec, codebook, static_cast<int>(c), spec.border + spec.glyph * cell(rng),
                  spec.border + spec.glyph * cell(rng));
      const auto fc = autodiff::forward_image(probe, img, {});
      // Paired against the same background so only the glyph's effect remains.
      for (std::size_t j = 0; j < ds; ++j) {
        class_fg(c, j) += (fc.z_fg[j] - f.z_fg[j]) / probes;
        class_cls(c, j) += (fc.z_cls[j] - f.z_cls[j]) / probes;
      }
      std::copy(fc.z_cls.begin(), fc.z_cls.end(), globals.row(g++).begin());
      // The global embedding also sees the glyph through zoomed crops.
      for (std::size_t v = 0; v < options.probe_crops; ++v) {
        const double side = zoom(rng) * static_cast<double>(spec.image_side);
        const double top = unit(rng) * (static_cast<double>(spec.image_side) - side);
        const double left = unit(rng) * (static_cast<double>(spec.image_side) - side);
        const Vec with = encoder::project_shared(
            encoder::encode_cls(crop_resize(img, top, left, side, spec.image_side), encoder), encoder);
        const Vec without = encoder::project_shared(
            encoder::encode_cls(crop_resize(bg, top, left, side, spec.image_side), encoder), encoder);
        for (std::size_t j = 0; j < ds; ++j) class_cls(c, j) += options.crop_effect * (with[j] - without[j]) / probes;
        std::copy(with.begin(), with.end(), globals.row(g++).begin());
        std::copy(without.begin(), without.end(), globals.row(g++).begin());
      }
    }
  }

  std::vector<Vec> shared;
  auto add_shared = [&](Vec v) {
    for (const Vec& s : shared) linalg::axpy(-linalg::dot(v, s), s, v);
    const double n = linalg::norm2(v);
    if (n <= 1e-9) return;
    for (double& x : v) x /= n;
    shared.push_back(std::move(v));
  };
  for (const Matrix* m : {&blanks, &globals}) {
    // Uncentred second moment: the mean direction comes out first.
    Eigen::MatrixXd moment = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(ds), static_cast<Eigen::Index>(ds));
    for (std::size_t r = 0; r < m->rows(); ++r) {
      const Eigen::Map<const Eigen::VectorXd> v(m->row(r).data(), static_cast<Eigen::Index>(ds));
      moment += v * v.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(moment);
    for (std::size_t k = 0; k < options.shared_components && k < ds; ++k) {
      const auto col = eig.eigenvectors().col(static_cast<Eigen::Index>(ds - 1 - k));
      add_shared(Vec(col.data(), col.data() + col.size()));
    }
  }
  if (shared.size() + spec.classes > ds)
    throw std::invalid_argument("aligned_anchors: shared_components leaves too few dimensions");
  auto project_out = [&](Matrix& m) {
    for (std::size_t c = 0; c < m.rows(); ++c)
      for (const Vec& s : shared) linalg::axpy(-linalg::dot(m.row(c), s), s, m.row(c));
  };
  project_out(class_fg);
  project_out(class_cls);
  Matrix mixed(spec.classes, ds);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    const double nf = linalg::norm2(class_fg.row(c));
    const double nc = linalg::norm2(class_cls.row(c));
    if (!(nf > 0.0) || !(nc > 0.0)) throw linalg::NumericError("aligned_anchors: glyph has no effect on the encoder");
    for (std::size_t j = 0; j < ds; ++j)
      mixed(c, j) = (1.0 - options.global_weight) * class_fg(c, j) / nf + options.global_weight * class_cls(c, j) / nc;
  }
  Matrix anchors = lowdin_orthonormalize(mixed);

  std::normal_distribution<double> gauss(0.0, options.anchor_offset / std::sqrt(static_cast<double>(ds)));
  for (double& x : anchors.data()) x += gauss(rng);
  // The offset must not reintroduce the shared directions.
  project_out(anchors);
  return lowdin_orthonormalize(anchors);
}

classifier::DescriptionEmbeddingSet descriptions_from_anchors(const Matrix& anchors, const DescriptionOptions& options) {
  if (options.per_class == 0) throw std::invalid_argument("descriptions: per_class must be positive");
  std::mt19937_64 rng(options.seed);
  const std::size_t d = anchors.cols();
  std::normal_distribution<double> gauss(0.0, options.noise / std::sqrt(static_cast<double>(d)));
  classifier::DescriptionEmbeddingSet set;
  set.dim = d;
  set.per_class.resize(anchors.rows());
  for (std::size_t c = 0; c < anchors.rows(); ++c) {
    for (std::size_t m = 0; m < options.per_class; ++m) {
      Vec e(anchors.row(c).begin(), anchors.row(c).end());
      for (double& x : e) x += gauss(rng);
      const double n = linalg::norm2(e);
      for (double& x : e) x /= n;
      set.per_class[c].push_back(std::move(e));
    }
  }
  return set;
}

}  // namespace microtune::synth
