#include "microtune/encoder.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace microtune::encoder {

using linalg::matmul;

namespace {

Matrix gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (double& x : m.data()) x = dist(rng);
  return m;
}

LayerNormParams unit_layer_norm(std::size_t d) { return {Matrix(1, d, 1.0), Matrix(1, d, 0.0)}; }

void add_row_bias(Matrix& m, const Matrix& bias) {
  for (std::size_t r = 0; r < m.rows(); ++r) linalg::axpy(1.0, bias.row(0), m.row(r));
}

Matrix rows_from(const Matrix& m, std::size_t first) {
  Matrix out(m.rows() - first, m.cols());
  std::copy(m.data().begin() + static_cast<std::ptrdiff_t>(first * m.cols()), m.data().end(),
            out.data().begin());
  return out;
}

Matrix mlp_forward(const Matrix& input, const LayerWeights& lw, Matrix* pre_out, Matrix* act_out) {
  Matrix pre = matmul(input, lw.w1);
  add_row_bias(pre, lw.b1);
  Matrix act(pre.rows(), pre.cols());
  for (std::size_t i = 0; i < pre.size(); ++i) act.data()[i] = gelu(pre.data()[i]);
  Matrix out = matmul(act, lw.w2);
  add_row_bias(out, lw.b2);
  if (pre_out) *pre_out = std::move(pre);
  if (act_out) *act_out = std::move(act);
  return out;
}

// One pre-LN transformer block. With cls_only the result has a single row.
Matrix block_forward(const Matrix& x, const LayerWeights& lw, double eps, bool cls_only, LayerTape* tape) {
  const std::size_t d = x.cols();
  LayerNormCache ln1;
  Matrix a = layer_norm(x, lw.ln1, eps, tape ? &ln1 : nullptr);
  Matrix k = matmul(a, lw.wk);
  Matrix v = matmul(a, lw.wv);
  Matrix q = cls_only ? matmul(Matrix::row_vector(a.row(0)), lw.wq) : matmul(a, lw.wq);
  Matrix scores = linalg::matmul_a_bt(q, k);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& s : scores.data()) s *= inv_sqrt_d;
  Matrix probs = linalg::row_softmax(scores);
  Matrix mixed = matmul(probs, v);
  Matrix mid = matmul(mixed, lw.wo);
  for (std::size_t r = 0; r < mid.rows(); ++r) linalg::axpy(1.0, x.row(r), mid.row(r));

  LayerNormCache ln2;
  Matrix b = layer_norm(mid, lw.ln2, eps, tape ? &ln2 : nullptr);
  Matrix pre, act;
  Matrix out = mlp_forward(b, lw, tape ? &pre : nullptr, tape ? &act : nullptr);
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += mid.data()[i];

  if (tape) {
    tape->cls_only = cls_only;
    tape->input = x;
    tape->ln1 = std::move(ln1);
    tape->a = std::move(a);
    tape->q = std::move(q);
    tape->k = std::move(k);
    tape->v = std::move(v);
    tape->probs = std::move(probs);
    tape->mixed = std::move(mixed);
    tape->mid = std::move(mid);
    tape->ln2 = std::move(ln2);
    tape->b = std::move(b);
    tape->pre = std::move(pre);
    tape->act = std::move(act);
  }
  return out;
}

Matrix embed(const Image& image, const EncoderWeights& w) {
  const auto& cfg = w.config;
  Matrix patches = patchify(image, cfg);
  Matrix tokens = matmul(patches, w.patch_embed);
  Matrix x(cfg.tokens() + 1, cfg.dim);
  std::copy(w.cls_embed.data().begin(), w.cls_embed.data().end(), x.row(0).begin());
  for (std::size_t i = 0; i < cfg.tokens(); ++i) {
    for (std::size_t j = 0; j < cfg.dim; ++j) x(i + 1, j) = tokens(i, j) + w.pos_embed(i, j);
  }
  return x;
}

}  // namespace

void EncoderConfig::validate() const {
  if (patch == 0 || image_side == 0 || image_side % patch != 0)
    throw std::invalid_argument("EncoderConfig: image_side must be a positive multiple of patch");
  if (dim == 0 || shared_dim == 0 || layers < 2 || mlp_ratio == 0)
    throw std::invalid_argument("EncoderConfig: need dim, shared_dim > 0 and at least 2 layers");
  if (grid_side() < 2) throw std::invalid_argument("EncoderConfig: need at least a 2x2 token grid");
  if (embed_frequencies > patch) throw std::invalid_argument("EncoderConfig: embed_frequencies exceeds patch");
}

namespace {

// p^2 x k^2 orthonormal 2D DCT-II modes, lowest frequencies first.
Matrix cosine_basis(std::size_t p, std::size_t k) {
  const double pi = std::numbers::pi;
  auto c1 = [&](std::size_t u, std::size_t x) {
    const double norm = u == 0 ? std::sqrt(1.0 / p) : std::sqrt(2.0 / p);
    return norm * std::cos(pi * (static_cast<double>(x) + 0.5) * static_cast<double>(u) / static_cast<double>(p));
  };
  Matrix b(p * p, k * k);
  for (std::size_t u = 0; u < k; ++u)
    for (std::size_t v = 0; v < k; ++v)
      for (std::size_t y = 0; y < p; ++y)
        for (std::size_t x = 0; x < p; ++x) b(y * p + x, u * k + v) = c1(u, y) * c1(v, x);
  return b;
}

}  // namespace

EncoderWeights EncoderWeights::toy(const EncoderConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.dim;
  const std::size_t p2 = config.patch * config.patch;
  const std::size_t hidden = d * config.mlp_ratio;
  std::mt19937_64 rng(seed);

  EncoderWeights w;
  w.config = config;
  w.seed = seed;

  Matrix raw;
  if (config.embed_frequencies == 0) {
    raw = gaussian(p2, d, config.embed_scale / static_cast<double>(config.patch), rng);
  } else {
    const std::size_t k = config.embed_frequencies;
    const Matrix mix = gaussian(k * k, d, config.embed_scale / static_cast<double>(k), rng);
    raw = linalg::matmul(cosine_basis(config.patch, k), mix);
  }
  // Attenuate the response to the patch mean: W = (I - (1 - g) 11^T / p^2) R.
  w.patch_embed = Matrix(p2, d);
  for (std::size_t j = 0; j < d; ++j) {
    double col_mean = 0.0;
    for (std::size_t i = 0; i < p2; ++i) col_mean += raw(i, j);
    col_mean /= static_cast<double>(p2);
    for (std::size_t i = 0; i < p2; ++i) w.patch_embed(i, j) = raw(i, j) - (1.0 - config.dc_gain) * col_mean;
  }
  w.pos_embed = gaussian(config.tokens(), d, config.pos_scale, rng);
  w.cls_embed = gaussian(1, d, config.cls_scale, rng);
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerWeights lw;
    lw.ln1 = unit_layer_norm(d);
    lw.ln2 = unit_layer_norm(d);
    lw.wq = gaussian(d, d, config.layer_scale, rng);
    lw.wk = gaussian(d, d, config.layer_scale, rng);
    lw.wv = gaussian(d, d, config.layer_scale, rng);
    lw.wo = gaussian(d, d, config.layer_scale, rng);
    lw.w1 = gaussian(d, hidden, config.layer_scale, rng);
    lw.b1 = Matrix(1, hidden);
    lw.w2 = gaussian(hidden, d, config.layer_scale, rng);
    lw.b2 = Matrix(1, d);
    w.layers.push_back(std::move(lw));
  }
  w.ln_post = unit_layer_norm(d);
  w.proj = gaussian(d, config.shared_dim, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  return w;
}

std::vector<std::pair<std::string, Matrix*>> EncoderWeights::layer_norm_params() {
  std::vector<std::pair<std::string, Matrix*>> out;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string prefix = "encoder.layer" + std::to_string(l) + ".";
    out.emplace_back(prefix + "ln1.gamma", &layers[l].ln1.gamma);
    out.emplace_back(prefix + "ln1.beta", &layers[l].ln1.beta);
    out.emplace_back(prefix + "ln2.gamma", &layers[l].ln2.gamma);
    out.emplace_back(prefix + "ln2.beta", &layers[l].ln2.beta);
  }
  out.emplace_back("encoder.ln_post.gamma", &ln_post.gamma);
  out.emplace_back("encoder.ln_post.beta", &ln_post.beta);
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> EncoderWeights::layer_norm_params() const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (auto& [name, ptr] : const_cast<EncoderWeights*>(this)->layer_norm_params()) out.emplace_back(name, ptr);
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> EncoderWeights::frozen_params() const {
  std::vector<std::pair<std::string, const Matrix*>> out{
      {"encoder.patch_embed", &patch_embed}, {"encoder.pos_embed", &pos_embed}, {"encoder.cls_embed", &cls_embed}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string prefix = "encoder.layer" + std::to_string(l) + ".";
    const auto& lw = layers[l];
    for (const auto& [name, m] : {std::pair{"wq", &lw.wq}, {"wk", &lw.wk}, {"wv", &lw.wv}, {"wo", &lw.wo},
                                  {"w1", &lw.w1}, {"b1", &lw.b1}, {"w2", &lw.w2}, {"b2", &lw.b2}}) {
      out.emplace_back(prefix + name, m);
    }
  }
  out.emplace_back("encoder.proj", &proj);
  return out;
}

double EncoderWeights::frozen_checksum() const {
  double acc = 0.0;
  for (const auto& [name, m] : frozen_params()) acc = std::fmod(acc * 31.0 + linalg::checksum(*m), 9007199254740881.0);
  return acc;
}

void PatchTokenGrid::validate() const {
  const std::size_t n = grid_side * grid_side;
  const std::size_t d = this->d();
  if (n == 0 || d == 0) throw std::invalid_argument("PatchTokenGrid: empty grid");
  if (!v_cls.empty() && v_cls.size() != d) throw std::invalid_argument("PatchTokenGrid: v_cls length != token dim");
  auto check = [&](const Matrix& m, const char* what) {
    if (m.empty()) return;
    if (m.rows() != n || m.cols() != d) {
      std::ostringstream os;
      os << "PatchTokenGrid: " << what << " is " << m.rows() << "x" << m.cols() << ", expected " << n << "x" << d;
      throw std::invalid_argument(os.str());
    }
    if (!m.all_finite()) throw std::invalid_argument(std::string("PatchTokenGrid: non-finite ") + what);
  };
  check(x_patch_last, "x_patch_last");
  check(x_patch_penult, "x_patch_penult");
  if (x_patch_last.empty() && x_patch_penult.empty())
    throw std::invalid_argument("PatchTokenGrid: no token matrix present");
}

Matrix layer_norm(const Matrix& x, const LayerNormParams& p, double eps, LayerNormCache* cache) {
  const std::size_t d = x.cols();
  Matrix out(x.rows(), d);
  if (cache) {
    cache->xhat = Matrix(x.rows(), d);
    cache->rstd.assign(x.rows(), 0.0);
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double xhat = (row[j] - mean) * rstd;
      out(r, j) = p.gamma(0, j) * xhat + p.beta(0, j);
      if (cache) cache->xhat(r, j) = xhat;
    }
    if (cache) cache->rstd[r] = rstd;
  }
  return out;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

Matrix patchify(const Image& image, const EncoderConfig& cfg) {
  if (image.height != cfg.image_side || image.width != cfg.image_side) {
    std::ostringstream os;
    os << "encode: expected " << cfg.image_side << "x" << cfg.image_side << " image, got " << image.height << "x"
       << image.width;
    throw std::invalid_argument(os.str());
  }
  const std::size_t g = cfg.grid_side();
  const std::size_t p = cfg.patch;
  Matrix out(g * g, p * p);
  for (std::size_t gr = 0; gr < g; ++gr)
    for (std::size_t gc = 0; gc < g; ++gc)
      for (std::size_t r = 0; r < p; ++r)
        for (std::size_t c = 0; c < p; ++c) out(gr * g + gc, r * p + c) = image.at(gr * p + r, gc * p + c);
  return out;
}

PatchTokenGrid encode(const Image& image, const EncoderWeights& w) {
  const auto& cfg = w.config;
  Matrix x = embed(image, w);
  for (std::size_t l = 0; l + 1 < cfg.layers; ++l) x = block_forward(x, w.layers[l], cfg.ln_eps, false, nullptr);
  PatchTokenGrid grid;
  grid.grid_side = cfg.grid_side();
  grid.x_patch_penult = rows_from(x, 1);
  Matrix last = block_forward(x, w.layers.back(), cfg.ln_eps, false, nullptr);
  grid.x_patch_last = rows_from(last, 1);
  Matrix cls = layer_norm(Matrix::row_vector(last.row(0)), w.ln_post, cfg.ln_eps, nullptr);
  grid.v_cls = cls.data();
  return grid;
}

Matrix bypass_attention(const PatchTokenGrid& grid, const EncoderWeights& w, BypassTape* tape) {
  if (grid.x_patch_penult.empty()) throw std::invalid_argument("bypass_attention: grid has no penultimate tokens");
  return bypass_attention(grid.x_patch_penult, w, tape);
}

Matrix bypass_attention(const Matrix& x, const EncoderWeights& w, BypassTape* tape) {
  const auto& lw = w.layers.back();
  if (x.cols() != lw.wv.rows()) {
    std::ostringstream os;
    os << "bypass_attention: token dim " << x.cols() << " != encoder dim " << lw.wv.rows();
    throw std::invalid_argument(os.str());
  }
  Matrix xv = matmul(x, lw.wv);
  Matrix vtilde = w.config.bypass_output_proj ? matmul(xv, lw.wo) : xv;
  for (std::size_t i = 0; i < vtilde.size(); ++i) vtilde.data()[i] += x.data()[i];
  Matrix pre, act;
  Matrix out = mlp_forward(vtilde, lw, tape ? &pre : nullptr, tape ? &act : nullptr);
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += vtilde.data()[i];
  if (tape) {
    tape->x = x;
    tape->xv = std::move(xv);
    tape->vtilde = std::move(vtilde);
    tape->pre = std::move(pre);
    tape->act = std::move(act);
  }
  return out;
}

Vec project_shared(std::span<const double> v, const EncoderWeights& w) { return linalg::vec_mat(v, w.proj); }

TokenFeatures forward_features(const Image& image, const EncoderWeights& w, EncoderTape* tape) {
  return forward_features_from(embed(image, w), 0, w, tape);
}

TokenFeatures forward_features_from(Matrix x, std::size_t first_layer, const EncoderWeights& w, EncoderTape* tape) {
  const auto& cfg = w.config;
  if (first_layer >= cfg.layers) throw std::invalid_argument("forward_features_from: layer index out of range");
  if (x.rows() != cfg.tokens() + 1 || x.cols() != cfg.dim)
    throw std::invalid_argument("forward_features_from: token matrix has the wrong shape");
  if (tape) tape->layers.assign(cfg.layers, LayerTape{});
  for (std::size_t l = first_layer; l + 1 < cfg.layers; ++l) {
    x = block_forward(x, w.layers[l], cfg.ln_eps, false, tape ? &tape->layers[l] : nullptr);
  }
  TokenFeatures out;
  out.grid_side = cfg.grid_side();
  Matrix penult = rows_from(x, 1);
  Matrix cls = block_forward(x, w.layers.back(), cfg.ln_eps, true, tape ? &tape->layers.back() : nullptr);
  out.v_cls = layer_norm(cls, w.ln_post, cfg.ln_eps, tape ? &tape->ln_post : nullptr).data();
  out.v_patch = bypass_attention(penult, w, tape ? &tape->bypass : nullptr);
  return out;
}

Vec encode_cls(const Image& image, const EncoderWeights& w) {
  const auto& cfg = w.config;
  Matrix x = embed(image, w);
  for (std::size_t l = 0; l + 1 < cfg.layers; ++l) x = block_forward(x, w.layers[l], cfg.ln_eps, false, nullptr);
  Matrix cls = block_forward(x, w.layers.back(), cfg.ln_eps, true, nullptr);
  return layer_norm(cls, w.ln_post, cfg.ln_eps, nullptr).data();
}

TokenFeatures features_from_grid(const PatchTokenGrid& grid, const EncoderWeights& w) {
  grid.validate();
  if (!grid.has_cls()) throw std::invalid_argument("feature record has no CLS token");
  TokenFeatures out;
  out.grid_side = grid.grid_side;
  out.v_cls = grid.v_cls;
  out.v_patch = grid.x_patch_penult.empty() ? grid.x_patch_last : bypass_attention(grid.x_patch_penult, w);
  return out;
}

}  // namespace microtune::encoder
