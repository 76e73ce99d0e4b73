#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "microtune/image.hpp"
#include "microtune/linalg.hpp"

namespace microtune::encoder {

using linalg::Matrix;
using linalg::Vec;

/// Shape and initialization scales of the frozen toy vision transformer.
struct EncoderConfig {
  std::size_t image_side = 56;
  std::size_t patch = 8;
  std::size_t dim = 32;
  std::size_t shared_dim = 32;
  std::size_t layers = 4;
  std::size_t mlp_ratio = 4;
  // Initialization. The patch embedding attenuates the mean intensity of a
  // patch by dc_gain so token direction is driven by local structure.
  double dc_gain = 0.15;
  double embed_scale = 6.0;  // patch embedding std is embed_scale / patch
  // 0: white-noise patch filters. k > 0: each filter mixes the k x k lowest
  // 2D cosine modes of the patch, so small shifts and rescales of the content
  // move the embedding only a little.
  std::size_t embed_frequencies = 0;
  double pos_scale = 0.02;
  double cls_scale = 0.02;
  double layer_scale = 0.02;
  double ln_eps = 1e-5;
  // Adds the final-layer attention output projection to the bypass path.
  bool bypass_output_proj = false;

  std::size_t grid_side() const { return image_side / patch; }
  std::size_t tokens() const { return grid_side() * grid_side(); }
  void validate() const;
};

struct LayerNormParams {
  Matrix gamma;  // 1 x d
  Matrix beta;   // 1 x d
};

struct LayerWeights {
  LayerNormParams ln1;
  LayerNormParams ln2;
  Matrix wq, wk, wv, wo;  // d x d
  Matrix w1, b1;          // d x hidden, 1 x hidden
  Matrix w2, b2;          // hidden x d, 1 x d
};

struct EncoderWeights {
  EncoderConfig config;
  std::uint64_t seed = 0;
  Matrix patch_embed;  // patch^2 x d
  Matrix pos_embed;    // n x d
  Matrix cls_embed;    // 1 x d
  std::vector<LayerWeights> layers;
  LayerNormParams ln_post;
  Matrix proj;  // d x shared_dim (P_CLIP)

  /// Deterministic seeded initialization. LayerNorm affines start at (1, 0).
  static EncoderWeights toy(const EncoderConfig& config, std::uint64_t seed);

  /// Every LayerNorm affine, in a fixed order, with stable names.
  std::vector<std::pair<std::string, Matrix*>> layer_norm_params();
  std::vector<std::pair<std::string, const Matrix*>> layer_norm_params() const;
  /// Every tensor that is never trained.
  std::vector<std::pair<std::string, const Matrix*>> frozen_params() const;
  double frozen_checksum() const;
};

/// Per-image token output of the encoder (or of a feature record).
struct PatchTokenGrid {
  std::size_t grid_side = 0;
  Matrix x_patch_last;    // n x d, final-layer tokens (may be empty in feature mode)
  Matrix x_patch_penult;  // n x d, input to the final layer (may be empty)
  Vec v_cls;              // d, or empty when a feature record carries no CLS token

  std::size_t n() const { return grid_side * grid_side; }
  std::size_t d() const { return x_patch_last.empty() ? x_patch_penult.cols() : x_patch_last.cols(); }
  bool has_cls() const { return !v_cls.empty(); }
  void validate() const;
};

struct LayerNormCache {
  Matrix xhat;
  Vec rstd;
};

Matrix layer_norm(const Matrix& x, const LayerNormParams& p, double eps, LayerNormCache* cache);
double gelu(double x);
double gelu_grad(double x);

/// Intermediates of one transformer block, recorded for the backward pass.
/// When cls_only is set only the CLS row (row 0) was used as a query.
struct LayerTape {
  bool cls_only = false;
  Matrix input;
  LayerNormCache ln1;
  Matrix a, q, k, v, probs, mixed;
  Matrix mid;
  LayerNormCache ln2;
  Matrix b, pre, act;
};

/// Intermediates of the attention-bypass path.
struct BypassTape {
  Matrix x;       // penultimate patch tokens
  Matrix xv;      // x W_V (before the optional output projection)
  Matrix vtilde;  // x + x W_V [W_O]
  Matrix pre, act;
};

struct EncoderTape {
  std::vector<LayerTape> layers;
  LayerNormCache ln_post;
  BypassTape bypass;
};

struct TokenFeatures {
  std::size_t grid_side = 0;
  Matrix v_patch;  // n x d
  Vec v_cls;       // d
};

/// Raster -> patch embedding matrix input (n x patch^2), row-major grid order.
Matrix patchify(const Image& image, const EncoderConfig& config);

/// Full forward pass. Throws std::invalid_argument on a shape mismatch.
PatchTokenGrid encode(const Image& image, const EncoderWeights& w);

/// Patch tokens that skip the final attention: v = x + x W_V, then
/// v + MLP(v) with the final layer's MLP.
Matrix bypass_attention(const PatchTokenGrid& grid, const EncoderWeights& w, BypassTape* tape = nullptr);
Matrix bypass_attention(const Matrix& x_penult, const EncoderWeights& w, BypassTape* tape = nullptr);

/// v P_CLIP
Vec project_shared(std::span<const double> v, const EncoderWeights& w);

/// Forward pass producing exactly what the pooling head consumes. The final
/// layer is evaluated for the CLS query only. Pass a tape to record the
/// intermediates needed by autodiff::encoder_backward.
TokenFeatures forward_features(const Image& image, const EncoderWeights& w, EncoderTape* tape = nullptr);

/// v_cls only; skips the bypass path.
Vec encode_cls(const Image& image, const EncoderWeights& w);

/// Resumes forward_features at `first_layer` given that layer's input
/// (CLS row first). A tape records only the layers actually run.
TokenFeatures forward_features_from(Matrix x, std::size_t first_layer, const EncoderWeights& w,
                                    EncoderTape* tape = nullptr);

/// Feature-mode equivalent of forward_features: bypass over the penultimate
/// tokens when present, otherwise the final-layer tokens are used as is.
TokenFeatures features_from_grid(const PatchTokenGrid& grid, const EncoderWeights& w);

}  // namespace microtune::encoder
