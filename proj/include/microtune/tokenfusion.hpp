#pragma once

#include <filesystem>
#include <span>
#include <string>

#include "microtune/classifier.hpp"
#include "microtune/encoder.hpp"

namespace microtune::tokenfusion {

using linalg::Matrix;
using linalg::Vec;

/// Single-head attention pooling parameters. The empty token is appended to
/// the patch tokens as an extra key/value row.
struct PoolingParams {
  Matrix wq, wk, wv;   // d x d
  Matrix empty_token;  // 1 x d

  /// W_Q = W_K = W_V = I, empty token zero.
  static PoolingParams identity(std::size_t d);
  std::size_t dim() const { return wq.rows(); }
};

struct PoolTape {
  Vec q_sal;
  Matrix keys_in;  // (n+1) x d: v_patch rows then the empty token
  Vec query;       // q_sal W_Q
  Matrix keys;     // keys_in W_K
  Matrix values;   // keys_in W_V
};

struct PoolResult {
  Vec v_fg;
  Vec attention;  // n+1 weights, empty token last
};

/// v_fg = softmax(q W_Q (K W_K)^T / sqrt(d)) (K W_V) with K = [v_patch; empty].
PoolResult soap_pool(std::span<const double> q_sal, const Matrix& v_patch, const PoolingParams& params,
                     PoolTape* tape = nullptr);

enum class FusionMode { kSymmetric, kGlobalOnly, kLocalOnly };
FusionMode parse_fusion_mode(const std::string& text);
std::string to_string(FusionMode mode);

struct FusedLogits {
  Vec local;
  Vec global;
  Vec fused;
};

/// Cosine similarity of z against every row of prototypes.
Vec cosine_logits(std::span<const double> z, const Matrix& prototypes);

/// local = cos(v_fg P, W*), global = cos(v_cls P, W*), fused per mode
/// (symmetric: elementwise mean).
FusedLogits fused_logits(std::span<const double> v_fg, std::span<const double> v_cls,
                         const classifier::ClassifierBank& bank, const encoder::EncoderWeights& w,
                         FusionMode mode = FusionMode::kSymmetric);

/// Header plus n+1 rows (token, grid_row, grid_col, weight); the empty token
/// is last with grid coordinates -1.
void write_attention_csv(const std::filesystem::path& path, std::span<const double> attention, std::size_t grid_side);

}  // namespace microtune::tokenfusion
