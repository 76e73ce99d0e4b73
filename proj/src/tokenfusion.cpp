#include "microtune/tokenfusion.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <stdexcept>

namespace microtune::tokenfusion {

PoolingParams PoolingParams::identity(std::size_t d) {
  return {Matrix::identity(d), Matrix::identity(d), Matrix::identity(d), Matrix(1, d)};
}

PoolResult soap_pool(std::span<const double> q_sal, const Matrix& v_patch, const PoolingParams& params,
                     PoolTape* tape) {
  const std::size_t d = params.dim();
  const std::size_t n = v_patch.rows();
  if (n == 0) throw std::invalid_argument("soap_pool: no patch tokens");
  if (q_sal.size() != d || v_patch.cols() != d || params.empty_token.cols() != d)
    throw std::invalid_argument("soap_pool: dimension mismatch");
  for (double x : q_sal)
    if (!std::isfinite(x)) throw linalg::NumericError("soap_pool: non-finite query");

  Matrix keys_in(n + 1, d);
  std::copy(v_patch.data().begin(), v_patch.data().end(), keys_in.data().begin());
  std::copy(params.empty_token.data().begin(), params.empty_token.data().end(), keys_in.row(n).begin());

  Vec query = linalg::vec_mat(q_sal, params.wq);
  Matrix keys = linalg::matmul(keys_in, params.wk);
  Matrix values = linalg::matmul(keys_in, params.wv);
  Vec scores = linalg::mat_vec(keys, query);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& s : scores) s *= inv_sqrt_d;

  PoolResult out;
  out.attention = linalg::softmax(scores);
  out.v_fg = linalg::vec_mat(out.attention, values);
  if (tape) {
    tape->q_sal.assign(q_sal.begin(), q_sal.end());
    tape->keys_in = std::move(keys_in);
    tape->query = std::move(query);
    tape->keys = std::move(keys);
    tape->values = std::move(values);
  }
  return out;
}

FusionMode parse_fusion_mode(const std::string& text) {
  if (text == "symmetric") return FusionMode::kSymmetric;
  if (text == "global-only") return FusionMode::kGlobalOnly;
  if (text == "local-only") return FusionMode::kLocalOnly;
  throw std::invalid_argument("unknown fusion mode '" + text + "' (symmetric|global-only|local-only)");
}

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::kSymmetric: return "symmetric";
    case FusionMode::kGlobalOnly: return "global-only";
    case FusionMode::kLocalOnly: return "local-only";
  }
  return "symmetric";
}

Vec cosine_logits(std::span<const double> z, const Matrix& prototypes) {
  Vec out(prototypes.rows());
  for (std::size_t c = 0; c < prototypes.rows(); ++c) out[c] = linalg::cosine_sim(z, prototypes.row(c));
  return out;
}

FusedLogits fused_logits(std::span<const double> v_fg, std::span<const double> v_cls,
                         const classifier::ClassifierBank& bank, const encoder::EncoderWeights& w, FusionMode mode) {
  FusedLogits out;
  out.local = cosine_logits(encoder::project_shared(v_fg, w), bank.w_llm_star);
  out.global = cosine_logits(encoder::project_shared(v_cls, w), bank.w_llm_star);
  switch (mode) {
    case FusionMode::kSymmetric:
      out.fused.resize(out.local.size());
      for (std::size_t c = 0; c < out.fused.size(); ++c) out.fused[c] = 0.5 * (out.local[c] + out.global[c]);
      break;
    case FusionMode::kGlobalOnly: out.fused = out.global; break;
    case FusionMode::kLocalOnly: out.fused = out.local; break;
  }
  return out;
}

void write_attention_csv(const std::filesystem::path& path, std::span<const double> attention, std::size_t grid_side) {
  if (attention.size() != grid_side * grid_side + 1)
    throw std::invalid_argument("write_attention_csv: expected n+1 attention weights");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "token,grid_row,grid_col,weight\n" << std::setprecision(17);
  const std::size_t n = grid_side * grid_side;
  for (std::size_t i = 0; i < n; ++i)
    out << i << ',' << i / grid_side << ',' << i % grid_side << ',' << attention[i] << '\n';
  out << n << ",-1,-1," << attention[n] << '\n';
}

}  // namespace microtune::tokenfusion
