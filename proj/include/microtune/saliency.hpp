#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "microtune/linalg.hpp"

namespace microtune::saliency {

using linalg::Matrix;
using linalg::Vec;

enum class GraphMode { kAuto, kDense, kGridSparse };
/// Which side of the mean-threshold cut is salient: the side holding the
/// largest |z| entry, or the side with the larger mean |z|.
enum class SalientRule { kMaxAbs, kMeanAbs };

GraphMode parse_graph_mode(const std::string& text);
std::string to_string(GraphMode mode);
SalientRule parse_salient_rule(const std::string& text);
std::string to_string(SalientRule rule);

struct SaliencyOptions {
  GraphMode mode = GraphMode::kAuto;
  double tau = 0.2;
  double eps = 1e-5;
  std::size_t dense_limit = 256;  // kAuto: dense up to this many tokens
  SalientRule rule = SalientRule::kMaxAbs;
  double min_spread = 1e-9;
  linalg::FiedlerOptions solver;
};

struct AffinityGraph {
  GraphMode mode = GraphMode::kDense;  // never kAuto once built
  linalg::SparseSymMatrix matrix{2};
  double tau = 0.2;
  double eps = 1e-5;
};

/// Binarized token affinity: weight 1 when cos(v_i, v_j) >= tau, eps otherwise.
/// Dense mode links every pair; grid-sparse links 8-neighbours on the
/// grid_side x grid_side token grid. Throws NumericError("degenerate token")
/// for a zero-norm token.
AffinityGraph build_affinity(const Matrix& v_patch, std::size_t grid_side, const SaliencyOptions& options);

struct SaliencyPartition {
  linalg::EigenPair fiedler;
  double threshold = 0.0;
  std::vector<std::size_t> selected;    // ascending token indices
  std::vector<std::size_t> complement;  // ascending token indices
  Vec q_sal;
  bool fallback = false;  // true when every token was selected because NCut was unusable
  std::string fallback_reason;
  std::size_t iterations = 0;
};

/// NCut bipartition at the mean of the Fiedler vector. On a disconnected
/// graph, a non-converged solve or a flat Fiedler vector, every token is
/// selected and `fallback` is set.
SaliencyPartition ncut_bipartition(const AffinityGraph& graph, const SaliencyOptions& options);

/// Mean of the selected rows of v_patch.
Vec saliency_query(const SaliencyPartition& partition, const Matrix& v_patch);

/// build_affinity + ncut_bipartition + saliency_query.
SaliencyPartition select_salient(const Matrix& v_patch, std::size_t grid_side, const SaliencyOptions& options);

/// grid_side x grid_side binary mask, row-major, 1 for selected tokens.
std::vector<int> saliency_mask(const SaliencyPartition& partition, std::size_t grid_side);
void write_mask_pgm(const std::filesystem::path& path, const SaliencyPartition& partition, std::size_t grid_side);

}  // namespace microtune::saliency
