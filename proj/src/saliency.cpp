#include "microtune/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "microtune/image.hpp"

namespace microtune::saliency {

namespace {

void select_everything(SaliencyPartition& p, std::size_t n, std::string reason) {
  p.selected.resize(n);
  std::iota(p.selected.begin(), p.selected.end(), std::size_t{0});
  p.complement.clear();
  p.fallback = true;
  p.fallback_reason = std::move(reason);
}

}  // namespace

AffinityGraph build_affinity(const Matrix& v_patch, std::size_t grid_side, const SaliencyOptions& options) {
  const std::size_t n = v_patch.rows();
  if (n < 2) throw std::invalid_argument("build_affinity: need at least 2 tokens");
  GraphMode mode = options.mode;
  if (mode == GraphMode::kAuto) mode = n <= options.dense_limit ? GraphMode::kDense : GraphMode::kGridSparse;
  if (mode == GraphMode::kGridSparse && grid_side * grid_side != n)
    throw std::invalid_argument("build_affinity: grid-sparse mode needs n == grid_side^2");

  Vec norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    norms[i] = linalg::norm2(v_patch.row(i));
    if (!(norms[i] > 0.0)) throw linalg::NumericError("degenerate token");
  }
  auto weight = [&](std::size_t i, std::size_t j) {
    const double c = linalg::dot(v_patch.row(i), v_patch.row(j)) / (norms[i] * norms[j]);
    return c >= options.tau ? 1.0 : options.eps;
  };

  AffinityGraph g{mode, linalg::SparseSymMatrix(n), options.tau, options.eps};
  if (mode == GraphMode::kDense) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) g.matrix.set(i, j, weight(i, j));
    return g;
  }
  const auto side = static_cast<std::ptrdiff_t>(grid_side);
  for (std::ptrdiff_t r = 0; r < side; ++r) {
    for (std::ptrdiff_t c = 0; c < side; ++c) {
      const auto i = static_cast<std::size_t>(r * side + c);
      // Forward half of the 8-neighbourhood so each edge is visited once.
      for (auto [dr, dc] : {std::pair{0, 1}, {1, -1}, {1, 0}, {1, 1}}) {
        const std::ptrdiff_t rr = r + dr;
        const std::ptrdiff_t cc = c + dc;
        if (rr < 0 || rr >= side || cc < 0 || cc >= side) continue;
        const auto j = static_cast<std::size_t>(rr * side + cc);
        g.matrix.set(i, j, weight(i, j));
      }
    }
  }
  return g;
}

SaliencyPartition ncut_bipartition(const AffinityGraph& graph, const SaliencyOptions& options) {
  const std::size_t n = graph.matrix.dim();
  SaliencyPartition p;
  const Vec degrees = graph.matrix.degrees();
  if (std::any_of(degrees.begin(), degrees.end(), [](double d) { return !(d > 0.0); }) ||
      !linalg::is_connected(graph.matrix)) {
    select_everything(p, n, "affinity graph disconnected");
    return p;
  }
  try {
    auto result = linalg::fiedler_vector(graph.matrix, degrees, options.solver);
    p.fiedler = std::move(result.pair);
    p.iterations = result.iterations;
  } catch (const linalg::NonConvergence& e) {
    select_everything(p, n, e.what());
    p.iterations = e.iterations;
    return p;
  }

  const Vec& z = p.fiedler.vector;
  const auto [lo, hi] = std::minmax_element(z.begin(), z.end());
  if (*hi - *lo < options.min_spread) {
    select_everything(p, n, "degenerate Fiedler spread");
    return p;
  }
  p.threshold = std::accumulate(z.begin(), z.end(), 0.0) / static_cast<double>(n);

  std::vector<std::size_t> upper, lower;
  for (std::size_t i = 0; i < n; ++i) (z[i] >= p.threshold ? upper : lower).push_back(i);

  bool pick_upper = true;
  if (options.rule == SalientRule::kMaxAbs) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (std::abs(z[i]) > std::abs(z[arg])) arg = i;
    pick_upper = z[arg] >= p.threshold;
  } else {
    auto mean_abs = [&](const std::vector<std::size_t>& side) {
      double s = 0.0;
      for (std::size_t i : side) s += std::abs(z[i]);
      return side.empty() ? 0.0 : s / static_cast<double>(side.size());
    };
    pick_upper = mean_abs(upper) >= mean_abs(lower);
  }
  p.selected = pick_upper ? std::move(upper) : std::move(lower);
  p.complement = pick_upper ? std::move(lower) : std::move(upper);
  return p;
}

Vec saliency_query(const SaliencyPartition& partition, const Matrix& v_patch) {
  if (partition.selected.empty()) throw std::invalid_argument("saliency_query: empty selection");
  Vec q(v_patch.cols(), 0.0);
  for (std::size_t i : partition.selected) linalg::axpy(1.0, v_patch.row(i), q);
  const double inv = 1.0 / static_cast<double>(partition.selected.size());
  for (double& x : q) x *= inv;
  return q;
}

SaliencyPartition select_salient(const Matrix& v_patch, std::size_t grid_side, const SaliencyOptions& options) {
  SaliencyPartition p = ncut_bipartition(build_affinity(v_patch, grid_side, options), options);
  p.q_sal = saliency_query(p, v_patch);
  return p;
}

std::vector<int> saliency_mask(const SaliencyPartition& partition, std::size_t grid_side) {
  std::vector<int> mask(grid_side * grid_side, 0);
  for (std::size_t i : partition.selected) {
    if (i >= mask.size()) throw std::invalid_argument("saliency_mask: index outside the grid");
    mask[i] = 1;
  }
  return mask;
}

void write_mask_pgm(const std::filesystem::path& path, const SaliencyPartition& partition, std::size_t grid_side) {
  write_pgm_plain(path, grid_side, grid_side, saliency_mask(partition, grid_side), 1);
}

}  // namespace microtune::saliency

namespace microtune::saliency {

GraphMode parse_graph_mode(const std::string& text) {
  if (text == "auto") return GraphMode::kAuto;
  if (text == "dense") return GraphMode::kDense;
  if (text == "grid-sparse") return GraphMode::kGridSparse;
  throw std::invalid_argument("unknown affinity graph '" + text + "' (auto|dense|grid-sparse)");
}

std::string to_string(GraphMode mode) {
  switch (mode) {
    case GraphMode::kAuto: return "auto";
    case GraphMode::kDense: return "dense";
    case GraphMode::kGridSparse: return "grid-sparse";
  }
  return "auto";
}

SalientRule parse_salient_rule(const std::string& text) {
  if (text == "max-abs") return SalientRule::kMaxAbs;
  if (text == "mean-abs") return SalientRule::kMeanAbs;
  throw std::invalid_argument("unknown salient rule '" + text + "' (max-abs|mean-abs)");
}

std::string to_string(SalientRule rule) {
  return rule == SalientRule::kMaxAbs ? "max-abs" : "mean-abs";
}

}  // namespace microtune::saliency
