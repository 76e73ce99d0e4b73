#include "microtune/linalg.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <queue>
#include <random>
#include <sstream>

namespace microtune::linalg {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

// Flip sign so the largest-magnitude entry is positive.
void canonical_sign(Vec& v) {
  if (v.empty()) return;
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (std::abs(v[i]) > std::abs(v[best])) best = i;
  }
  if (v[best] < 0) {
    for (double& x : v) x = -x;
  }
}

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<RowMajor> as_eigen(Matrix& m) {
  return {m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

Eigen::Map<const RowMajor> as_eigen(const Matrix& m) {
  return {m.data().data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, Vec data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  require(data_.size() == rows_ * cols_, "Matrix: data length != rows * cols");
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::row_vector(std::span<const double> v) {
  return Matrix(1, v.size(), Vec(v.begin(), v.end()));
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  as_eigen(out).noalias() = as_eigen(a) * as_eigen(b);
  return out;
}

Matrix matmul_at_b(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), "matmul_at_b: row counts differ");
  Matrix out(a.cols(), b.cols());
  as_eigen(out).noalias() = as_eigen(a).transpose() * as_eigen(b);
  return out;
}

Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), "matmul_a_bt: column counts differ");
  Matrix out(a.rows(), b.rows());
  as_eigen(out).noalias() = as_eigen(a) * as_eigen(b).transpose();
  return out;
}

Vec vec_mat(std::span<const double> v, const Matrix& m) {
  require(v.size() == m.rows(), "vec_mat: length != rows");
  Vec out(m.cols(), 0.0);
  for (std::size_t k = 0; k < m.rows(); ++k) axpy(v[k], m.row(k), out);
  return out;
}

Vec mat_vec(const Matrix& m, std::span<const double> v) {
  require(v.size() == m.cols(), "mat_vec: length != cols");
  Vec out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) out[i] = dot(m.row(i), v);
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  require(x.size() == y.size(), "axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

Vec softmax(std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError("non-finite logits");
  }
  Vec out(v.begin(), v.end());
  if (out.empty()) return out;
  const double mx = *std::max_element(out.begin(), out.end());
  double total = 0.0;
  for (double& x : out) {
    x = std::exp(x - mx);
    total += x;
  }
  for (double& x : out) x /= total;
  return out;
}

Matrix row_softmax(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const Vec row = softmax(m.row(r));
    std::copy(row.begin(), row.end(), out.row(r).begin());
  }
  return out;
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (!(na > 0.0) || !(nb > 0.0)) throw NumericError("degenerate embedding");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

double frobenius(const Matrix& m) { return norm2(m.data()); }

double checksum(const Matrix& m) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t word) {
    for (int b = 0; b < 8; ++b) {
      h ^= (word >> (8 * b)) & 0xffU;
      h *= 1099511628211ULL;
    }
  };
  mix(m.rows());
  mix(m.cols());
  for (double x : m.data()) mix(std::bit_cast<std::uint64_t>(x));
  // Keep the 53 low bits so the value round-trips through a double exactly.
  return static_cast<double>(h & ((1ULL << 53) - 1));
}

SparseSymMatrix::SparseSymMatrix(std::size_t dim) : dim_(dim) {
  require(dim >= 2, "SparseSymMatrix: dim must be >= 2");
}

void SparseSymMatrix::set(std::size_t i, std::size_t j, double weight) {
  require(i < dim_ && j < dim_, "SparseSymMatrix: index out of range");
  require(i != j, "SparseSymMatrix: diagonal entries are not stored");
  require(weight >= 0.0 && std::isfinite(weight), "SparseSymMatrix: weight must be finite and >= 0");
  if (i > j) std::swap(i, j);
  const std::size_t key = i * dim_ + j;
  if (auto it = index_.find(key); it != index_.end()) {
    entries_[it->second].weight = weight;
    return;
  }
  index_.emplace(key, entries_.size());
  entries_.push_back({i, j, weight});
}

double SparseSymMatrix::weight(std::size_t i, std::size_t j) const {
  if (i == j) return 0.0;
  if (i > j) std::swap(i, j);
  auto it = index_.find(i * dim_ + j);
  return it == index_.end() ? 0.0 : entries_[it->second].weight;
}

Vec SparseSymMatrix::degrees() const {
  Vec d(dim_, 0.0);
  for (const auto& e : entries_) {
    d[e.i] += e.weight;
    d[e.j] += e.weight;
  }
  return d;
}

Matrix SparseSymMatrix::to_dense() const {
  Matrix m(dim_, dim_);
  for (const auto& e : entries_) {
    m(e.i, e.j) = e.weight;
    m(e.j, e.i) = e.weight;
  }
  return m;
}

std::vector<EigenPair> dense_sym_eigen(const Matrix& m) {
  require(m.rows() == m.cols(), "dense_sym_eigen: matrix must be square");
  const std::size_t n = m.rows();
  double scale = std::max(1.0, frobenius(m));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(m(i, j) - m(j, i)) > 1e-10 * scale)
        throw NumericError("dense_sym_eigen: matrix is not symmetric");

  Eigen::MatrixXd em(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) em(i, j) = 0.5 * (m(i, j) + m(j, i));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(em);
  if (solver.info() != Eigen::Success) throw NumericError("dense_sym_eigen: solver failed");

  std::vector<EigenPair> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    out[k].value = solver.eigenvalues()(k);
    out[k].vector.resize(n);
    for (std::size_t i = 0; i < n; ++i) out[k].vector[i] = solver.eigenvectors()(i, k);
    canonical_sign(out[k].vector);
  }
  return out;
}

Matrix normalized_laplacian(const SparseSymMatrix& affinity, std::span<const double> degrees) {
  const std::size_t n = affinity.dim();
  require(degrees.size() == n, "normalized_laplacian: degree length mismatch");
  Matrix l = Matrix::identity(n);
  for (const auto& e : affinity.entries()) {
    const double v = -e.weight / std::sqrt(degrees[e.i] * degrees[e.j]);
    l(e.i, e.j) = v;
    l(e.j, e.i) = v;
  }
  return l;
}

NonConvergence::NonConvergence(std::size_t iters, double res)
    : NumericError([&] {
        std::ostringstream os;
        os << "fiedler_vector: no convergence after " << iters << " iterations (residual " << res
           << ")";
        return os.str();
      }()),
      iterations(iters),
      residual(res) {}

bool is_connected(const SparseSymMatrix& affinity) {
  const std::size_t n = affinity.dim();
  std::vector<std::vector<std::size_t>> adj(n);
  for (const auto& e : affinity.entries()) {
    if (e.weight > 0.0) {
      adj[e.i].push_back(e.j);
      adj[e.j].push_back(e.i);
    }
  }
  std::vector<bool> seen(n, false);
  std::queue<std::size_t> frontier;
  frontier.push(0);
  seen[0] = true;
  std::size_t reached = 1;
  while (!frontier.empty()) {
    const std::size_t u = frontier.front();
    frontier.pop();
    for (std::size_t v : adj[u]) {
      if (!seen[v]) {
        seen[v] = true;
        ++reached;
        frontier.push(v);
      }
    }
  }
  return reached == n;
}

FiedlerResult fiedler_vector(const SparseSymMatrix& affinity, std::span<const double> degrees,
                             const FiedlerOptions& options) {
  const std::size_t n = affinity.dim();
  require(degrees.size() == n, "fiedler_vector: degree length mismatch");
  for (double d : degrees) {
    if (!(d > 0.0)) throw NumericError("fiedler_vector: all degrees must be positive");
  }
  if (!is_connected(affinity)) throw DisconnectedGraph();

  // Operator M = 2I - L_sym = I + D^{-1/2} E D^{-1/2}; spectrum in [0, 2].
  Vec inv_sqrt_d(n);
  Vec z0(n);
  for (std::size_t i = 0; i < n; ++i) {
    inv_sqrt_d[i] = 1.0 / std::sqrt(degrees[i]);
    z0[i] = std::sqrt(degrees[i]);
  }
  const double z0n = norm2(z0);
  for (double& x : z0) x /= z0n;

  struct Edge {
    std::size_t i, j;
    double w;
  };
  std::vector<Edge> edges;
  edges.reserve(affinity.nnz());
  for (const auto& e : affinity.entries()) {
    if (e.weight > 0.0) edges.push_back({e.i, e.j, e.weight * inv_sqrt_d[e.i] * inv_sqrt_d[e.j]});
  }
  auto apply = [&](const Vec& x, Vec& y) {
    std::copy(x.begin(), x.end(), y.begin());
    for (const auto& e : edges) {
      y[e.i] += e.w * x[e.j];
      y[e.j] += e.w * x[e.i];
    }
  };
  auto deflate = [&](Vec& x) { axpy(-dot(x, z0), z0, x); };

  std::mt19937_64 rng(0x5eedf1ed1e5ULL);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  Vec v(n);
  for (double& x : v) x = unif(rng);
  deflate(v);
  double vn = norm2(v);
  for (double& x : v) x /= vn;

  Vec mv(n);
  double residual = std::numeric_limits<double>::infinity();
  double rayleigh = 0.0;
  std::size_t it = 0;
  for (; it < options.max_iterations; ++it) {
    apply(v, mv);
    deflate(mv);
    rayleigh = dot(v, mv);
    double r2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = mv[i] - rayleigh * v[i];
      r2 += r * r;
    }
    residual = std::sqrt(r2);
    if (residual <= options.tolerance) break;
    vn = norm2(mv);
    if (!(vn > 0.0)) throw NumericError("fiedler_vector: iterate collapsed to zero");
    for (std::size_t i = 0; i < n; ++i) v[i] = mv[i] / vn;
  }
  if (residual > options.tolerance) throw NonConvergence(it, residual);

  // Remove the last bit of drift along z0 before reporting.
  deflate(v);
  vn = norm2(v);
  for (double& x : v) x /= vn;
  canonical_sign(v);
  FiedlerResult out;
  out.pair.value = 2.0 - rayleigh;
  out.pair.vector = std::move(v);
  out.iterations = it;
  out.residual = residual;
  return out;
}

}  // namespace microtune::linalg
