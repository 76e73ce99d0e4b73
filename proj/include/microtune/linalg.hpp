#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace microtune::linalg {

using Vec = std::vector<double>;

/// Row-major dense matrix of doubles. Vectors that need a matrix shape
/// (LayerNorm affines, the empty token) are stored as 1 x d.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, Vec data);

  static Matrix identity(std::size_t n);
  static Matrix row_vector(std::span<const double> v);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Vec& data() { return data_; }
  const Vec& data() const { return data_; }

  bool all_finite() const;
  Matrix transposed() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vec data_;
};

/// Thrown for numerical contract violations (non-finite input, zero norms,
/// asymmetric input to the symmetric solvers).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dense kernels. Shapes are checked and mismatches throw std::invalid_argument.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_at_b(const Matrix& a, const Matrix& b);  // a^T b
Matrix matmul_a_bt(const Matrix& a, const Matrix& b);  // a b^T
Vec vec_mat(std::span<const double> v, const Matrix& m);  // v^T m
Vec mat_vec(const Matrix& m, std::span<const double> v);  // m v

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
void axpy(double alpha, std::span<const double> x, std::span<double> y);

/// Row-wise softmax with max subtraction.
Matrix row_softmax(const Matrix& m);
Vec softmax(std::span<const double> v);

/// Cosine similarity. Throws NumericError("degenerate embedding") if either
/// operand has zero norm.
double cosine_sim(std::span<const double> a, std::span<const double> b);

double frobenius(const Matrix& m);
double checksum(const Matrix& m);  // order-sensitive FNV-1a over the raw bits

/// Undirected weighted graph stored as its upper triangle (i < j).
class SparseSymMatrix {
 public:
  struct Entry {
    std::size_t i;
    std::size_t j;
    double weight;
  };

  explicit SparseSymMatrix(std::size_t dim);

  /// Inserts or overwrites edge {i, j}; the pair is stored with i < j.
  void set(std::size_t i, std::size_t j, double weight);

  std::size_t dim() const { return dim_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t nnz() const { return entries_.size(); }

  double weight(std::size_t i, std::size_t j) const;
  Vec degrees() const;
  Matrix to_dense() const;

 private:
  std::size_t dim_;
  std::vector<Entry> entries_;
  std::unordered_map<std::size_t, std::size_t> index_;  // i * dim + j -> entry
};

struct EigenPair {
  double value = 0.0;
  Vec vector;
};

/// Full symmetric eigendecomposition, ascending eigenvalues. Used as the
/// reference for the iterative Fiedler solver.
std::vector<EigenPair> dense_sym_eigen(const Matrix& m);

/// D^{-1/2} (D - E) D^{-1/2}
Matrix normalized_laplacian(const SparseSymMatrix& affinity, std::span<const double> degrees);

struct FiedlerOptions {
  double tolerance = 1e-10;
  std::size_t max_iterations = 50'000;
};

class NonConvergence : public NumericError {
 public:
  NonConvergence(std::size_t iterations, double residual);
  std::size_t iterations;
  double residual;
};

class DisconnectedGraph : public NumericError {
 public:
  DisconnectedGraph() : NumericError("affinity graph disconnected") {}
};

struct FiedlerResult {
  EigenPair pair;
  std::size_t iterations = 0;
  double residual = 0.0;
};

/// Second-smallest eigenpair of the normalized Laplacian via power iteration
/// on 2I - L_sym, deflated against D^{1/2} 1. The returned vector has unit
/// norm and its largest-magnitude entry is positive.
FiedlerResult fiedler_vector(const SparseSymMatrix& affinity, std::span<const double> degrees,
                             const FiedlerOptions& options = {});

bool is_connected(const SparseSymMatrix& affinity);

}  // namespace microtune::linalg
